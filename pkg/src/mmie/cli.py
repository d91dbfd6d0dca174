"""Command-line surface: train, eval, predict, sweep, ablate.

Exit codes: 0 success, 2 usage/config, 3 data/format, 4 runtime failure.
All inputs and outputs are files (JSON config, JSONL manifests and
predictions, CSV reports, binary tensor files); no network access.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import TrainConfig, load_config
from .data import load_manifest, make_batches
from .errors import ConfigError, DataError, FormatError, MmieError
from .metrics import contribution_scores, decode_bio, write_contribution_csv
from .model import Model
from .training import (encoder_for_model, evaluate_model, load_checkpoint,
                       train)

log = logging.getLogger(__name__)

BETA_GRID = [0.0, 0.01, 0.1, 0.5, 1.0, 1.5, 2.0]


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_path(flag_value, cfg_value, config_path, name) -> Path:
    if flag_value:
        return Path(flag_value)
    if cfg_value:
        return Path(config_path).parent / cfg_value
    raise ConfigError(f"no {name} manifest: pass --{name} or set data.{name} "
                      "in the config")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_path = _data_path(args.train, cfg.train, args.config, "train")
    dev_path = _data_path(args.dev, cfg.dev, args.config, "dev")
    train_set = load_manifest(train_path)
    dev_set = load_manifest(dev_path)
    result = train(cfg, train_set, dev_set, args.out)
    print(f"best dev F1 {result.best_f1:.4f} at epoch {result.best_epoch}; "
          f"checkpoint: {result.checkpoint_dir}")
    return 0


def _check_compat(model: Model, args) -> None:
    if getattr(args, "config", None):
        other = load_config(args.config)
        for field in ("d", "h", "task"):
            got = getattr(other, field)
            want = getattr(model.cfg, field)
            if got != want:
                raise ConfigError(
                    f"checkpoint has {field}={want}, config says {got}")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _check_compat(model, args)
    examples = load_manifest(args.data)
    encoder = encoder_for_model(model)
    report = evaluate_model(model, examples, encoder, model.cfg)
    print(report.to_text())
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _check_compat(model, args)
    examples = load_manifest(args.data)
    encoder = encoder_for_model(model)
    contrib_dir = Path(args.contrib_dir) if args.contrib_dir else None
    if contrib_dir:
        contrib_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(model.cfg.seed)
    lines = []
    for batch in make_batches(examples, model.cfg.batch_size, seed=0,
                              encoder=encoder, shuffle=False):
        for enc in batch:
            if contrib_dir:
                pred, (x_t, x_v, lat_t, lat_v) = model.predict_example(
                    enc, rng=rng, with_reps=True)
                t = enc.true_len
                m = int(enc.image_mask.sum())
                write_contribution_csv(
                    contribution_scores(x_t.values[:t], lat_t.z.values[:t]),
                    contrib_dir / f"{enc.example.id}.text.csv")
                write_contribution_csv(
                    contribution_scores(x_v.values[:m], lat_v.z.values[:m]),
                    contrib_dir / f"{enc.example.id}.image.csv")
            else:
                pred = model.predict_example(enc, rng=rng)
            if model.cfg.task == "mner":
                spans = sorted(decode_bio(pred))
                lines.append({"id": enc.example.id, "tokens": enc.example.tokens,
                              "labels": pred,
                              "spans": [[s, e, t] for s, e, t in spans]})
            else:
                lines.append({"id": enc.example.id, "relation": pred})
    with open(args.out, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line) + "\n")
    print(f"wrote {len(lines)} predictions to {args.out}")
    return 0


def _sweep_points(grid, mode):
    if mode == "beta1":
        return [("beta1", v, 1.0) for v in grid]
    if mode == "beta2":
        return [("beta2", 1.0, v) for v in grid]
    if mode == "both":
        return [("both", v, v) for v in grid]
    # all three series, in the order above
    return (_sweep_points(grid, "beta1") + _sweep_points(grid, "beta2")
            + _sweep_points(grid, "both"))


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    grid = BETA_GRID if args.grid is None else \
        [float(v) for v in args.grid.split(",") if v.strip() != ""]
    if not grid:
        raise ConfigError("sweep grid is empty")
    if any(v < 0 for v in grid):
        raise ConfigError("sweep grid values must be nonnegative")
    train_path = _data_path(args.train, cfg.train, args.config, "train")
    dev_path = _data_path(args.dev, cfg.dev, args.config, "dev")
    train_set = load_manifest(train_path)
    dev_set = load_manifest(dev_path)
    rows = []
    for mode, b1, b2 in _sweep_points(grid, args.mode):
        run_cfg = dataclasses.replace(cfg, beta1=b1, beta2=b2)
        with tempfile.TemporaryDirectory() as scratch:
            result = train(run_cfg, train_set, dev_set, scratch)
        rows.append((mode, b1, b2, result.best_f1))
        log.info("sweep %s beta1=%g beta2=%g -> dev F1 %.4f", mode, b1, b2,
                 result.best_f1)
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "beta1", "beta2", "dev_F1"])
        for mode, b1, b2, f1 in rows:
            writer.writerow([mode, repr(b1), repr(b2), repr(f1)])
    print(f"wrote {len(rows)} sweep rows to {args.csv}")
    return 0


ABLATION_VARIANTS = {
    "full": {},
    "rr": {"enable_rr": False},
    "ar": {"enable_ar": False},
    "both": {"enable_rr": False, "enable_ar": False},
}


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    train_path = _data_path(args.train, cfg.train, args.config, "train")
    dev_path = _data_path(args.dev, cfg.dev, args.config, "dev")
    train_set = load_manifest(train_path)
    dev_set = load_manifest(dev_path)
    names = ["full", "rr", "ar", "both"] if args.drop == "all" \
        else ["full", args.drop]
    rows = []
    full_f1 = None
    for name in names:
        run_cfg = dataclasses.replace(cfg, **ABLATION_VARIANTS[name])
        with tempfile.TemporaryDirectory() as scratch:
            result = train(run_cfg, train_set, dev_set, scratch)
        dev_rows = [r for r in result.rows
                    if r["split"] == "dev" and r["epoch"] == result.best_epoch]
        best = dev_rows[0]
        if name == "full":
            full_f1 = best["F1"]
            delta = ""
        else:
            delta = best["F1"] - full_f1
        label = "full" if name == "full" else f"-{name}"
        rows.append((label, best["P"], best["R"], best["F1"], delta))
        log.info("ablation %s: F1 %.4f", label, best["F1"])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "P", "R", "F1", "delta_F1"])
        for label, p, r, f1, delta in rows:
            writer.writerow([label, repr(p), repr(r), repr(f1),
                             repr(delta) if delta != "" else ""])
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmie",
        description="Multimodal entity and relation extraction engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and keep the best checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--train", help="training manifest (JSONL)")
    p.add_argument("--dev", help="development manifest (JSONL)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="optional cross-check of d/h/task")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write decoded predictions as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="optional cross-check of d/h/task")
    p.add_argument("--contrib-dir",
                   help="also write per-example contribution-score CSVs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="train across a grid of bottleneck weights")
    p.add_argument("--config", required=True)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--grid", help="comma-separated values "
                   f"(default {','.join(str(v) for v in BETA_GRID)})")
    p.add_argument("--mode", choices=["both", "beta1", "beta2", "all"],
                   default="all")
    p.add_argument("--csv", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="retrain with regularizers disabled")
    p.add_argument("--config", required=True)
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--drop", choices=["rr", "ar", "both", "all"], default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except MmieError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - keep the one-line contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
