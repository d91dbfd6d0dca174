"""Composite objective, the optimizer, the epoch loop, and checkpoints.

The scalar objective is the sum of four logged components:

    loss = kl_t + kl_v + l_ar + l_task

where kl_t / kl_v are the beta-weighted compression terms, l_ar the
contrastive alignment term, and l_task the task negative log-likelihood
(which also serves as the reconstruction surrogate, so it appears once
unless double_count_task is set). Disabled components are exactly 0.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics as M
from . import mmtf
from .autodiff import Tensor
from .config import TrainConfig
from .data import (DatasetEncoder, Example, Vocab, make_batches)
from .errors import DataError, FormatError
from .model import Model
from .regularizers import alignment_loss, kl_to_std_normal

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "P", "R", "F1", "loss",
                  "kl_t", "kl_v", "l_ar", "l_task"]


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Moments beta1=0.9, beta2=0.999, eps=1e-8; bias correction each step;
    the decay term lr * wd * param is subtracted separately from the
    adaptive update, both taken at the pre-step parameter value.
    """

    def __init__(self, params: Sequence[Tensor], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> bool:
        """Apply one update; aborted (False) if any gradient is non-finite."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                log.error("non-finite gradient on %s; step aborted",
                          p.name or p.uid)
                return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.values -= self.lr * (update + self.weight_decay * p.values)
        return True


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float((p.grad ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def total_loss(outputs, disc, cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Batch objective plus its logged components (floats)."""
    n = len(outputs)
    task = outputs[0].task_nll
    for out in outputs[1:]:
        task = task + out.task_nll
    task = task * (1.0 / n)
    task_weight = 2.0 if cfg.double_count_task else 1.0
    l_task = task * task_weight
    loss = l_task
    comps = {"kl_t": 0.0, "kl_v": 0.0, "l_ar": 0.0,
             "l_task": l_task.item()}
    if cfg.enable_rr and cfg.beta1 != 0.0:
        kl = kl_to_std_normal(outputs[0].lat_text)
        for out in outputs[1:]:
            kl = kl + kl_to_std_normal(out.lat_text)
        kl_t = kl * (cfg.beta1 / n)
        loss = loss + kl_t
        comps["kl_t"] = kl_t.item()
    if cfg.enable_rr and cfg.beta2 != 0.0:
        kl = kl_to_std_normal(outputs[0].lat_image)
        for out in outputs[1:]:
            kl = kl + kl_to_std_normal(out.lat_image)
        kl_v = kl * (cfg.beta2 / n)
        loss = loss + kl_v
        comps["kl_v"] = kl_v.item()
    if cfg.enable_ar:
        l_ar = alignment_loss([(o.lat_text, o.lat_image) for o in outputs], disc)
        loss = loss + l_ar
        comps["l_ar"] = l_ar.item()
    comps["loss"] = loss.item()
    return loss, comps


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Report:
    task: str
    n_examples: int
    precision: float
    recall: float
    f1: float
    accuracy: Optional[float] = None
    per_type: Optional[dict] = None
    components: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"examples: {self.n_examples}",
                 f"P={self.precision:.4f} R={self.recall:.4f} F1={self.f1:.4f}"]
        if self.accuracy is not None:
            lines.append(f"accuracy={self.accuracy:.4f}")
        if self.per_type:
            for t, (p, r, f1) in sorted(self.per_type.items()):
                lines.append(f"  {t}: P={p:.4f} R={r:.4f} F1={f1:.4f}")
        if self.components:
            parts = " ".join(f"{k}={v:.6f}" for k, v in
                             sorted(self.components.items()))
            lines.append(parts)
        return "\n".join(lines)


def _micro(counts):
    tp, n_pred, n_gold = counts
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f1


def evaluate_model(model: Model, examples: Sequence[Example],
                   encoder: DatasetEncoder, cfg: TrainConfig,
                   with_loss: bool = True) -> Report:
    """Deterministic metrics over a dataset in manifest order."""
    totals = [0, 0, 0]
    by_type: dict[str, list] = {}
    preds, golds = [], []
    comp_sums: dict[str, float] = {}
    n_seen = 0
    rng = np.random.default_rng(cfg.seed)
    for batch in make_batches(examples, cfg.batch_size, seed=0,
                              encoder=encoder, shuffle=False):
        for enc in batch:
            pred = model.predict_example(enc, rng=rng)
            if cfg.task == "mner":
                pred_spans = M.decode_bio(pred)
                gold_spans = M.decode_bio(enc.example.bio_labels)
                totals[0] += len(pred_spans & gold_spans)
                totals[1] += len(pred_spans)
                totals[2] += len(gold_spans)
                types = {s[2] for s in pred_spans} | {s[2] for s in gold_spans}
                for t in types:
                    row = by_type.setdefault(t, [0, 0, 0])
                    pt = {s for s in pred_spans if s[2] == t}
                    gt = {s for s in gold_spans if s[2] == t}
                    row[0] += len(pt & gt)
                    row[1] += len(pt)
                    row[2] += len(gt)
            else:
                preds.append(pred)
                golds.append(enc.example.relation)
        if with_loss:
            outputs = [model.forward_example(enc) for enc in batch]
            _, comps = total_loss(outputs, model.disc, cfg)
            for k, v in comps.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v * len(batch)
        n_seen += len(batch)
    components = {k: v / n_seen for k, v in comp_sums.items()} if n_seen else {}
    if cfg.task == "mner":
        p, r, f1 = _micro(totals)
        per_type = {t: _micro(c) for t, c in by_type.items()}
        return Report(task="mner", n_examples=n_seen, precision=p, recall=r,
                      f1=f1, per_type=per_type, components=components)
    p, r, f1 = M.relation_prf(preds, golds, cfg.negative_relation)
    acc = M.accuracy(preds, golds)
    return Report(task="mre", n_examples=n_seen, precision=p, recall=r, f1=f1,
                  accuracy=acc, components=components)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: Model, out_dir) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    (out_dir / "params").mkdir(parents=True)
    index = {}
    for i, (name, p) in enumerate(model.named_parameters().items()):
        fname = f"params/p{i:04d}.mmtf"
        mmtf.write_tensor_file(p.values, out_dir / fname)
        index[name] = {"file": fname, "shape": list(p.shape)}
    (out_dir / "index.json").write_text(json.dumps({"params": index}, indent=1))
    meta = {"config": model.cfg.to_sections(),
            "vocab": model.vocab.itos if model.vocab else None,
            "bio_labels": model.bio_labels,
            "relations": model.relations}
    (out_dir / "config.json").write_text(json.dumps(meta, indent=1))
    return out_dir


def load_checkpoint(ckpt_dir) -> Model:
    ckpt_dir = Path(ckpt_dir)
    cfg_path = ckpt_dir / "config.json"
    idx_path = ckpt_dir / "index.json"
    if not cfg_path.exists() or not idx_path.exists():
        raise FormatError(f"{ckpt_dir}: not a checkpoint directory "
                          "(missing config.json/index.json)")
    meta = json.loads(cfg_path.read_text())
    cfg = TrainConfig.from_sections(meta["config"])
    vocab = Vocab.from_itos(meta["vocab"]) if meta.get("vocab") else None
    model = Model(cfg, vocab, meta.get("bio_labels"), meta.get("relations"))
    index = json.loads(idx_path.read_text())["params"]
    params = model.named_parameters()
    missing = set(params) - set(index)
    extra = set(index) - set(params)
    if missing or extra:
        raise FormatError(f"{ckpt_dir}: parameter set mismatch "
                          f"(missing {sorted(missing)}, extra {sorted(extra)})")
    for name, entry in index.items():
        vals = mmtf.read_tensor_file(ckpt_dir / entry["file"])
        if list(vals.shape) != entry["shape"] or vals.shape != params[name].shape:
            raise FormatError(f"{ckpt_dir}: shape mismatch for {name}")
        params[name].values = vals.astype(model.dtype)
    return model


def encoder_for_model(model: Model) -> DatasetEncoder:
    return DatasetEncoder(model.cfg.task, model.vocab, model.bio_labels,
                          model.relations, model.cfg.max_len,
                          text_mode=model.cfg.text_mode)


# ---------------------------------------------------------------------------
# the training loop

@dataclass
class TrainResult:
    rows: list[dict]
    best_f1: float
    best_epoch: int
    checkpoint_dir: Optional[Path]
    model: Model


def _validate_inputs(cfg: TrainConfig, examples: Sequence[Example],
                     split: str) -> None:
    for ex in examples:
        if ex.task != cfg.task:
            raise DataError(f"{split} example {ex.id} is a {ex.task} line but "
                            f"the config task is {cfg.task}")
        if ex.image.shape[1] != cfg.d_img_raw:
            raise DataError(f"{split} example {ex.id}: image features are "
                            f"{ex.image.shape[1]} wide, config says "
                            f"{cfg.d_img_raw}")
        if cfg.text_mode == "features":
            if ex.text_feats is None:
                raise DataError(f"{split} example {ex.id}: text_mode=features "
                                "but no text_ref present")
            if ex.text_feats.shape[1] != cfg.d_text:
                raise DataError(f"{split} example {ex.id}: text features are "
                                f"{ex.text_feats.shape[1]} wide, config says "
                                f"{cfg.d_text}")


def build_model_for(cfg: TrainConfig, train_examples: Sequence[Example]) -> Model:
    vocab = Vocab.build(train_examples) if cfg.text_mode == "embed" else None
    bio = relations = None
    if cfg.task == "mner":
        bio = sorted({lab for ex in train_examples for lab in ex.bio_labels}
                     | {"O"})
    else:
        relations = sorted({ex.relation for ex in train_examples})
        if cfg.negative_relation not in relations:
            relations = sorted(relations + [cfg.negative_relation])
    return Model(cfg, vocab, bio, relations)


def train(cfg: TrainConfig, train_examples: Sequence[Example],
          dev_examples: Sequence[Example], out_dir) -> TrainResult:
    """Fit the model, logging per-epoch metrics and keeping the best-dev
    checkpoint; everything is a deterministic function of the config seed."""
    if not train_examples:
        raise DataError("training set is empty")
    _validate_inputs(cfg, train_examples, "train")
    _validate_inputs(cfg, dev_examples, "dev")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model_for(cfg, train_examples)
    encoder = encoder_for_model(model)
    # surface label-space problems in the dev split before the first step
    for _ in make_batches(dev_examples, cfg.batch_size, seed=0,
                          encoder=encoder, shuffle=False):
        pass
    params = model.parameters()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    rows: list[dict] = []
    best_f1 = -1.0
    best_epoch = -1
    ckpt_dir = out_dir / "checkpoint"
    saved = False
    for epoch in range(1, cfg.epochs + 1):
        eps_rng = np.random.default_rng([cfg.seed, 11, epoch])
        sums: dict[str, float] = {}
        n_seen = 0
        for batch in make_batches(train_examples, cfg.batch_size,
                                  seed=[cfg.seed, 5, epoch], encoder=encoder):
            ad.zero_grad(params)
            with ad.record() as tape:
                outputs = []
                for enc in batch:
                    eps_t = eps_rng.standard_normal(
                        (enc.text_mask.shape[0], cfg.d))
                    eps_v = eps_rng.standard_normal(
                        (enc.image_mask.shape[0], cfg.d))
                    outputs.append(model.forward_example(enc, eps_t, eps_v))
                loss, comps = total_loss(outputs, model.disc, cfg)
            tape.backward(loss)
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip)
            if not opt.step():
                log.error("epoch %d: skipped an update due to non-finite "
                          "gradients", epoch)
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            n_seen += len(batch)
        if n_seen == 0:
            raise DataError("every training example was skipped (see "
                            "truncation warnings); nothing to fit")
        train_comps = {k: v / n_seen for k, v in sums.items()}
        rows.append({"epoch": epoch, "split": "train", "P": "", "R": "",
                     "F1": "", **{k: train_comps.get(k, 0.0) for k in
                                  ("loss", "kl_t", "kl_v", "l_ar", "l_task")}})
        report = evaluate_model(model, dev_examples, encoder, cfg)
        rows.append({"epoch": epoch, "split": "dev", "P": report.precision,
                     "R": report.recall, "F1": report.f1,
                     **{k: report.components.get(k, 0.0) for k in
                        ("loss", "kl_t", "kl_v", "l_ar", "l_task")}})
        log.info("epoch %d: train loss %.6f, dev F1 %.4f", epoch,
                 train_comps.get("loss", float("nan")), report.f1)
        if report.f1 > best_f1:
            best_f1 = report.f1
            best_epoch = epoch
            save_checkpoint(model, ckpt_dir)
            saved = True
    write_metrics_csv(rows, out_dir / "metrics.csv")
    return TrainResult(rows=rows, best_f1=best_f1, best_epoch=best_epoch,
                       checkpoint_dir=ckpt_dir if saved else None, model=model)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
