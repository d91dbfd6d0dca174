"""Exporter CLI: rewrite a raw manifest into engine-ready form.

  mmie-export text   --manifest raw.jsonl --out-dir D [--model NAME|DIR]
                     [--untrained] [--pool mean|first]
  mmie-export images --manifest raw.jsonl --images-root R --out-dir D
                     [--boxes boxes.jsonl] [--untrained]

Each command writes feature files under the output directory and emits
D/manifest.jsonl: the input lines with text_ref / image_ref pointing at the
new files (paths relative to that manifest). Commands chain: run text first,
then feed D/manifest.jsonl to images with the same --out-dir, which rewrites
the manifest in place while earlier refs stay valid. Raw manifest lines
carry an "image" key naming the source image for the images step;
boxes.jsonl lines are {"image": <same path>, "boxes": [[x1, y1, x2, y2], ...]}.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ExporterError
from .images import (PretrainedImageEncoder, UntrainedImageEncoder,
                     export_image_features)
from .text import (PretrainedTextEncoder, UntrainedTextEncoder,
                   export_text_features)

log = logging.getLogger(__name__)


def _read_manifest(path: Path) -> list[dict]:
    if not path.exists():
        raise ExporterError(f"manifest not found: {path}")
    lines = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ExporterError(f"{path}:{lineno}: malformed JSON ({e.msg})")
        if not isinstance(obj, dict) or "id" not in obj:
            raise ExporterError(f"{path}:{lineno}: line needs an 'id'")
        lines.append(obj)
    return lines


def _write_manifest(lines: list[dict], out_dir: Path) -> Path:
    out = out_dir / "manifest.jsonl"
    with open(out, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line) + "\n")
    return out


def cmd_text(args) -> int:
    manifest = Path(args.manifest)
    lines = _read_manifest(manifest)
    for line in lines:
        if not isinstance(line.get("tokens"), list) or not line["tokens"]:
            raise ExporterError(f"{line['id']}: missing or empty 'tokens'")
    encoder = (UntrainedTextEncoder(seed=args.seed) if args.untrained
               else PretrainedTextEncoder(args.model, pool=args.pool))
    out_dir = Path(args.out_dir)
    fragments = export_text_features(
        [(line["id"], line["tokens"]) for line in lines], out_dir, encoder)
    refs = {f["id"]: f["text_ref"] for f in fragments}
    for line in lines:
        line["text_ref"] = refs[line["id"]]
    path = _write_manifest(lines, out_dir)
    print(f"wrote {len(lines)} text feature files; manifest: {path}")
    return 0


def cmd_images(args) -> int:
    manifest = Path(args.manifest)
    lines = _read_manifest(manifest)
    boxes_by_image: dict[str, list] = {}
    if args.boxes:
        for entry in _read_manifest_free(Path(args.boxes)):
            boxes_by_image[entry["image"]] = entry.get("boxes", [])
    encoder = (UntrainedImageEncoder(seed=args.seed) if args.untrained
               else PretrainedImageEncoder())
    root = Path(args.images_root)
    out_dir = Path(args.out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for line in lines:
        image = line.get("image")
        if not image:
            raise ExporterError(f"{line['id']}: no 'image' key to encode")
        rel = f"images/{line['id']}.mmtf"
        export_image_features(root / image, boxes_by_image.get(image, []),
                              out_dir / rel, encoder)
        del line["image"]
        line["image_ref"] = rel
    path = _write_manifest(lines, out_dir)
    print(f"wrote {len(lines)} image feature files; manifest: {path}")
    return 0


def _read_manifest_free(path: Path) -> list[dict]:
    if not path.exists():
        raise ExporterError(f"boxes file not found: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ExporterError(f"{path}:{lineno}: malformed JSON ({e.msg})")
        if "image" not in obj:
            raise ExporterError(f"{path}:{lineno}: line needs an 'image'")
        out.append(obj)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmie-export")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("text", help="export contextual token features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", default="bert-base-uncased",
                   help="checkpoint name or local directory")
    p.add_argument("--pool", choices=["mean", "first"], default="mean",
                   help="wordpiece-to-token pooling")
    p.add_argument("--untrained", action="store_true",
                   help="seeded random weights (offline dev/test mode)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_text)

    p = sub.add_parser("images", help="export whole-image + object features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-root", required=True)
    p.add_argument("--boxes", help="JSONL of per-image object boxes")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--untrained", action="store_true",
                   help="seeded random weights (offline dev/test mode)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_images)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExporterError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
