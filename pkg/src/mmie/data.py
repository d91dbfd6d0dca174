"""Dataset ingestion: JSONL manifests, feature files, vocabularies, batches.

A manifest line is one JSON object:

  {"id": ..., "tokens": [...],
   "bio_labels": [...]                        # sequence-labeling task
   | "relation": ..., "head_span": [s, e], "tail_span": [s, e],   # relation task
   "image_ref": "path.mmtf", "text_ref": "path.mmtf"?}            # text_ref optional

Paths are resolved relative to the manifest's directory. Image files hold
(m+1) feature rows (whole image first, then m objects); optional text
feature files hold (n+2) rows (leading/trailing marker rows included).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import mmtf
from .errors import DataError, FormatError, ShapeError

log = logging.getLogger(__name__)

MANIFEST_KEYS = {"id", "tokens", "bio_labels", "relation", "head_span",
                 "tail_span", "image_ref", "text_ref"}


# ---------------------------------------------------------------------------
# BIO handling (strict validation; lenient decoding lives in metrics)

def validate_bio(labels: Sequence[str]) -> Optional[str]:
    """Return an error message for ill-formed BIO sequences, else None."""
    prev = "O"
    for i, lab in enumerate(labels):
        if lab == "O":
            prev = lab
            continue
        if len(lab) < 3 or lab[1] != "-" or lab[0] not in "BI":
            return f"label {lab!r} at position {i} is not O/B-X/I-X"
        if lab[0] == "I":
            if prev == "O" or prev[2:] != lab[2:]:
                return f"orphan {lab!r} at position {i} (no matching B-/I- before it)"
        prev = lab
    return None


@dataclass
class Example:
    id: str
    tokens: list[str]
    bio_labels: Optional[list[str]] = None
    relation: Optional[str] = None
    head_span: Optional[tuple[int, int]] = None
    tail_span: Optional[tuple[int, int]] = None
    image_ref: str = ""
    text_ref: Optional[str] = None
    image: Optional[np.ndarray] = None       # (m+1, d_img_raw)
    text_feats: Optional[np.ndarray] = None  # (n+2, d_text) when text_ref given

    @property
    def task(self) -> str:
        return "mner" if self.bio_labels is not None else "mre"


def _parse_span(obj, key: str, n: int) -> tuple[int, int]:
    span = obj.get(key)
    if (not isinstance(span, (list, tuple)) or len(span) != 2
            or not all(isinstance(v, int) for v in span)):
        raise DataError(f"{key} must be a [start, end] pair of ints")
    s, e = span
    if not (0 <= s <= e < n):
        raise DataError(f"{key} [{s}, {e}] out of range for {n} tokens")
    return s, e


def _parse_line(obj: dict, base: Path, tensor_cache: dict) -> Example:
    unknown = set(obj) - MANIFEST_KEYS
    if unknown:
        raise DataError(f"unknown manifest keys {sorted(unknown)}")
    ex_id = obj.get("id")
    if not isinstance(ex_id, str) or not ex_id:
        raise DataError("missing or empty 'id'")
    tokens = obj.get("tokens")
    if (not isinstance(tokens, list) or not tokens
            or not all(isinstance(t, str) and t for t in tokens)):
        raise DataError("'tokens' must be a non-empty list of non-empty strings")
    n = len(tokens)

    ex = Example(id=ex_id, tokens=list(tokens))
    if "bio_labels" in obj:
        if any(k in obj for k in ("relation", "head_span", "tail_span")):
            raise DataError("line mixes bio_labels with relation keys")
        labels = obj["bio_labels"]
        if not isinstance(labels, list) or len(labels) != n:
            raise DataError(f"bio_labels must list {n} labels")
        err = validate_bio(labels)
        if err:
            raise DataError(err)
        ex.bio_labels = list(labels)
    elif "relation" in obj:
        rel = obj["relation"]
        if not isinstance(rel, str) or not rel:
            raise DataError("'relation' must be a non-empty string")
        head = _parse_span(obj, "head_span", n)
        tail = _parse_span(obj, "tail_span", n)
        if head == tail:
            raise DataError("head_span and tail_span may not be identical")
        ex.relation, ex.head_span, ex.tail_span = rel, head, tail
    else:
        raise DataError("line carries neither bio_labels nor relation")

    ref = obj.get("image_ref")
    if not isinstance(ref, str) or not ref:
        raise DataError("missing 'image_ref'")
    ex.image_ref = ref
    path = base / ref
    try:
        if path not in tensor_cache:
            tensor_cache[path] = mmtf.read_tensor_file(path)
        ex.image = tensor_cache[path]
    except (OSError, FormatError) as e:
        raise DataError(f"image_ref {ref!r}: {e}") from e
    if ex.image.shape[0] < 1:
        raise DataError(f"image_ref {ref!r} holds no feature rows")

    if "text_ref" in obj:
        tref = obj["text_ref"]
        if not isinstance(tref, str) or not tref:
            raise DataError("'text_ref' must be a non-empty string")
        ex.text_ref = tref
        tpath = base / tref
        try:
            if tpath not in tensor_cache:
                tensor_cache[tpath] = mmtf.read_tensor_file(tpath)
            ex.text_feats = tensor_cache[tpath]
        except (OSError, FormatError) as e:
            raise DataError(f"text_ref {tref!r}: {e}") from e
        if ex.text_feats.shape[0] != n + 2:
            raise DataError(
                f"text_ref {tref!r} has {ex.text_feats.shape[0]} rows, "
                f"expected {n + 2}")
    return ex


def load_manifest(path) -> list[Example]:
    """Load and validate a JSONL manifest; reject bad lines with line numbers."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    examples: list[Example] = []
    failures: list[str] = []
    cache: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("line is not a JSON object")
                examples.append(_parse_line(obj, base, cache))
            except json.JSONDecodeError as e:
                failures.append(f"line {lineno}: malformed JSON ({e.msg})")
            except DataError as e:
                ident = ""
                try:
                    ident = f" (id={json.loads(line).get('id')})"
                except Exception:
                    pass
                failures.append(f"line {lineno}{ident}: {e}")
    if failures:
        raise DataError(f"{path}: {len(failures)} invalid line(s):\n  "
                        + "\n  ".join(failures))
    tasks = {ex.task for ex in examples}
    if len(tasks) > 1:
        raise DataError(f"{path}: manifest mixes tasks {sorted(tasks)}")
    return examples


# ---------------------------------------------------------------------------
# vocabulary and label indexing

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"


class Vocab:
    """Token table with fixed special rows (PAD=0, UNK=1, CLS=2, SEP=3)."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = [PAD, UNK, CLS, SEP] + sorted(set(tokens) - {PAD, UNK, CLS, SEP})
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, tokens: Sequence[str], pad_to: int | None = None) -> np.ndarray:
        """Ids for [CLS] tokens [SEP], padded with PAD up to pad_to+2 rows."""
        ids = [self.stoi[CLS]] + [self.id_of(t) for t in tokens] + [self.stoi[SEP]]
        if pad_to is not None:
            ids += [self.stoi[PAD]] * (pad_to - len(tokens))
        return np.asarray(ids, dtype=np.intp)

    @classmethod
    def build(cls, examples: Sequence[Example]) -> "Vocab":
        seen = set()
        for ex in examples:
            seen.update(ex.tokens)
        return cls(sorted(seen))

    @classmethod
    def from_itos(cls, itos: Sequence[str]) -> "Vocab":
        if list(itos[:4]) != [PAD, UNK, CLS, SEP]:
            raise DataError("vocabulary list must start with the special rows")
        v = cls.__new__(cls)
        v.itos = list(itos)
        v.stoi = {t: i for i, t in enumerate(v.itos)}
        return v


def embed_text(tokens: Sequence[str], vocab: Vocab, table: ad.Tensor) -> ad.Tensor:
    """Rows of the embedding table for [CLS] tokens [SEP]; rows are learnable."""
    if table.shape[0] != len(vocab):
        raise ShapeError(
            f"embedding table has {table.shape[0]} rows, vocab needs {len(vocab)}")
    return ad.gather_rows(table, vocab.encode(tokens))


def project_images(raw: ad.Tensor, w_img: ad.Tensor) -> ad.Tensor:
    """Project raw image feature rows into the shared model width."""
    if raw.shape[1] != w_img.shape[0]:
        raise ShapeError(
            f"image features are {raw.shape[1]} wide, projection expects "
            f"{w_img.shape[0]}")
    return ad.matmul(raw, w_img)


# ---------------------------------------------------------------------------
# batching

@dataclass
class EncodedExample:
    example: Example
    n_tokens: int                       # token count after truncation
    token_ids: Optional[np.ndarray]     # (T,) when embedding mode
    text_feats: Optional[np.ndarray]    # (T, d_text) when feature mode
    text_mask: np.ndarray               # (T, 1): CLS..SEP valid, padding 0
    label_ids: Optional[np.ndarray]     # (T,) BIO ids incl. CLS/SEP as "O"
    relation_id: Optional[int]
    image: np.ndarray                   # (M, d_img_raw), zero-padded rows
    image_mask: np.ndarray              # (M, 1)

    @property
    def true_len(self) -> int:
        return self.n_tokens + 2


Batch = list[EncodedExample]


def _truncate(ex: Example, max_len: int) -> Optional[Example]:
    if len(ex.tokens) <= max_len:
        return ex
    if ex.bio_labels is not None:
        if any(lab != "O" for lab in ex.bio_labels[max_len:]):
            log.warning("skipping %s: truncation to %d tokens destroys an "
                        "entity span", ex.id, max_len)
            return None
        cut = replace(ex, tokens=ex.tokens[:max_len],
                      bio_labels=ex.bio_labels[:max_len])
    else:
        if ex.head_span[1] >= max_len or ex.tail_span[1] >= max_len:
            log.warning("skipping %s: truncation to %d tokens destroys an "
                        "entity span", ex.id, max_len)
            return None
        cut = replace(ex, tokens=ex.tokens[:max_len])
    if cut.text_feats is not None:
        # keep CLS + first max_len token rows + the original SEP row
        feats = cut.text_feats
        cut.text_feats = np.vstack([feats[:max_len + 1], feats[-1:]])
    return cut


class DatasetEncoder:
    """Maps validated examples onto padded, masked numeric batches."""

    def __init__(self, task: str, vocab: Optional[Vocab],
                 bio_labels: Optional[list[str]],
                 relations: Optional[list[str]], max_len: int,
                 text_mode: str = "embed"):
        self.task = task
        self.vocab = vocab
        self.bio_labels = bio_labels
        self.bio_index = ({lab: i for i, lab in enumerate(bio_labels)}
                          if bio_labels else None)
        self.relations = relations
        self.rel_index = ({r: i for i, r in enumerate(relations)}
                          if relations else None)
        self.max_len = max_len
        self.text_mode = text_mode

    def encode_batch(self, examples: Sequence[Example]) -> Batch:
        kept = [t for t in (_truncate(ex, self.max_len) for ex in examples)
                if t is not None]
        if not kept:
            return []
        t_pad = max(len(ex.tokens) for ex in kept)
        m_pad = max(ex.image.shape[0] for ex in kept)
        out: Batch = []
        for ex in kept:
            n = len(ex.tokens)
            rows = t_pad + 2
            text_mask = np.zeros((rows, 1))
            text_mask[:n + 2] = 1.0
            token_ids = text_feats = None
            if self.text_mode == "features":
                if ex.text_feats is None:
                    raise DataError(f"{ex.id}: text_mode=features but the "
                                    "manifest line has no text_ref")
                text_feats = np.zeros((rows, ex.text_feats.shape[1]))
                text_feats[:n + 2] = ex.text_feats
            else:
                token_ids = self.vocab.encode(ex.tokens, pad_to=t_pad)
            label_ids = None
            if self.task == "mner":
                # CLS, SEP and padding all carry "O"
                o_id = self.bio_index["O"]
                label_ids = np.asarray(
                    [o_id] + [self._bio_id(lab, ex) for lab in ex.bio_labels]
                    + [o_id] * (rows - n - 1), dtype=np.intp)
            relation_id = None
            if self.task == "mre":
                relation_id = self._rel_id(ex)
            image = np.zeros((m_pad, ex.image.shape[1]))
            image[:ex.image.shape[0]] = ex.image
            image_mask = np.zeros((m_pad, 1))
            image_mask[:ex.image.shape[0]] = 1.0
            out.append(EncodedExample(
                example=ex, n_tokens=n, token_ids=token_ids,
                text_feats=text_feats, text_mask=text_mask,
                label_ids=label_ids, relation_id=relation_id,
                image=image, image_mask=image_mask))
        return out

    def _bio_id(self, lab: str, ex: Example) -> int:
        if lab not in self.bio_index:
            raise DataError(f"{ex.id}: label {lab!r} unknown to this model")
        return self.bio_index[lab]

    def _rel_id(self, ex: Example) -> int:
        if ex.relation not in self.rel_index:
            raise DataError(f"{ex.id}: relation {ex.relation!r} unknown to this model")
        return self.rel_index[ex.relation]


def make_batches(examples: Sequence[Example], batch_size: int, seed,
                 encoder: DatasetEncoder, shuffle: bool = True) -> Iterator[Batch]:
    """Deterministic batches; order depends only on the seed."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    for lo in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[lo:lo + batch_size]]
        batch = encoder.encode_batch(chunk)
        if batch:
            yield batch
