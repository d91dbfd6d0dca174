"""Span-level and relation-level scoring, plus representation diagnostics."""

from __future__ import annotations

import csv
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError

Span = tuple[int, int, str]


def decode_bio(labels: Sequence[str]) -> set[Span]:
    """Maximal typed spans from a BIO sequence.

    Total on arbitrary model output: an orphan I-X (no live span of type X)
    is repaired to B-X. Gold data should be validated strictly upstream.
    """
    spans: set[Span] = set()
    start, kind = None, None
    for i, lab in enumerate(labels):
        if lab.startswith("B-") or (lab.startswith("I-")
                                    and (kind is None or lab[2:] != kind)):
            if start is not None:
                spans.add((start, i - 1, kind))
            start, kind = i, lab[2:]
        elif lab.startswith("I-"):
            continue
        else:  # "O" or anything unrecognized closes the span
            if start is not None:
                spans.add((start, i - 1, kind))
            start, kind = None, None
    if start is not None:
        spans.add((start, len(labels) - 1, kind))
    return spans


def bio_from_spans(spans: Iterable[Span], length: int) -> list[str]:
    """Inverse of decode_bio for non-overlapping span sets."""
    labels = ["O"] * length
    for s, e, kind in spans:
        if not (0 <= s <= e < length):
            raise DataError(f"span ({s}, {e}, {kind}) out of range for {length}")
        if any(labels[i] != "O" for i in range(s, e + 1)):
            raise DataError(f"span ({s}, {e}, {kind}) overlaps another span")
        labels[s] = f"B-{kind}"
        for i in range(s + 1, e + 1):
            labels[i] = f"I-{kind}"
    return labels


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f1


def span_prf(pred: Iterable[Span], gold: Iterable[Span]) -> tuple[float, float, float]:
    """Exact-match precision/recall/F1 over (start, end, type) triples."""
    pred, gold = set(pred), set(gold)
    return _prf(len(pred & gold), len(pred), len(gold))


def relation_prf(preds: Sequence[str], golds: Sequence[str],
                 negative_label: str = "None") -> tuple[float, float, float]:
    """Micro P/R/F1 with the designated no-relation label excluded from positives."""
    if len(preds) != len(golds):
        raise DataError(f"got {len(preds)} predictions for {len(golds)} golds")
    tp = sum(1 for p, g in zip(preds, golds) if p == g and p != negative_label)
    n_pred = sum(1 for p in preds if p != negative_label)
    n_gold = sum(1 for g in golds if g != negative_label)
    return _prf(tp, n_pred, n_gold)


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise DataError(f"got {len(preds)} predictions for {len(golds)} golds")
    if not golds:
        return 0.0
    return sum(1 for p, g in zip(preds, golds) if p == g) / len(golds)


def per_type_span_prf(pred: Iterable[Span], gold: Iterable[Span]) -> dict:
    """Breakdown of span_prf restricted to each entity type present."""
    pred, gold = set(pred), set(gold)
    types = sorted({t for *_, t in pred} | {t for *_, t in gold})
    return {t: span_prf({s for s in pred if s[2] == t},
                        {s for s in gold if s[2] == t}) for t in types}


def contribution_scores(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-position influence of input rows on the learned representation.

    Row sums of the pairwise dot-product matrix between the original
    feature rows and the latent rows; one scalar per position.
    """
    x, z = np.asarray(x), np.asarray(z)
    if x.shape != z.shape:
        raise ShapeError(f"contribution: shapes {x.shape} vs {z.shape} differ")
    return (x @ z.T).sum(axis=1)


def write_contribution_csv(scores: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "score"])
        for i, s in enumerate(np.asarray(scores).ravel()):
            writer.writerow([i, repr(float(s))])
