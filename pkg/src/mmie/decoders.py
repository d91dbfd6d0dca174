"""Task heads: linear-chain CRF for sequence labeling, classifier for relations.

CRF scores a label sequence y over representation rows c_i as

    sum_i emission(c_i, y_i) + Trans(y_{i-1}, y_i)

with virtual START/STOP states supplying the boundary transitions
(START -> y_0 and y_last -> STOP). The partition function is the forward
algorithm in log space; decoding is Viterbi with smallest-label-index
tie-breaks at every backpointer.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError
from .layers import _xavier


class CrfParams:
    """Emission weights (d x L) and transitions over L labels + START/STOP."""

    def __init__(self, d: int, n_labels: int, rng, dtype=np.float64,
                 name: str = "crf"):
        self.n_labels = n_labels
        self.start = n_labels        # virtual state indices
        self.stop = n_labels + 1
        self.w_emit = ad.param(_xavier(rng, d, n_labels, dtype), f"{name}.w_emit")
        self.trans = ad.param(np.zeros((n_labels + 2, n_labels + 2), dtype=dtype),
                              f"{name}.trans")

    def parameters(self) -> Iterator[Tensor]:
        yield self.w_emit
        yield self.trans


def _check_labels(labels: Sequence[int], n_labels: int) -> None:
    for y in labels:
        if not 0 <= y < n_labels:
            raise DataError(f"label id {y} out of range [0, {n_labels})")


def crf_score(reps: Tensor, labels: Sequence[int], crf: CrfParams) -> Tensor:
    """Unnormalized score of one label sequence (START/STOP included)."""
    t = reps.shape[0]
    if len(labels) != t:
        raise ShapeError(f"{len(labels)} labels for {t} positions")
    _check_labels(labels, crf.n_labels)
    emissions = ad.matmul(reps, crf.w_emit)
    pick = np.zeros((t, crf.n_labels), dtype=reps.values.dtype)
    pick[np.arange(t), list(labels)] = 1.0
    emit_score = ad.sum_all(emissions * ad.constant(pick))
    moves = np.zeros((crf.n_labels + 2, crf.n_labels + 2),
                     dtype=reps.values.dtype)
    moves[crf.start, labels[0]] += 1.0
    for a, b in zip(labels, labels[1:]):
        moves[a, b] += 1.0
    moves[labels[-1], crf.stop] += 1.0
    return emit_score + ad.sum_all(crf.trans * ad.constant(moves))


def crf_log_partition(reps: Tensor, crf: CrfParams) -> Tensor:
    """log sum over all label sequences of exp(crf_score), forward algorithm."""
    t = reps.shape[0]
    n = crf.n_labels
    emissions = ad.matmul(reps, crf.w_emit)
    trans_core = ad.slice_block(crf.trans, 0, n, 0, n)
    start_row = ad.slice_block(crf.trans, crf.start, crf.start + 1, 0, n)
    stop_col = ad.transpose(ad.slice_block(crf.trans, 0, n, crf.stop, crf.stop + 1))
    alpha = ad.slice_block(emissions, 0, 1, 0, n) + start_row
    for i in range(1, t):
        grid = ad.broadcast_cols(ad.transpose(alpha), n) + trans_core
        alpha = ad.log_sum_exp(grid, axis=0) + ad.slice_block(emissions, i, i + 1, 0, n)
    return ad.log_sum_exp(alpha + stop_col, axis=None)


def crf_nll(reps: Tensor, labels: Sequence[int], crf: CrfParams) -> Tensor:
    """Negative log-probability of the gold sequence."""
    return crf_log_partition(reps, crf) - crf_score(reps, labels, crf)


def viterbi_decode(reps: Tensor, crf: CrfParams) -> list[int]:
    """Highest-scoring label sequence; ties take the lowest label index."""
    n = crf.n_labels
    emissions = (reps.values @ crf.w_emit.values)
    trans = crf.trans.values
    t = emissions.shape[0]
    alpha = trans[crf.start, :n] + emissions[0]
    backptr = np.zeros((t, n), dtype=np.intp)
    for i in range(1, t):
        cand = alpha[:, None] + trans[:n, :n]          # cand[y', y]
        backptr[i] = cand.argmax(axis=0)               # first max = lowest index
        alpha = cand.max(axis=0) + emissions[i]
    final = alpha + trans[:n, crf.stop]
    best = int(final.argmax())
    path = [best]
    for i in range(t - 1, 0, -1):
        path.append(int(backptr[i][path[-1]]))
    path.reverse()
    return path


# ---------------------------------------------------------------------------
# relation head

class RelationHead:
    """Linear classifier over the concatenated entity pair representation."""

    def __init__(self, d: int, n_relations: int, rng, dtype=np.float64,
                 name: str = "rel"):
        if n_relations < 2:
            raise DataError(f"need at least 2 relation types, got {n_relations}")
        self.n_relations = n_relations
        self.w = ad.param(_xavier(rng, 2 * d, n_relations, dtype), f"{name}.w")
        self.b = ad.param(np.zeros((1, n_relations), dtype=dtype), f"{name}.b")

    def parameters(self) -> Iterator[Tensor]:
        yield self.w
        yield self.b


def entity_pool(reps: Tensor, span: tuple[int, int], use_max: bool = False) -> Tensor:
    """Pool the token rows of one entity span (indices offset past the
    leading marker row)."""
    s, e = span
    n_tokens = reps.shape[0] - 2
    if not (0 <= s <= e < n_tokens):
        raise DataError(f"span ({s}, {e}) out of range for {n_tokens} tokens")
    rows = ad.gather_rows(reps, list(range(s + 1, e + 2)))
    return ad.max_pool_rows(rows) if use_max else ad.mean_pool_rows(rows)


def relation_logits(e1: Tensor, e2: Tensor, head: RelationHead) -> Tensor:
    return ad.matmul(ad.concat_cols([e1, e2]), head.w) + head.b


def relation_probs(e1: Tensor, e2: Tensor, head: RelationHead) -> Tensor:
    """Distribution over relation types for an entity pair."""
    return ad.row_softmax(relation_logits(e1, e2, head))


def relation_nll(e1: Tensor, e2: Tensor, head: RelationHead, gold: int,
                 negative_term: bool = False) -> Tensor:
    """-ln p(gold); optionally adds -sum_{k != gold} ln(1 - p_k).

    The optional term floors 1 - p_k at 1e-12 inside the log so saturated
    probabilities cannot leave the log's domain; the bias is negligible
    against the desk-scale tolerances and the flag defaults off.
    """
    logits = relation_logits(e1, e2, head)
    if not 0 <= gold < head.n_relations:
        raise DataError(f"relation id {gold} out of range")
    pick = np.zeros((1, head.n_relations), dtype=logits.values.dtype)
    pick[0, gold] = 1.0
    gold_logit = ad.sum_all(logits * ad.constant(pick))
    nll = ad.log_sum_exp(logits, axis=None) - gold_logit
    if negative_term:
        probs = ad.row_softmax(logits)
        others = np.ones((1, head.n_relations), dtype=logits.values.dtype)
        others[0, gold] = 0.0
        complement = (1.0 - probs) + 1e-12
        penalties = ad.log(complement) * ad.constant(others)
        nll = nll - ad.sum_all(penalties)
    return nll
