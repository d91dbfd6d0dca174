"""Independent oracles: Monte-Carlo KL and brute-force CRF computations.

These never touch the autodiff graph or the shipped algorithms; they
recompute expected values from first principles.
"""

import itertools
import math

import numpy as np


def monte_carlo_kl(mu, sigma, n_samples, rng):
    """Sample estimate of E_q[ln q - ln p] with q = N(mu, sigma^2), p = N(0, 1)."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    total = 0.0
    done = 0
    while done < n_samples:
        m = min(200_000, n_samples - done)
        eps = rng.standard_normal((m, mu.size))
        z = mu + sigma * eps
        log_q = -0.5 * eps ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)
        log_p = -0.5 * z ** 2 - 0.5 * math.log(2 * math.pi)
        total += float((log_q - log_p).sum())
        done += m
    return total / n_samples


def chain_score(emissions, trans, start, stop, labels):
    """Direct summation of one label sequence's unnormalized score."""
    score = start[labels[0]] + emissions[0][labels[0]]
    for i in range(1, len(labels)):
        score += trans[labels[i - 1]][labels[i]] + emissions[i][labels[i]]
    return score + stop[labels[-1]]

def enumerate_scores(emissions, trans, start, stop):
    """Scores of every label sequence, in lexicographic label order."""
    t, n_labels = np.asarray(emissions).shape
    seqs = list(itertools.product(range(n_labels), repeat=t))
    return seqs, [chain_score(emissions, trans, start, stop, s) for s in seqs]


def brute_log_partition(emissions, trans, start, stop):
    _, scores = enumerate_scores(emissions, trans, start, stop)
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


def brute_argmax(emissions, trans, start, stop):
    """Highest-scoring sequence under the engine's tie-break.

    Per-step smallest-index backpointers resolve ties to the maximizing
    sequence whose reversed label tuple is lexicographically smallest.
    """
    seqs, scores = enumerate_scores(emissions, trans, start, stop)
    best = max(scores)
    candidates = [seqs[i] for i in range(len(seqs)) if scores[i] == best]
    chosen = min(candidates, key=lambda s: tuple(reversed(s)))
    return list(chosen), best
