"""Bottleneck and alignment regularizers.

kl_to_std_normal is the closed-form KL divergence from a diagonal Gaussian
to the standard normal prior, summed over unmasked positions and dimensions:

    sum_i sum_k 0.5 * (mu_ik^2 + sigma_ik^2 - 1 - ln sigma_ik^2)

alignment_loss is a binary cross-entropy over a discriminator that scores
pooled text/image latents: paired inputs are positives, all in-batch
cross pairings are negatives.
"""

from __future__ import annotations

import logging
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .layers import GaussianLatent, _xavier

log = logging.getLogger(__name__)


def masked_mean_rows(x: Tensor, mask) -> Tensor:
    """Mean over unmasked rows as a (1, d) tensor."""
    flat = np.asarray(mask, dtype=x.values.dtype).ravel()
    if flat.shape[0] != x.shape[0]:
        raise ShapeError(f"mask covers {flat.shape[0]} rows, tensor has {x.shape[0]}")
    count = flat.sum()
    if count == 0:
        raise ShapeError("masked mean over zero unmasked rows")
    weights = ad.constant((flat / count)[None, :].astype(x.values.dtype))
    return ad.matmul(weights, x)


def kl_to_std_normal(lat: GaussianLatent) -> Tensor:
    """Closed-form KL to the standard normal, masked positions excluded."""
    if np.any(lat.sigma.values <= 0.0):
        raise ValueError("kl_to_std_normal: sigma must be strictly positive")
    mu2 = lat.mu * lat.mu
    sig2 = ad.exp(lat.log_var)
    elem = (mu2 + sig2 - lat.log_var - 1.0) * 0.5
    per_pos = ad.matmul(elem, ad.constant(
        np.ones((elem.shape[1], 1), dtype=elem.values.dtype)))
    mask = ad.constant(np.asarray(lat.mask, dtype=elem.values.dtype)
                       .reshape(-1, 1))
    return ad.sum_all(per_pos * mask)


def refinement_loss(lat_text: GaussianLatent, lat_img: GaussianLatent,
                    task_nll: Tensor, beta1: float, beta2: float) -> Tensor:
    """Compression terms on both modalities plus the task term.

    The task negative log-likelihood doubles as the (negated) reconstruction
    bound, so it enters exactly once here.
    """
    total = task_nll
    if beta1 != 0.0:
        total = total + kl_to_std_normal(lat_text) * beta1
    if beta2 != 0.0:
        total = total + kl_to_std_normal(lat_img) * beta2
    return total


class Discriminator:
    """Two affine layers (2d -> d -> 1) with ReLU, then a sigmoid score."""

    def __init__(self, d: int, rng, dtype=np.float64, name: str = "disc"):
        self.d = d
        self.w1 = ad.param(_xavier(rng, 2 * d, d, dtype), f"{name}.w1")
        self.b1 = ad.param(np.zeros((1, d), dtype=dtype), f"{name}.b1")
        self.w2 = ad.param(_xavier(rng, d, 1, dtype), f"{name}.w2")
        self.b2 = ad.param(np.zeros((1, 1), dtype=dtype), f"{name}.b2")

    def parameters(self) -> Iterator[Tensor]:
        yield from (self.w1, self.b1, self.w2, self.b2)

    def score(self, z_text: Tensor, z_img: Tensor, text_mask, img_mask) -> Tensor:
        """Probability in (0, 1) that the two latents belong together."""
        pooled = ad.concat_cols([masked_mean_rows(z_text, text_mask),
                                 masked_mean_rows(z_img, img_mask)])
        h = ad.relu(ad.matmul(pooled, self.w1) + self.b1)
        return ad.sigmoid(ad.matmul(h, self.w2) + self.b2)


def alignment_loss(pairs: Sequence[tuple[GaussianLatent, GaussianLatent]],
                   disc) -> Tensor:
    """Contrastive BCE pushing paired latents together, unpaired apart.

    loss = -(1/B) sum_b ln D(T_b, V_b)
           -(1/(B(B-1))) sum_{b != b'} ln(1 - D(T_b, V_b'))
    """
    n = len(pairs)
    if n == 0:
        raise ShapeError("alignment_loss: empty batch")
    if n < 2:
        log.warning("alignment_loss: batch of 1 has no in-batch negatives; "
                    "using the positive term only")
    pos_terms = []
    for lt, lv in pairs:
        pos_terms.append(ad.log(disc.score(lt.z, lv.z, lt.mask, lv.mask)))
    pos = pos_terms[0]
    for t in pos_terms[1:]:
        pos = pos + t
    loss = pos * (-1.0 / n)
    if n >= 2:
        neg_terms = []
        for i, (lt, _) in enumerate(pairs):
            for j, (_, lv) in enumerate(pairs):
                if i == j:
                    continue
                p = disc.score(lt.z, lv.z, lt.mask, lv.mask)
                neg_terms.append(ad.log(1.0 - p))
        neg = neg_terms[0]
        for t in neg_terms[1:]:
            neg = neg + t
        loss = loss + neg * (-1.0 / (n * (n - 1)))
    return loss
