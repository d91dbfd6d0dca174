"""Attention encoder blocks, variational Gaussian heads, cross-modal fusion.

One block = multi-head scaled dot-product attention over (query, key/value)
inputs followed by a position-wise feed-forward network, each wrapped in a
residual + layer-norm. Heads are kept as explicit per-head projection
matrices; masked key positions receive a -1e30 logit bias, which underflows
to an exact zero attention weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

MASK_BIAS = -1e30


def _xavier(rng, rows, cols, dtype):
    return (rng.standard_normal((rows, cols)) / math.sqrt(rows)).astype(dtype)


class AttentionBlock:
    """Single transformer-style layer: attention, then feed-forward."""

    def __init__(self, d: int, heads: int, rng, name: str,
                 d_ff: int | None = None, dtype=np.float64):
        if d % heads != 0:
            raise ConfigError(f"{name}: width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.d_head = d // heads
        self.d_ff = d_ff or 2 * d
        self.name = name
        p = ad.param
        self.wq = [p(_xavier(rng, d, self.d_head, dtype), f"{name}.h{j}.wq")
                   for j in range(heads)]
        self.wk = [p(_xavier(rng, d, self.d_head, dtype), f"{name}.h{j}.wk")
                   for j in range(heads)]
        self.wv = [p(_xavier(rng, d, self.d_head, dtype), f"{name}.h{j}.wv")
                   for j in range(heads)]
        self.wo = p(_xavier(rng, d, d, dtype), f"{name}.wo")
        self.w1 = p(_xavier(rng, d, self.d_ff, dtype), f"{name}.ffn.w1")
        self.b1 = p(np.zeros((1, self.d_ff), dtype=dtype), f"{name}.ffn.b1")
        self.w2 = p(_xavier(rng, self.d_ff, d, dtype), f"{name}.ffn.w2")
        self.b2 = p(np.zeros((1, d), dtype=dtype), f"{name}.ffn.b2")
        self.ln1_g = p(np.ones((1, d), dtype=dtype), f"{name}.ln1.gain")
        self.ln1_b = p(np.zeros((1, d), dtype=dtype), f"{name}.ln1.bias")
        self.ln2_g = p(np.ones((1, d), dtype=dtype), f"{name}.ln2.gain")
        self.ln2_b = p(np.zeros((1, d), dtype=dtype), f"{name}.ln2.bias")

    def parameters(self) -> Iterator[Tensor]:
        yield from self.wq
        yield from self.wk
        yield from self.wv
        yield self.wo
        yield from (self.w1, self.b1, self.w2, self.b2,
                    self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b)

    def __call__(self, q: Tensor, k: Tensor,
                 key_mask: Optional[np.ndarray] = None) -> Tensor:
        if q.shape[1] != self.d or k.shape[1] != self.d:
            raise ShapeError(
                f"{self.name}: inputs must be {self.d} wide, got "
                f"{q.shape} and {k.shape}")
        bias = None
        if key_mask is not None:
            flat = np.asarray(key_mask).ravel()
            if flat.shape[0] != k.shape[0]:
                raise ShapeError(
                    f"{self.name}: mask covers {flat.shape[0]} keys, "
                    f"expected {k.shape[0]}")
            if np.any(flat == 0.0):
                row = np.where(flat > 0.0, 0.0, MASK_BIAS)[None, :]
                bias = ad.constant(
                    np.repeat(row, q.shape[0], axis=0).astype(q.values.dtype))
        scale = 1.0 / math.sqrt(self.d_head)
        outs = []
        for j in range(self.heads):
            qh = ad.matmul(q, self.wq[j])
            kh = ad.matmul(k, self.wk[j])
            vh = ad.matmul(k, self.wv[j])
            logits = ad.matmul(qh, ad.transpose(kh)) * scale
            if bias is not None:
                logits = logits + bias
            outs.append(ad.matmul(ad.row_softmax(logits), vh))
        mha = ad.matmul(ad.concat_cols(outs), self.wo)
        h = ad.layer_norm(q + mha, self.ln1_g, self.ln1_b)
        rows = h.shape[0]
        ff = ad.relu(ad.matmul(h, self.w1) + ad.broadcast_rows(self.b1, rows))
        ff = ad.matmul(ff, self.w2) + ad.broadcast_rows(self.b2, rows)
        return ad.layer_norm(h + ff, self.ln2_g, self.ln2_b)


def _stack(blocks: Sequence[AttentionBlock], q: Tensor, k: Tensor,
           key_mask) -> Tensor:
    h = q
    for blk in blocks:
        h = blk(h, k, key_mask)
    return h


def self_encode(blocks: Sequence[AttentionBlock], x: Tensor, mask) -> Tensor:
    """Each position attends to every unmasked position of the same input."""
    h = x
    for blk in blocks:
        h = blk(h, h, mask)
    return h


class GaussianHead:
    """Two disjoint attention stacks producing mean and log-variance."""

    def __init__(self, d: int, heads: int, rng, name: str, depth: int = 1,
                 dtype=np.float64):
        self.mu_blocks = [AttentionBlock(d, heads, rng, f"{name}.mu{i}", dtype=dtype)
                          for i in range(depth)]
        self.sigma_blocks = [AttentionBlock(d, heads, rng, f"{name}.sigma{i}",
                                            dtype=dtype)
                             for i in range(depth)]

    def parameters(self) -> Iterator[Tensor]:
        for blk in self.mu_blocks + self.sigma_blocks:
            yield from blk.parameters()


@dataclass
class GaussianLatent:
    """Per-position diagonal Gaussian (mu, sigma) and its sample z."""
    mu: Tensor
    sigma: Tensor
    z: Tensor
    mask: np.ndarray
    log_var: Tensor


def variational_encode(x: Tensor, head: GaussianHead,
                       eps: Optional[np.ndarray], mask) -> GaussianLatent:
    """Encode x into a per-position Gaussian and draw one sample.

    sigma^2 = exp(log-variance path), so sigma = exp(0.5 * s) is strictly
    positive. With eps None (eval) the sample is exactly the mean; gradient
    flows through mu and sigma but never through eps.
    """
    mu = self_encode(head.mu_blocks, x, mask)
    log_var = self_encode(head.sigma_blocks, x, mask)
    sigma = ad.exp(log_var * 0.5)
    if eps is None:
        z = mu
    else:
        if eps.shape != mu.shape:
            raise ShapeError(f"eps shape {eps.shape} != latent shape {mu.shape}")
        z = mu + sigma * ad.constant(np.asarray(eps, dtype=mu.values.dtype))
    return GaussianLatent(mu=mu, sigma=sigma, z=z, mask=np.asarray(mask),
                          log_var=log_var)


@dataclass
class FusionOutput:
    image_reps: Tensor  # (m+1, d): text-attended image rows
    text_reps: Tensor   # (n+2, d): image-aware text rows


def fuse(lat_img: GaussianLatent, lat_text: GaussianLatent,
         img_to_text: Sequence[AttentionBlock],
         text_to_img: Sequence[AttentionBlock]) -> FusionOutput:
    """Couple the modalities: image rows query text, then text queries them."""
    if lat_img.z.shape[1] != lat_text.z.shape[1]:
        raise ShapeError(
            f"fusion: widths differ, {lat_img.z.shape} vs {lat_text.z.shape}")
    b = _stack(img_to_text, lat_img.z, lat_text.z, lat_text.mask)
    c = _stack(text_to_img, lat_text.z, b, lat_img.mask)
    return FusionOutput(image_reps=b, text_reps=c)
