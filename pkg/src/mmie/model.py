"""The composed model: feature ingestion, variational encoding of both
modalities, cross-modal fusion, and the task head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import EncodedExample, Vocab, project_images
from .decoders import (CrfParams, RelationHead, crf_nll, entity_pool,
                       relation_nll, relation_probs, viterbi_decode)
from .errors import ConfigError, DataError
from .layers import (AttentionBlock, FusionOutput, GaussianHead,
                     GaussianLatent, fuse, variational_encode)
from .regularizers import Discriminator


@dataclass
class ExampleOutput:
    lat_text: GaussianLatent
    lat_image: GaussianLatent
    fusion: FusionOutput
    task_nll: Tensor
    x_text: Tensor   # modality features entering the variational stage
    x_image: Tensor
    true_len: int


class Model:
    """All learnable state plus the per-example forward pass."""

    def __init__(self, cfg: TrainConfig, vocab: Optional[Vocab],
                 bio_labels: Optional[list[str]],
                 relations: Optional[list[str]]):
        self.cfg = cfg
        self.vocab = vocab
        self.bio_labels = bio_labels
        self.relations = relations
        self.dtype = np.float64 if cfg.precision == "float64" else np.float32
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d

        self.embed = None
        self.w_text = None
        if cfg.text_mode == "embed":
            if vocab is None:
                raise ConfigError("embedding mode needs a vocabulary")
            self.embed = ad.param(
                (rng.standard_normal((len(vocab), cfg.d_text)) * 0.5)
                .astype(self.dtype), "embed.table")
        if cfg.d_text != d:
            self.w_text = ad.param(
                (rng.standard_normal((cfg.d_text, d)) / np.sqrt(cfg.d_text))
                .astype(self.dtype), "proj.text")
        self.w_img = ad.param(
            (rng.standard_normal((cfg.d_img_raw, d)) / np.sqrt(cfg.d_img_raw))
            .astype(self.dtype), "proj.img")

        self.text_head = GaussianHead(d, cfg.h, rng, "enc.text",
                                      depth=cfg.depth, dtype=self.dtype)
        self.image_head = GaussianHead(d, cfg.h, rng, "enc.img",
                                       depth=cfg.depth, dtype=self.dtype)
        self.img_to_text = [AttentionBlock(d, cfg.h, rng, f"fuse.i2t{i}",
                                           dtype=self.dtype)
                            for i in range(cfg.depth)]
        self.text_to_img = [AttentionBlock(d, cfg.h, rng, f"fuse.t2i{i}",
                                           dtype=self.dtype)
                            for i in range(cfg.depth)]
        self.disc = Discriminator(d, rng, dtype=self.dtype)

        self.crf = None
        self.rel = None
        if cfg.task == "mner":
            if not bio_labels or "O" not in bio_labels:
                raise ConfigError("sequence labeling needs a BIO label set "
                                  "containing 'O'")
            self.crf = CrfParams(d, len(bio_labels), rng, dtype=self.dtype)
        else:
            if not relations:
                raise ConfigError("relation task needs a relation label set")
            self.rel = RelationHead(d, len(relations), rng, dtype=self.dtype)

        self._params = {}
        for t in self._iter_params():
            if t.name in self._params:
                raise ConfigError(f"duplicate parameter name {t.name}")
            self._params[t.name] = t

    def _iter_params(self):
        if self.embed is not None:
            yield self.embed
        if self.w_text is not None:
            yield self.w_text
        yield self.w_img
        yield from self.text_head.parameters()
        yield from self.image_head.parameters()
        for blk in self.img_to_text + self.text_to_img:
            yield from blk.parameters()
        yield from self.disc.parameters()
        if self.crf is not None:
            yield from self.crf.parameters()
        if self.rel is not None:
            yield from self.rel.parameters()

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    # ------------------------------------------------------------------
    # forward

    def text_features(self, enc: EncodedExample) -> Tensor:
        if enc.text_feats is not None:
            x = ad.constant(enc.text_feats.astype(self.dtype))
        else:
            if self.embed is None:
                raise DataError(
                    f"{enc.example.id}: no text features and no embedding table")
            x = ad.gather_rows(self.embed, enc.token_ids)
        if x.shape[1] != self.cfg.d_text:
            raise DataError(
                f"{enc.example.id}: text features are {x.shape[1]} wide, "
                f"config says {self.cfg.d_text}")
        if self.w_text is not None:
            x = ad.matmul(x, self.w_text)
        return x

    def encode_example(self, enc: EncodedExample,
                       eps_text: Optional[np.ndarray] = None,
                       eps_image: Optional[np.ndarray] = None):
        """Shared trunk: features, variational latents, fusion."""
        x_t = self.text_features(enc)
        x_v = project_images(ad.constant(enc.image.astype(self.dtype)),
                             self.w_img)
        lat_t = variational_encode(x_t, self.text_head, eps_text, enc.text_mask)
        lat_v = variational_encode(x_v, self.image_head, eps_image,
                                   enc.image_mask)
        fusion = fuse(lat_v, lat_t, self.img_to_text, self.text_to_img)
        return x_t, x_v, lat_t, lat_v, fusion

    def forward_example(self, enc: EncodedExample,
                        eps_text: Optional[np.ndarray] = None,
                        eps_image: Optional[np.ndarray] = None) -> ExampleOutput:
        """Full pass for one example; eps None means deterministic (z = mean)."""
        x_t, x_v, lat_t, lat_v, fusion = self.encode_example(enc, eps_text,
                                                             eps_image)
        reps = ad.slice_block(fusion.text_reps, 0, enc.true_len, 0, self.cfg.d)
        if self.cfg.task == "mner":
            gold = [int(v) for v in enc.label_ids[:enc.true_len]]
            nll = crf_nll(reps, gold, self.crf)
        else:
            use_max = self.cfg.entity_pool == "max"
            e1 = entity_pool(reps, enc.example.head_span, use_max=use_max)
            e2 = entity_pool(reps, enc.example.tail_span, use_max=use_max)
            nll = relation_nll(e1, e2, self.rel, enc.relation_id,
                               negative_term=self.cfg.mre_negative_reconstruction)
        return ExampleOutput(lat_text=lat_t, lat_image=lat_v, fusion=fusion,
                             task_nll=nll, x_text=x_t, x_image=x_v,
                             true_len=enc.true_len)

    # ------------------------------------------------------------------
    # prediction (eval mode: z is the mean unless eval_sampling=sample)

    def _eval_eps(self, enc: EncodedExample, rng):
        if self.cfg.eval_sampling != "sample":
            return None, None
        if rng is None:
            rng = np.random.default_rng(self.cfg.seed)
        return (rng.standard_normal((enc.text_mask.shape[0], self.cfg.d)),
                rng.standard_normal((enc.image_mask.shape[0], self.cfg.d)))

    def predict_example(self, enc: EncodedExample, rng=None,
                        with_reps: bool = False):
        """Decoded BIO labels (mner) or relation string (mre)."""
        eps_t, eps_v = self._eval_eps(enc, rng)
        x_t, x_v, lat_t, lat_v, fusion = self.encode_example(enc, eps_t, eps_v)
        reps = ad.slice_block(fusion.text_reps, 0, enc.true_len, 0, self.cfg.d)
        if self.cfg.task == "mner":
            ids = viterbi_decode(reps, self.crf)
            pred = [self.bio_labels[i] for i in ids[1:-1]]
        else:
            use_max = self.cfg.entity_pool == "max"
            e1 = entity_pool(reps, enc.example.head_span, use_max=use_max)
            e2 = entity_pool(reps, enc.example.tail_span, use_max=use_max)
            probs = relation_probs(e1, e2, self.rel).values[0]
            pred = self.relations[int(probs.argmax())]
        if with_reps:
            return pred, (x_t, x_v, lat_t, lat_v)
        return pred
