"""Contextual text features: one MMTF file of shape (n+2) x hidden per
sentence, rows aligned to the original tokens with CLS/SEP at the ends."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch

from . import ExporterError
from . import mmtf

HIDDEN = 768

PRETRAINED_HELP = (
    "could not load the pretrained text encoder {name!r}: {err}. "
    "Download it on a machine with network access, e.g.\n"
    "  python -c \"from transformers import AutoModel, AutoTokenizer; "
    "AutoModel.from_pretrained('{name}').save_pretrained('DIR'); "
    "AutoTokenizer.from_pretrained('{name}').save_pretrained('DIR')\"\n"
    "then pass --model DIR."
)


class PretrainedTextEncoder:
    """Wraps a transformer checkpoint; pools wordpieces back to one row per
    original token (mean or first piece)."""

    def __init__(self, name_or_path: str = "bert-base-uncased",
                 pool: str = "mean"):
        if pool not in ("mean", "first"):
            raise ExporterError(f"pool must be mean|first, got {pool!r}")
        self.pool = pool
        try:
            from transformers import AutoModel, AutoTokenizer
            self.tokenizer = AutoTokenizer.from_pretrained(name_or_path)
            self.model = AutoModel.from_pretrained(name_or_path)
        except Exception as e:
            raise ExporterError(
                PRETRAINED_HELP.format(name=name_or_path, err=e)) from e
        self.model.eval()
        self.hidden = int(self.model.config.hidden_size)

    def encode(self, tokens: list[str]) -> np.ndarray:
        tok = self.tokenizer
        piece_ids, word_slices = [], []
        for word in tokens:
            pieces = tok.tokenize(word) or [tok.unk_token]
            ids = tok.convert_tokens_to_ids(pieces)
            word_slices.append((len(piece_ids), len(piece_ids) + len(ids)))
            piece_ids.extend(ids)
        input_ids = [tok.cls_token_id] + piece_ids + [tok.sep_token_id]
        with torch.no_grad():
            out = self.model(input_ids=torch.tensor([input_ids]))
        hidden = out.last_hidden_state[0].numpy()  # (pieces+2, hidden)
        rows = np.empty((len(tokens) + 2, self.hidden), dtype=np.float32)
        rows[0] = hidden[0]
        for i, (lo, hi) in enumerate(word_slices):
            block = hidden[1 + lo:1 + hi]
            rows[i + 1] = block[0] if self.pool == "first" else block.mean(axis=0)
        rows[-1] = hidden[-1]
        return rows


class UntrainedTextEncoder:
    """Randomly initialized (seeded) transformer for offline development and
    conformance testing: same shapes and determinism, no pretrained weights.

    Tokens map to ids by a stable hash, so identical inputs always produce
    identical bytes for a given seed."""

    VOCAB = 2048
    SPECIALS = 4  # pad/unk reserved below cls/sep

    def __init__(self, seed: int = 0, layers: int = 2):
        from transformers import BertConfig, BertModel
        torch.manual_seed(seed)
        self.model = BertModel(BertConfig(
            vocab_size=self.VOCAB, hidden_size=HIDDEN,
            num_hidden_layers=layers, num_attention_heads=12,
            intermediate_size=1024))
        self.model.eval()
        self.hidden = HIDDEN

    @classmethod
    def _token_id(cls, word: str) -> int:
        digest = hashlib.md5(word.encode("utf-8")).digest()
        span = cls.VOCAB - cls.SPECIALS
        return cls.SPECIALS + int.from_bytes(digest[:4], "little") % span

    def encode(self, tokens: list[str]) -> np.ndarray:
        ids = [2] + [self._token_id(t) for t in tokens] + [3]
        with torch.no_grad():
            out = self.model(input_ids=torch.tensor([ids]))
        return out.last_hidden_state[0].numpy().astype(np.float32)


def export_text_features(sentences, out_dir, encoder) -> list[dict]:
    """Write one feature file per sentence; return manifest fragments.

    `sentences` is an iterable of (id, tokens) pairs. Fragments carry
    {"id", "text_ref"} with paths relative to out_dir.
    """
    out_dir = Path(out_dir)
    (out_dir / "text").mkdir(parents=True, exist_ok=True)
    fragments = []
    for ex_id, tokens in sentences:
        if not tokens:
            raise ExporterError(f"{ex_id}: empty sentence")
        rows = encoder.encode(list(tokens))
        if rows.shape != (len(tokens) + 2, encoder.hidden):
            raise ExporterError(
                f"{ex_id}: encoder produced {rows.shape}, expected "
                f"({len(tokens) + 2}, {encoder.hidden})")
        rel = f"text/{ex_id}.mmtf"
        mmtf.write_tensor_file(rows, out_dir / rel)
        fragments.append({"id": ex_id, "text_ref": rel})
    return fragments
