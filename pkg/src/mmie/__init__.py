"""Multimodal entity and relation extraction with variational bottleneck
regularization: a self-contained numpy engine with its own reverse-mode
autodiff, CRF decoding, and a train/eval/predict/sweep/ablate CLI."""

__version__ = "0.1.0"
