"""Run configuration: one JSON document with four sections.

Unknown keys anywhere are rejected so a typo cannot silently fall back to
a default. Section defaults:

  model:        task (required), d=64, h=4, d_text=d, d_img_raw=2048,
                depth=1, entity_pool="mean", precision="float64"
  training:     learning_rate=3e-5, weight_decay=0.01, batch_size=8,
                epochs=20, seed=0, eval_sampling="mean", grad_clip=null,
                max_len=128 (mner) / 80 (mre)
  regularizers: beta1=0.1, beta2=0.1, enable_rr=true, enable_ar=true,
                double_count_task=false, mre_negative_reconstruction=false
  data:         text_mode="embed", negative_relation="None",
                train=null, dev=null
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError

_SECTIONS = {
    "model": {"task", "d", "h", "d_text", "d_img_raw", "depth",
              "entity_pool", "precision"},
    "training": {"learning_rate", "weight_decay", "batch_size", "epochs",
                 "seed", "eval_sampling", "grad_clip", "max_len"},
    "regularizers": {"beta1", "beta2", "enable_rr", "enable_ar",
                     "double_count_task", "mre_negative_reconstruction"},
    "data": {"text_mode", "negative_relation", "train", "dev"},
}


@dataclass
class TrainConfig:
    task: str
    d: int = 64
    h: int = 4
    d_text: Optional[int] = None
    d_img_raw: int = 2048
    depth: int = 1
    entity_pool: str = "mean"
    precision: str = "float64"

    learning_rate: float = 3e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    eval_sampling: str = "mean"
    grad_clip: Optional[float] = None
    max_len: Optional[int] = None

    beta1: float = 0.1
    beta2: float = 0.1
    enable_rr: bool = True
    enable_ar: bool = True
    double_count_task: bool = False
    mre_negative_reconstruction: bool = False

    text_mode: str = "embed"
    negative_relation: str = "None"
    train: Optional[str] = None
    dev: Optional[str] = None

    def __post_init__(self):
        if self.task not in ("mner", "mre"):
            raise ConfigError(f"task must be 'mner' or 'mre', got {self.task!r}")
        if self.d_text is None:
            self.d_text = self.d
        if self.max_len is None:
            self.max_len = 128 if self.task == "mner" else 80
        if self.d < 1 or self.h < 1 or self.d % self.h != 0:
            raise ConfigError(f"width d={self.d} must be divisible by h={self.h}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.entity_pool not in ("mean", "max"):
            raise ConfigError(f"entity_pool must be mean|max, got {self.entity_pool!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64|float32, got "
                              f"{self.precision!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_sampling not in ("mean", "sample"):
            raise ConfigError(f"eval_sampling must be mean|sample, got "
                              f"{self.eval_sampling!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("beta1/beta2 must be nonnegative")
        if self.text_mode not in ("embed", "features"):
            raise ConfigError(f"text_mode must be embed|features, got "
                              f"{self.text_mode!r}")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @property
    def kl_text_weight(self) -> float:
        return self.beta1 if self.enable_rr else 0.0

    @property
    def kl_image_weight(self) -> float:
        return self.beta2 if self.enable_rr else 0.0

    def to_sections(self) -> dict:
        flat = asdict(self)
        return {section: {k: flat[k] for k in keys}
                for section, keys in _SECTIONS.items()}

    @classmethod
    def from_sections(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        flat = {}
        for section, keys in _SECTIONS.items():
            body = doc.get(section, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {section!r} must be an object")
            bad = set(body) - keys
            if bad:
                raise ConfigError(f"unknown keys {sorted(bad)} in section "
                                  f"{section!r}")
            flat.update(body)
        if "task" not in flat:
            raise ConfigError("model.task is required")
        try:
            return cls(**flat)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})")
    return TrainConfig.from_sections(doc)
