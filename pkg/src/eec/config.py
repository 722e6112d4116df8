"""Experiment configuration: JSON parsing, validation and defaults."""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass, fields

from .errors import ConfigError

VARIANTS = ("eec", "eecs", "finetune-baseline", "exemplar-baseline")

# JSON key -> dataclass attribute (only where they differ)
_KEY_ALIASES = {"lambda": "lam"}


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    out_dir: str = "runs"
    variant: str = "eec"
    classes_per_increment: int = 1
    lam: float = 0.5
    gamma_r: float = 0.1
    gamma_p: float = 0.1
    budget_k: int = 0  # 0 = unlimited
    classifier_epochs: int = 20
    autoencoder_epochs: int = 50
    classifier_lr: float = 1e-3
    autoencoder_lr: float = 1e-3
    classifier_batch_size: int = 64
    autoencoder_batch_size: int = 64
    feature_layer: int = 3
    oversample_factor: int = 5
    seed: int = 0
    repeats: int = 1
    shuffle_class_order: bool = False
    scratch_classifier: bool = False
    # synthetic-dataset knobs
    num_classes: int = 6
    per_class: int = 200
    image_size: int = 32
    noise_level: float = 0.1

    def validate(self) -> "ExperimentConfig":
        def require(cond: bool, field_name: str, msg: str):
            if not cond:
                raise ConfigError(f"{field_name}: {msg}")

        require(self.dataset in ("mnist", "synthetic"), "dataset",
                f"must be 'mnist' or 'synthetic', got {self.dataset!r}")
        require(self.variant in VARIANTS, "variant",
                f"must be one of {VARIANTS}, got {self.variant!r}")
        require(self.dataset != "mnist" or bool(self.data_dir), "data_dir",
                "required when dataset is 'mnist'")
        require(0.0 <= self.lam <= 1.0, "lambda", "must be in [0, 1]")
        require(0.0 <= self.gamma_r <= 1.0, "gamma_r", "must be in [0, 1]")
        require(0.0 <= self.gamma_p <= 1.0, "gamma_p", "must be in [0, 1]")
        require(self.budget_k >= 0, "budget_k", "must be >= 0 (0 = unlimited)")
        for name in ("classes_per_increment", "classifier_epochs",
                     "autoencoder_epochs", "classifier_batch_size",
                     "autoencoder_batch_size", "repeats", "per_class",
                     "oversample_factor"):
            require(getattr(self, name) >= 1, name, "must be >= 1")
        for name in ("classifier_lr", "autoencoder_lr"):
            require(getattr(self, name) > 0, name, "must be positive")
        require(self.feature_layer in (1, 2, 3), "feature_layer",
                "must be 1, 2 or 3")
        require(1 <= self.num_classes <= 10, "num_classes", "must be in [1, 10]")
        require(self.image_size in (16, 32), "image_size", "must be 16 or 32")
        require(self.noise_level >= 0, "noise_level", "must be >= 0")
        return self


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping; unknown keys are rejected with a suggestion."""
    known = {f.name for f in fields(ExperimentConfig)} - {"lam"}
    known |= set(_KEY_ALIASES)
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            close = difflib.get_close_matches(key, sorted(known), n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigError(f"unknown config key {key!r}{hint}")
        kwargs[_KEY_ALIASES.get(key, key)] = value
    try:
        config = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return config.validate()


def parse_config(path: str) -> ExperimentConfig:
    """Load and validate a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object in {path}")
    return config_from_dict(raw)
