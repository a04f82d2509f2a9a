"""Flat ``key = value`` experiment configuration.

One setting per line; ``#`` starts a comment; list values are comma
separated. Unknown keys are an error, and so is a missing ``seed``.

    seed = 0
    variant = aspp-middle
    widths = 4, 8, 16, 32, 64, 64
    data_dir = runs/corpus
    synth_utterances = 25
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import VARIANTS, UNetConfig

CHECKPOINT_ENV = "SPEECH_UNET_CHECKPOINT_DIR"


class ConfigFileError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    # model
    variant: str = "baseline"
    widths: tuple = (16, 32, 64, 128, 256, 256)
    kernel_size: int = 30
    factors: tuple = (1, 2, 3, 4)
    # training
    lr: float = 1e-4
    lr_schedule: str = "constant"
    batch_size: int = 8
    max_steps: int = 1000
    eval_every: int = 100
    patience: int = 10
    max_clips: int = 0
    checkpoint_dir: str = "checkpoints"
    # data
    data_dir: str = "data"
    manifest: str = ""
    sample_rate: int = 16000
    clip_seconds: float = 1.0
    hop_seconds: float = 0.5
    min_seconds: float = 0.5
    raw_clean_dir: str = ""
    raw_noisy_dir: str = ""
    raw_noise_dir: str = ""
    synth_utterances: int = 20
    synth_min_seconds: float = 2.0
    synth_max_seconds: float = 3.0
    snr_levels: tuple = (15.0, 10.0, 5.0, 0.0)
    noise_kinds: tuple = ("white", "pink", "babble")
    # evaluation
    metrics: tuple = ("snr", "ssnr", "stoi")
    pesq_command: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigFileError(f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.sample_rate <= 0:
            raise ConfigFileError("sample_rate must be positive")
        for key in ("batch_size", "max_steps", "eval_every", "patience"):
            if getattr(self, key) < 1:
                raise ConfigFileError(f"{key} must be at least 1")
        bad = set(self.metrics) - {"snr", "ssnr", "stoi", "pesq"}
        if bad:
            raise ConfigFileError(f"unknown metrics: {', '.join(sorted(bad))}")

    def model_config(self):
        return UNetConfig(
            widths=tuple(self.widths),
            kernel_size=self.kernel_size,
            variant=self.variant,
            factors=tuple(self.factors),
            seed=self.seed,
        )

    @property
    def manifest_path(self):
        return Path(self.manifest) if self.manifest else Path(self.data_dir) / "manifest.tsv"

    @property
    def checkpoint_path(self):
        """Checkpoint directory; the environment variable wins over the file."""
        return Path(os.environ.get(CHECKPOINT_ENV) or self.checkpoint_dir)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig(seed=0)


def _convert(key, raw):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0])
            return tuple(kind(s) for s in items)
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigFileError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text, overrides=None):
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigFileError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigFileError(f"line {n}: duplicate key {key!r}")
        values[key] = raw
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigFileError(f"unknown key {key!r}")
        values[key] = str(raw)
    if "seed" not in values:
        raise ConfigFileError("seed is mandatory")
    return ExperimentConfig(**{k: _convert(k, v) for k, v in values.items()})


def load_config(path, overrides=None):
    return parse_config(Path(path).read_text(), overrides)
