"""Experiment configuration: flat JSON file, flag overrides, stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from voice.explainers import METHODS
from voice.metrics import DEFAULT_IOU_THRESHOLD, SWEEP_THRESHOLDS
from voice.perturb import CHALLENGE_KINDS


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """All knobs of one experiment run.

    ``data`` is a path or a ``synthetic[:n[:seed]]`` spec. ``challenges``
    maps kind names to level lists; empty means a clean-data run. The
    default contrast threshold follows the reference choice for
    thousand-class models; for an N-class model 1/N^2 is the sensible
    starting point (0.01 at N=10).
    """

    weights: str = ""
    data: str = "synthetic"
    explainers: list = field(default_factory=lambda: ["gradcam", "gradcampp"])
    layer: str = "auto"
    p_t: float = 1e-5
    iou_t: float = DEFAULT_IOU_THRESHOLD
    sample_count: int = 100
    seeds: list = field(default_factory=lambda: [0])
    challenges: dict = field(default_factory=dict)
    out: str = "runs/run"
    workers: int = 0  # 0: one per logical core
    smoothgrad_samples: int = 25
    smoothgrad_sigma: float | None = None
    t_values: list = field(default_factory=lambda: list(SWEEP_THRESHOLDS))
    ifgsm_eps: float = 8.0 / 255.0
    ifgsm_steps: int = 10

    def validate(self, require_paths: bool = True) -> "ExperimentConfig":
        if not self.explainers:
            raise ConfigError("explainers must not be empty")
        for name in self.explainers:
            if name not in METHODS:
                raise ConfigError(f"unknown explainer {name!r}; known: {METHODS}")
        if not (0.0 < self.p_t < 1.0):
            raise ConfigError(f"p_t must lie in (0, 1), got {self.p_t}")
        if not (0.0 < self.iou_t < 1.0):
            raise ConfigError(f"iou_t must lie in (0, 1), got {self.iou_t}")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if self.smoothgrad_samples < 1:
            raise ConfigError("smoothgrad_samples must be >= 1")
        for kind, levels in self.challenges.items():
            if kind not in CHALLENGE_KINDS:
                raise ConfigError(f"unknown challenge {kind!r}; known: {CHALLENGE_KINDS}")
            if not levels:
                raise ConfigError(f"challenge {kind!r} has no levels")
            if sorted(levels) != list(levels):
                raise ConfigError(f"challenge {kind!r} levels must be sorted")
        for t in self.t_values:
            if not (0.0 < t < 1.0):
                raise ConfigError(f"sweep threshold {t} must lie in (0, 1)")
        if require_paths:
            if not self.weights:
                raise ConfigError("weights path is required")
            if not Path(self.weights).is_file():
                raise ConfigError(f"weights file not found: {self.weights}")
            if not self.data.startswith("synthetic") and not Path(self.data).exists():
                raise ConfigError(f"dataset path not found: {self.data}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# Keys excluded from the identity hash: they change where results land or
# how fast they are computed, never what is computed.
_NON_SEMANTIC_KEYS = {"out", "workers"}

_FIELD_TYPES = {f: t for f, t in ExperimentConfig.__annotations__.items()}


def config_hash(cfg: ExperimentConfig) -> str:
    payload = {k: v for k, v in cfg.to_dict().items() if k not in _NON_SEMANTIC_KEYS}
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                require_paths: bool = True) -> ExperimentConfig:
    """Build a config from an optional JSON file plus override values."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        values.update(loaded)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate(require_paths=require_paths)
