"""Experiment configuration: a flat, typed key set read from a JSON file.

Unknown keys are rejected and `--set key=value` overrides are coerced to the
declared field type, so a single config file plus its overrides pins down a
run completely.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SAMPLERS = ("prototype", "random", "margin", "entropy")
CLASSIFIERS = ("cosine", "linear")
GRL_SCHEDULES = ("logistic", "warmup")
MODEL_SELECTION = ("final", "validation")
LABEL_SHIFTS = ("none", "reversed")


@dataclass
class ExperimentConfig:
    # protocol
    seed: int = 0
    rounds: int = 5
    budget: float = 0.02  # <1 means fraction of the sampling pool, >=1 a count
    margin_delta: float = 0.8
    sampler: str = "prototype"
    matching: bool = True
    oracle_matching: bool = False  # weight source batches by the true pool distribution

    # kernel
    kernel_gamma: float = 0.0  # 0 means auto: 1 / feature dimension
    chunk_size: int = 1024

    # model
    classifier: str = "cosine"
    temperature: float = 0.1
    input_dim: int = 2
    hidden_dim: int = 16
    feature_dim: int = 16
    embed_dim: int = 8
    disc_hidden: int = 32

    # optimisation
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 12
    pretrain_epochs: int = 20
    batch_size: int = 64
    grl_schedule: str = "logistic"
    model_selection: str = "final"

    # synthetic domains
    num_classes: int = 8
    n_source: int = 2000
    n_target: int = 2000
    class_separation: float = 5.0
    cov_scale: float = 1.0
    rotation_deg: float = 5.0
    translation: tuple[float, ...] = (0.5, 0.25)
    geometric_ratio: float = 0.5
    label_shift: str = "reversed"
    test_fraction: float = 0.2

    def validate(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if not 0.0 <= self.margin_delta <= 1.0:
            raise ConfigError("margin_delta must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.kernel_gamma < 0:
            raise ConfigError("kernel_gamma must be positive (or 0 for auto)")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}, expected one of {SAMPLERS}")
        if self.classifier not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier {self.classifier!r}, expected one of {CLASSIFIERS}")
        if self.grl_schedule not in GRL_SCHEDULES:
            raise ConfigError(f"unknown grl_schedule {self.grl_schedule!r}, expected one of {GRL_SCHEDULES}")
        if self.model_selection not in MODEL_SELECTION:
            raise ConfigError(f"unknown model_selection {self.model_selection!r}")
        if self.label_shift not in LABEL_SHIFTS:
            raise ConfigError(f"unknown label_shift {self.label_shift!r}")
        if not 0.0 < self.geometric_ratio <= 1.0:
            raise ConfigError("geometric_ratio must lie in (0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        for name in (
            "chunk_size", "batch_size", "epochs", "pretrain_epochs", "num_classes",
            "n_source", "n_target", "input_dim", "hidden_dim", "feature_dim",
            "embed_dim", "disc_hidden",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        pool = self.n_target - int(round(self.n_target * self.test_fraction))
        if self.rounds * self.resolve_budget(pool) > pool:
            raise ConfigError("total budget rounds x B exceeds the target pool size")

    def resolve_budget(self, pool_size: int) -> int:
        """Turn a fractional budget into a per-round count for a given pool."""
        if self.budget < 1.0:
            return max(1, int(round(self.budget * pool_size)))
        return int(round(self.budget))

    def gamma_for(self, feature_dim: int) -> float:
        return self.kernel_gamma if self.kernel_gamma > 0 else 1.0 / feature_dim

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["translation"] = list(self.translation)
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            kwargs[key] = _coerce(key, value, fields[key].type)
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path, overrides: list[str] | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        return cls.from_dict(raw)

    def with_updates(self, **kwargs) -> "ExperimentConfig":
        config = dataclasses.replace(self, **kwargs)
        config.validate()
        return config


def _coerce(key: str, value, annotation: str):
    """Coerce a JSON or command-line value to the declared field type."""
    if annotation == "int":
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected int, got bool")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} as int") from exc
    elif annotation == "float":
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected float, got bool")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} as float") from exc
    elif annotation == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ConfigError(f"{key}: cannot parse {value!r} as bool")
    elif annotation == "str":
        if isinstance(value, str):
            return value
    elif annotation.startswith("tuple"):
        if isinstance(value, str):
            parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
            try:
                return tuple(float(p) for p in parts)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} as a float list") from exc
        if isinstance(value, (list, tuple)):
            try:
                return tuple(float(p) for p in value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} as a float list") from exc
    raise ConfigError(f"{key}: cannot interpret {value!r} as {annotation}")
