"""Hyperparameter containers and flat TOML/JSON config loading."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# "lambda" is a keyword, so the attribute carries a trailing underscore
_ALIASES = {"lambda": "lambda_"}


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lambda_: float = 0.01
    K_n: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1  # embedding epochs per alternation
    iterations: int = 30  # outer alternations I
    seed: int = 0
    staged_mode: bool = False
    normalize_mode: bool = True  # False = plain inner products, no l2 normalisation
    M: int = 4
    K: int = 256
    icm_sweeps: int = 3
    kmeans_iters: int = 25
    perturb: bool = True

    def validate(self):
        _positive(self, "gamma", "K_n", "batch_size", "M", "K", "icm_sweeps")
        _nonneg(self, "lambda_", "learning_rate", "epochs", "iterations", "kmeans_iters")
        return self


@dataclass
class PipelineConfig(TrainConfig):
    k: int = 20
    tau: float = 0.75
    epsilon: float = 0.1
    use_graph: bool = True  # False = no graph, enhancement or merging
    R: int = 5000
    topN: int = 5000

    def validate(self):
        super().validate()
        _nonneg(self, "k")
        _positive(self, "epsilon", "R", "topN")
        if not -1.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [-1, 1], got {self.tau}")
        return self

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


def _positive(cfg, *names):
    for n in names:
        if not getattr(cfg, n) > 0:
            raise ValidationError(f"{n} must be > 0, got {getattr(cfg, n)}")


def _nonneg(cfg, *names):
    for n in names:
        if not getattr(cfg, n) >= 0:
            raise ValidationError(f"{n} must be >= 0, got {getattr(cfg, n)}")


def from_mapping(cls, data: dict, base=None):
    """Build ``cls`` from a flat mapping; values override ``base`` when given."""
    known = {f.name: f for f in fields(cls)}
    values = asdict(base) if base is not None else {}
    for key, val in data.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ValidationError(f"unknown config key {key!r}")
        default = known[name].default
        try:
            if isinstance(default, bool):
                if isinstance(val, str):
                    val = val.strip().lower() in ("1", "true", "yes", "on")
                val = bool(val)
            elif isinstance(default, int):
                if isinstance(val, float) and not val.is_integer():
                    raise ValueError
                val = int(val)
            elif isinstance(default, float):
                val = float(val)
        except (TypeError, ValueError):
            raise ValidationError(f"config key {key!r}: cannot use value {val!r}") from None
        values[name] = val
    return cls(**values).validate()


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError(f"{path}: cannot parse config ({exc})") from None
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ValidationError(f"{path}: config must be flat key = value pairs")
    return data


def to_dict(cfg) -> dict:
    out = asdict(cfg)
    out["lambda"] = out.pop("lambda_")
    return dict(sorted(out.items()))


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
