"""Run configuration: JSON in, validated dataclass out."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .lwe import LweParams, ParameterError
from .protocol import BASELINE_SIGMA_RULES, CLIP_RULES, MODES
from .trainer import MODEL_KINDS


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass
class RunConfig:
    mode: str = "flag"
    n: int = 256
    m: int = 768
    q: int = 65536
    b: int = 8
    N: int = 8
    T: int = 100
    eta: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    C0: float = 1.0
    clip_rule: str = "prev_aggregate"
    clip_scale: float = 2.0
    delta_overflow: float = 1e-6
    baseline_sigma: str = "printed"
    model: dict = field(default_factory=lambda: {"kind": "logistic"})
    dataset: dict = field(default_factory=lambda: {"source": "synthetic"})
    seeds: dict = field(default_factory=lambda: {"matrix": 0, "rng": 0, "dither": 1, "model": 0, "data": 0})
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = sorted(set(raw) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("<path>", f"no such config file: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", str(exc)) from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        _choice("mode", self.mode, MODES)
        for name in ("n", "m", "q", "b", "N", "T", "batch_size"):
            _int(name, getattr(self, name), minimum=1)
        for name in ("eta", "C0", "clip_scale"):
            value = getattr(self, name)
            if not _is_number(value) or not value > 0 or not math.isfinite(value):
                raise ConfigError(name, f"must be a positive number, got {value!r}")
        if not _is_number(self.momentum) or not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum!r}")
        if not _is_number(self.weight_decay) or self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be nonnegative, got {self.weight_decay!r}")
        if not _is_number(self.delta_overflow) or not 0 < self.delta_overflow < 1:
            raise ConfigError("delta_overflow", f"must lie in (0, 1), got {self.delta_overflow!r}")
        _choice("clip_rule", self.clip_rule, CLIP_RULES)
        _choice("baseline_sigma", self.baseline_sigma, BASELINE_SIGMA_RULES)
        try:
            self.lwe_params()
        except ParameterError as exc:
            raise ConfigError("q", str(exc)) from None
        if self.mode in ("flag", "lwe_baseline") and self.N < 2:
            raise ConfigError("N", "encrypted modes need at least 2 clients")

        if not isinstance(self.model, dict):
            raise ConfigError("model", "must be an object")
        _choice("model.kind", self.model.get("kind"), MODEL_KINDS)
        hidden = self.model.get("hidden", [])
        if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
            raise ConfigError("model.hidden", "must be a list of positive integers")

        if not isinstance(self.dataset, dict):
            raise ConfigError("dataset", "must be an object")
        _choice("dataset.source", self.dataset.get("source"), ("synthetic", "csv"))
        if self.dataset["source"] == "csv":
            paths = self.dataset.get("paths")
            if not isinstance(paths, list) or not paths:
                raise ConfigError("dataset.paths", "csv datasets need a non-empty list of paths")
            if len(paths) not in (1, self.N):
                raise ConfigError("dataset.paths", f"give one file, or one per client ({self.N})")
            if not isinstance(self.dataset.get("schema"), dict):
                raise ConfigError("dataset.schema", "csv datasets need a schema naming the label column")
        else:
            clients = self.dataset.get("n_clients", self.N)
            if clients != self.N:
                raise ConfigError("dataset.n_clients", f"must equal N={self.N}")

        if not isinstance(self.seeds, dict):
            raise ConfigError("seeds", "must be an object")
        for key in ("matrix", "rng", "dither"):
            if key not in self.seeds:
                raise ConfigError(f"seeds.{key}", "every seed must be given explicitly")
        for key, value in self.seeds.items():
            _int(f"seeds.{key}", value, minimum=0)
        if not isinstance(self.output_dir, str) or not self.output_dir:
            raise ConfigError("output_dir", "must be a non-empty string")

    def lwe_params(self) -> LweParams:
        return LweParams(self.n, self.m, self.q, self.b)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _int(name, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {value}")


def _choice(name, value, options):
    if value not in options:
        raise ConfigError(name, f"must be one of {list(options)}, got {value!r}")
