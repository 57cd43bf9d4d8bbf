"""l-infinity clipping and the half-dithered quantizer.

Levels are ``k = round(g / step + u)`` with ``step = 2C / 2**b`` and ``u``
uniform on ``(-1/2, 1/2]`` per coordinate. The decoder never sees ``u``; the
reconstruction is simply ``k * step``, which is unbiased because the dither
turns rounding into stochastic rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantConfig:
    C: float
    b: int

    def __post_init__(self):
        if not (np.isfinite(self.C) and self.C > 0):
            raise ValueError(f"clip threshold must be positive and finite, got {self.C}")
        if self.b < 1:
            raise ValueError(f"b must be >= 1, got {self.b}")

    @property
    def step(self) -> float:
        return 2.0 * self.C / 2**self.b

    @property
    def max_level(self) -> int:
        return 2 ** (self.b - 1)


class DitherSource:
    """Per-coordinate i.i.d. dither in level units, uniform on (-1/2, 1/2]."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    @classmethod
    def from_seed(cls, seed) -> "DitherSource":
        return cls(np.random.default_rng(seed))

    def draw(self, size: int) -> np.ndarray:
        # random() is on [0, 1), so 0.5 - random() is on (-0.5, 0.5].
        return 0.5 - self.rng.random(size)


class ZeroDither(DitherSource):
    """Dither pinned to zero; plain rounding, for tests and forced cases."""

    def __init__(self):
        super().__init__(None)

    def draw(self, size: int) -> np.ndarray:
        return np.zeros(size)


def clip(g, C: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    if C <= 0:
        raise ValueError(f"clip threshold must be positive, got {C}")
    norm = np.abs(g).max() if g.size else 0.0
    return g / max(1.0, norm / C)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(g_hat, cfg: QuantConfig, dither: DitherSource) -> np.ndarray:
    g_hat = np.asarray(g_hat, dtype=np.float64)
    # Tolerate one ulp of slack from the division in clip().
    if g_hat.size and np.abs(g_hat).max() > cfg.C * (1 + 1e-12):
        raise ValueError(f"input exceeds the clip threshold C={cfg.C}; clip() it first")
    scaled = g_hat / cfg.step + dither.draw(g_hat.size).reshape(g_hat.shape)
    k = round_half_away(scaled).astype(np.int64)
    return np.clip(k, -cfg.max_level, cfg.max_level)


def dequantize(k, cfg: QuantConfig) -> np.ndarray:
    return np.asarray(k, dtype=np.float64) * cfg.step


@dataclass(frozen=True)
class ErrorStats:
    mean: np.ndarray
    mean_sq: np.ndarray
    total_mean: float
    total_mean_sq: float
    vector_sq: float


def quantization_error_stats(samples, inputs=None) -> ErrorStats:
    """Empirical moments of the quantization error.

    ``samples`` is an ``(S, d)`` array of errors, or of reconstructions when
    ``inputs`` (shape ``(d,)`` or ``(S, d)``) is given. ``vector_sq`` is the
    mean squared l2 norm of the error vector, the aggregate quantity.
    """
    eps = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if eps.shape[0] < 1:
        raise ValueError("need at least one sample")
    if inputs is not None:
        eps = eps - np.asarray(inputs, dtype=np.float64)
    mean = eps.mean(axis=0)
    mean_sq = (eps**2).mean(axis=0)
    return ErrorStats(
        mean=mean,
        mean_sq=mean_sq,
        total_mean=float(mean.mean()),
        total_mean_sq=float(mean_sq.mean()),
        vector_sq=float((eps**2).sum(axis=1).mean()),
    )
