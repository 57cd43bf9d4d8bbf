"""Closed-form overflow, communication and convergence calculators.

Each closed form has a Monte Carlo counterpart here or in the protocol
simulator so the formulas can be checked against independent runs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .lwe import comm_min_modulus, residue_bits


def erfc(x):
    return special.erfc(x)


def erfc_inv(y):
    y_arr = np.asarray(y, dtype=np.float64)
    if np.any((y_arr <= 0) | (y_arr >= 2)):
        raise ValueError(f"erfc_inv is defined on (0, 2), got {y}")
    out = special.erfcinv(y_arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class OverflowModel:
    N: int
    sigma_g: float
    C: float
    delta: float = 1e-6

    def __post_init__(self):
        if self.N < 1 or not self.sigma_g > 0 or not self.C > 0:
            raise ValueError("N, sigma_g and C must be positive")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def z(self) -> float:
        return self.C / math.sqrt(2 * self.N * self.sigma_g**2)


def overflow_bracket(model: OverflowModel) -> float:
    """``1 - 2 erfc(z)``; negative values mean the closed form left [0, 1]."""
    return 1.0 - 2.0 * float(erfc(model.z))


def overflow_probability(model: OverflowModel) -> float:
    """``P_o = 1 - [1 - 2 erfc(C / sqrt(2 N sigma^2))]^N``, clamped to [0, 1]."""
    bracket = overflow_bracket(model)
    # Odd N with a negative bracket would push the raw value past 1.
    value = 1.0 - max(bracket, 0.0) ** model.N
    return min(1.0, max(0.0, value))


def gaussian_linf_tail(N: int, sigma_g: float, C: float, dim: int) -> float:
    """Exact ``Pr[||sum of N iid N(0, sigma^2 I_dim)||_inf > C]``."""
    per_coord = float(erfc(C / math.sqrt(2 * N * sigma_g**2)))
    return -math.expm1(dim * math.log1p(-per_coord)) if per_coord < 1 else 1.0


def min_clip_threshold(N: int, sigma_g: float, delta: float) -> float:
    """Smallest C with ``overflow_probability <= delta``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if N < 1 or not sigma_g > 0:
        raise ValueError("N and sigma_g must be positive")
    # 1/2 - 1/2 (1-delta)^(1/N), written to keep precision for tiny delta.
    y = -0.5 * math.expm1(math.log1p(-delta) / N)
    return math.sqrt(2 * N * sigma_g**2) * erfc_inv(y)


MIN_MC_TRIALS = 10_000


def mc_overflow_estimate(N: int, sigma_g: float, C: float, trials: int, dim: int | None = None,
                         seed=0, block: int = 20_000) -> tuple[float, float]:
    """Fraction of trials where ``||sum_i g_i||_inf > C`` for i.i.d. ``N(0, sigma_g^2 I)`` gradients.

    The sum of ``N`` independent Gaussians is drawn directly as one Gaussian
    of standard deviation ``sigma_g * sqrt(N)``. ``dim`` defaults to ``N``,
    the exponent the closed form uses. Returns ``(p_hat, binomial stderr)``.
    """
    if trials < MIN_MC_TRIALS:
        raise ValueError(f"need at least {MIN_MC_TRIALS} trials, got {trials}")
    dim = N if dim is None else dim
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        size = min(block, trials - done)
        total = rng.normal(0.0, sigma_g * math.sqrt(N), size=(size, dim))
        hits += int(np.count_nonzero(np.abs(total).max(axis=1) > C))
        done += size
    p_hat = hits / trials
    return p_hat, math.sqrt(max(p_hat * (1 - p_hat), 0.0) / trials)


# --- communication ----------------------------------------------------------

def comm_factor(b: int, m: int) -> float:
    """``tau = 1 + (2 + 1.5 log2 m - 0.5 log2 3) / b`` for the minimal CPA-valid q."""
    if b < 1 or m < 1:
        raise ValueError("b and m must be positive")
    return 1.0 + (2 + 1.5 * math.log2(m) - 0.5 * math.log2(3)) / b


def comm_factor_table(b: int) -> float:
    """The ratio ``(b + 15) / b`` that reproduces the reported experimental factors."""
    return (b + 15) / b


def ct_bits(d: int, q: int) -> int:
    return d * residue_bits(q)


def plain_bits(d: int, b: int) -> int:
    return d * b


def tau_measured(q: int, b: int) -> float:
    return residue_bits(q) / b


def cpa_min_modulus(b: int, m: int) -> float:
    return comm_min_modulus(b, m)


# --- convergence ------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceInputs:
    F0_gap: float
    T: int
    eta: float
    sigma: float
    B: int
    N: int
    d: int
    C: float
    b: int
    nu: float

    def __post_init__(self):
        for name in ("F0_gap", "T", "eta", "B", "N", "d", "C", "b", "nu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.eta > 1 / self.nu:
            raise ValueError(f"step size eta={self.eta} exceeds 1/nu={1 / self.nu}")


@dataclass(frozen=True)
class ConvergenceBound:
    optimization: float
    variance: float
    quantization: float

    @property
    def vanilla(self) -> float:
        return self.optimization + self.variance

    @property
    def total(self) -> float:
        return self.vanilla + self.quantization


def convergence_bound(inputs: ConvergenceInputs) -> ConvergenceBound:
    """Bound on the average squared gradient norm over T rounds.

    ``2 (F0 - F*) / (T eta) + sigma^2 / (N B) + d C^2 / (N 2^(2b))``; the first
    two terms are the unquantized DSGD bound, the last the quantization cost.
    """
    x = inputs
    return ConvergenceBound(
        optimization=2 * x.F0_gap / (x.T * x.eta),
        variance=x.sigma**2 / (x.N * x.B),
        quantization=x.d * x.C**2 / (x.N * 4.0**x.b),
    )


# --- reports ----------------------------------------------------------------

def report(inputs: dict, formula_value, mc_estimate=None, stderr=None, verdict=None, **extra) -> dict:
    out = {
        "inputs": inputs,
        "formula_value": formula_value,
        "mc_estimate": mc_estimate,
        "stderr": stderr,
        "verdict": verdict,
    }
    out.update(extra)
    return out


def overflow_report(N: int, sigma_g: float, delta: float, C: float | None = None, mc_trials: int = 0,
                    dim: int | None = None, seed: int = 0) -> dict:
    if C is None:
        C = min_clip_threshold(N, sigma_g, delta)
    model = OverflowModel(N, sigma_g, C, delta)
    p_o = overflow_probability(model)
    extra = {"C": C, "clamped": overflow_bracket(model) < 0,
             "exact_gaussian_tail": gaussian_linf_tail(N, sigma_g, C, N if dim is None else dim)}
    if not mc_trials:
        return report(asdict(model), p_o, verdict="ok" if p_o <= delta else "exceeds_delta", **extra)
    p_hat, se = mc_overflow_estimate(N, sigma_g, C, mc_trials, dim=dim, seed=seed)
    agree = abs(p_o - p_hat) <= 3 * se if se > 0 else p_o == p_hat
    return report(asdict(model), p_o, p_hat, se, "agree" if agree else "disagree", **extra)


def comm_report(b: int, m: int | None = None, q: int | None = None) -> dict:
    extra = {"table_ratio": comm_factor_table(b)}
    value = None
    if m is not None:
        value = comm_factor(b, m)
        extra["cpa_min_q"] = cpa_min_modulus(b, m)
    if q is not None:
        extra["tau_measured"] = tau_measured(q, b)
        extra["ct_bits_per_coordinate"] = residue_bits(q)
    return report({"b": b, "m": m, "q": q}, value, verdict="ok", **extra)


def bound_report(inputs: ConvergenceInputs) -> dict:
    bound = convergence_bound(inputs)
    return report(asdict(inputs), bound.total, verdict="ok",
                  terms={"optimization": bound.optimization, "variance": bound.variance,
                         "quantization": bound.quantization, "vanilla": bound.vanilla})
