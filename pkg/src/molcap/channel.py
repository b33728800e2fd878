"""Poisson reception channel with a finite coefficient profile (ISI taps)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, xlogy

from .errors import DomainError

TAIL_MASS = 1e-12


@dataclass(frozen=True)
class ChannelProfile:
    """Channel coefficients ``(p_0, ..., p_L)``; ``L`` is the ISI memory.

    ``p_0 = 0`` is accepted so that degenerate dominators can be represented;
    operations that need ``p_0 > 0`` check it themselves.
    """

    coeffs: tuple[float, ...]

    def __post_init__(self) -> None:
        c = tuple(float(v) for v in np.atleast_1d(np.asarray(self.coeffs, dtype=float)))
        if len(c) == 0:
            raise ValueError("channel profile needs at least one coefficient")
        if any(not np.isfinite(v) or v < 0 for v in c):
            raise ValueError("channel coefficients must be finite and non-negative")
        object.__setattr__(self, "coeffs", c)

    @property
    def p0(self) -> float:
        return self.coeffs[0]

    @property
    def memory(self) -> int:
        return len(self.coeffs) - 1

    @property
    def is_degenerate(self) -> bool:
        return self.coeffs[0] <= 0

    def as_array(self) -> np.ndarray:
        return np.array(self.coeffs)

    def to_dict(self) -> dict:
        return {"coeffs": list(self.coeffs)}

    @classmethod
    def from_dict(cls, d: Mapping) -> ChannelProfile:
        return cls(tuple(d["coeffs"]))


def _as_profile(p) -> ChannelProfile:
    return p if isinstance(p, ChannelProfile) else ChannelProfile(tuple(p))


def convolve_mean(p: ChannelProfile | Sequence[float], x) -> np.ndarray:
    """Mean counts ``lambda_i = sum_j p_j x_{i-j}``; works on the last axis of ``x``."""
    coeffs = _as_profile(p).as_array()
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("release amounts must be non-negative")
    n = x.shape[-1]
    if x.ndim == 1:
        return np.convolve(x, coeffs)[:n]
    out = np.zeros_like(x)
    for j, pj in enumerate(coeffs[:n]):
        if pj:
            out[..., j:] += pj * x[..., : n - j]
    return out


def sample_outputs(rng: np.random.Generator, lambdas) -> np.ndarray:
    """Independent Poisson draws with the given means (any array shape)."""
    lam = np.asarray(lambdas, dtype=float)
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise DomainError("Poisson means must be non-negative")
    return rng.poisson(lam)


def log_pmf(y, lam):
    """Poisson log-probability; ``log_pmf(0, 0) = 0`` and ``log_pmf(y>0, 0) = -inf``."""
    y = np.asarray(y)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore"):
        out = xlogy(y, lam) - lam - gammaln(y + 1.0)
    return out if np.ndim(out) else float(out)


def output_cutoff(lam_max: float, tail: float = TAIL_MASS) -> int:
    """Smallest ``y_max`` with ``P(Y > y_max) < tail`` for ``Y ~ Poisson(lam_max)``."""
    if lam_max <= 0:
        return 0
    y = int(stats.poisson.isf(tail, lam_max))
    while stats.poisson.sf(y, lam_max) >= tail:
        y += 1
    return y


def log_transition_matrix(
    inputs: np.ndarray, p0: float, tail: float = TAIL_MASS, tail_bin: bool = True
) -> np.ndarray:
    """Log-likelihood matrix ``log P(y | x)`` over ``y = 0..y_max``.

    With ``tail_bin`` an extra last column holds ``log P(Y > y_max | x)`` so that
    every row is an exact probability vector.
    """
    lam = p0 * np.asarray(inputs, dtype=float)
    ymax = output_cutoff(float(lam.max()) if lam.size else 0.0, tail)
    y = np.arange(ymax + 1)
    L = np.asarray(log_pmf(y[None, :], lam[:, None]), dtype=float)
    if tail_bin:
        L = np.concatenate([L, stats.poisson.logsf(ymax, lam)[:, None]], axis=1)
    return L
