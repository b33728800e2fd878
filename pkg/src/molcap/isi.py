"""Adapting to unknown ISI: profile domination, transmitter precoding, receiver thinning.

A profile ``p_tilde`` is dominated by ``p`` when ``p_tilde = q * p`` (discrete
convolution) for a non-negative filter ``q`` with total mass at most one.  A
code built for ``p_tilde`` can then be used on ``p`` either by convolving the
releases with ``q`` at the transmitter or by randomly thinning the received
counts with ``q`` at the receiver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .channel import ChannelProfile
from .errors import (
    CertificateError,
    DomainError,
    ExcessMassError,
    InfeasibleInputError,
    NonConcaveError,
)
from .transmitter import TOL_FEAS, ProductionFunction, check_feasible, eval_f, is_concave

TOL_Q = 1e-9


@dataclass(frozen=True)
class DominationCertificate:
    q: tuple[float, ...]
    mass: float
    residual: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))

    @classmethod
    def from_filter(cls, q: Sequence[float], residual: float = 0.0) -> DominationCertificate:
        q = tuple(float(v) for v in q)
        return cls(q, float(sum(q)), residual)

    @classmethod
    def identity(cls, length: int = 1) -> DominationCertificate:
        return cls.from_filter((1.0,) + (0.0,) * (length - 1))

    def as_array(self) -> np.ndarray:
        return np.array(self.q)

    def to_dict(self) -> dict:
        return {"q": list(self.q), "mass": self.mass, "residual": self.residual}

    @classmethod
    def from_dict(cls, d: Mapping) -> DominationCertificate:
        return cls(tuple(d["q"]), float(d["mass"]), float(d["residual"]))


def _coeffs(p) -> np.ndarray:
    return p.as_array() if isinstance(p, ChannelProfile) else np.asarray(p, dtype=float)


def forward_substitution(p, p_tilde) -> np.ndarray:
    """Unique ``q`` of length ``len(p_tilde)`` with ``(q * p)_j = p_tilde_j`` for ``j < len(p_tilde)``."""
    p = _coeffs(p)
    pt = _coeffs(p_tilde)
    if p[0] <= 0:
        raise DomainError("domination needs p_0 > 0")
    q = np.zeros(len(pt))
    for j in range(len(pt)):
        k = np.arange(1, min(j, len(p) - 1) + 1)
        q[j] = (pt[j] - p[k] @ q[j - k]) / p[0]
    return q


def reconstruction_residual(p, p_tilde, q) -> float:
    """Max error of ``q * p`` against ``p_tilde`` over the full convolution length."""
    full = np.convolve(np.asarray(q, dtype=float), _coeffs(p))
    target = np.zeros(len(full))
    pt = _coeffs(p_tilde)
    target[: len(pt)] = pt
    return float(np.max(np.abs(full - target)))


def solve_domination(p, p_tilde, tol_q: float = TOL_Q) -> DominationCertificate | None:
    """Decide ``p_tilde`` dominated by ``p``; returns the certificate or ``None``.

    The triangular system has a unique solution, and any valid filter must be
    finite when ``p`` is non-negative, so this is a complete decision procedure.
    The reconstruction must also vanish past ``len(p_tilde)``.
    """
    q = forward_substitution(p, p_tilde)
    # a valid filter has at most len(p_tilde) - len(p) + 1 taps (trailing zeros trimmed);
    # anything past that is amplified rounding noise, and the residual check below decides
    pa, pt = np.trim_zeros(_coeffs(p), "b"), np.trim_zeros(_coeffs(p_tilde), "b")
    q[max(len(pt) - len(pa) + 1, 0) :] = 0.0
    if np.any(q < -tol_q) or q.sum() > 1.0 + tol_q:
        return None
    q = np.where(q < 0, 0.0, q)
    residual = reconstruction_residual(p, p_tilde, q)
    if residual > tol_q:
        return None
    return DominationCertificate(tuple(q), float(q.sum()), residual)


def memoryless_dominator(p_tilde) -> ChannelProfile:
    """ISI-free profile ``(sum_j p_tilde_j)`` that dominates ``p_tilde``."""
    return ChannelProfile((float(_coeffs(p_tilde).sum()),))


def precode_transmitter(q, x_tilde) -> np.ndarray:
    """``x_j = sum_k q_{j-k} x_tilde_k`` along the last axis, truncated to the input length."""
    qa = q.as_array() if isinstance(q, DominationCertificate) else np.asarray(q, dtype=float)
    xt = np.asarray(x_tilde, dtype=float)
    if np.any(xt < 0):
        raise DomainError("release amounts must be non-negative")
    n = xt.shape[-1]
    if xt.ndim == 1:
        return np.convolve(xt, qa)[:n]
    out = np.zeros_like(xt)
    for j, qj in enumerate(qa[:n]):
        if qj:
            out[..., j:] += qj * xt[..., : n - j]
    return out


@dataclass(frozen=True)
class LemmaCheck:
    x: np.ndarray
    feasible: bool
    s_trace: np.ndarray
    dominating_s: np.ndarray
    invariant_ok: bool
    max_deficit: float
    first_violation: int | None


def verify_lemma_a1(
    f: ProductionFunction,
    q: DominationCertificate,
    x_tilde: Sequence[float],
    require_concave: bool = True,
    tol: float = TOL_FEAS,
) -> LemmaCheck:
    """Precode a feasible ``x_tilde`` and check the result is feasible too.

    Also checks the storage domination ``s_j >= sum_k q_{j-k} s_tilde_k`` at
    every slot.  ``max_deficit`` is the largest amount by which either the
    release or the domination inequality is violated (0 when all hold).
    With ``require_concave=False`` the concavity guard is skipped so that
    counterexamples for non-concave ``f`` can be exhibited.
    """
    if require_concave and not is_concave(f):
        raise NonConcaveError("the precoding guarantee needs a concave production function")
    if q.mass > 1.0 + TOL_Q:
        raise ExcessMassError(f"filter mass {q.mass:g} exceeds one")
    xt = np.asarray(x_tilde, dtype=float)
    base = check_feasible(f, xt, tol)
    if not base.ok:
        raise InfeasibleInputError(f"x_tilde overdraws storage at slot {base.first_violation}")
    s_tilde = np.array(base.s_trace)
    x = precode_transmitter(q, xt)
    dominating = precode_transmitter(q, s_tilde)

    n = len(x)
    s_trace = np.zeros(n)
    s = 0.0
    first = None
    deficit = 0.0
    invariant_ok = True
    for j in range(n):
        s_trace[j] = s
        release_gap = x[j] - s
        dom_gap = dominating[j] - s
        if dom_gap > tol:
            invariant_ok = False
        if release_gap > tol and first is None:
            first = j
        deficit = max(deficit, release_gap, dom_gap)
        # keep simulating past a violation with the release capped at the storage
        s = eval_f(f, max(s - x[j], 0.0))
    return LemmaCheck(x, first is None, s_trace, dominating, invariant_ok, float(max(deficit, 0.0)), first)


def superadditivity_check(
    f: ProductionFunction, alphas: Sequence[float], vs: Sequence[float], tol: float = TOL_FEAS
) -> bool:
    """``f(sum a_i v_i) >= sum a_i f(v_i)`` for weights with ``sum a_i <= 1``."""
    a = np.asarray(alphas, dtype=float)
    v = np.asarray(vs, dtype=float)
    if a.shape != v.shape:
        raise ValueError("alphas and vs must have equal length")
    if np.any(a < 0) or a.sum() > 1.0 + 1e-12 or np.any(v < 0):
        raise DomainError("need alphas >= 0 with sum <= 1 and vs >= 0")
    lhs = eval_f(f, float(a @ v))
    rhs = float(sum(ai * eval_f(f, float(vi)) for ai, vi in zip(a, v)))
    return lhs >= rhs - tol


def _split_probabilities(q: np.ndarray) -> np.ndarray:
    """Conditional probabilities for sequential binomial splitting of a multinomial."""
    tail = 1.0 - np.concatenate([[0.0], np.cumsum(q)[:-1]])
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(tail > 0, q / tail, 0.0)
    return np.clip(cond, 0.0, 1.0)


def thin_split(rng: np.random.Generator, q, y) -> tuple[np.ndarray, np.ndarray]:
    """Thin counts along the last axis; returns ``(y_tilde, z)``.

    Each count ``Y_i`` is split multinomially: a share goes to output slot
    ``i + d`` with probability ``q_d`` and the rest is discarded into ``Z_i``.
    Shares that would land past the end of the block are discarded too, so
    ``y_tilde.sum() + z.sum() == y.sum()`` exactly.
    """
    qa = q.as_array() if isinstance(q, DominationCertificate) else np.asarray(q, dtype=float)
    if np.any(qa < -TOL_Q):
        raise CertificateError("thinning filter has negative taps")
    if qa.sum() > 1.0 + TOL_Q:
        raise CertificateError(f"thinning filter mass {qa.sum():g} exceeds one")
    qa = np.clip(qa, 0.0, None)
    y = np.asarray(y)
    if np.any(y < 0):
        raise DomainError("counts must be non-negative")
    n = y.shape[-1]
    remaining = y.astype(np.int64).copy()
    out = np.zeros_like(remaining)
    z = np.zeros_like(remaining)
    for d, prob in enumerate(_split_probabilities(qa)):
        share = rng.binomial(remaining, prob)
        remaining -= share
        if d < n:
            out[..., d:] += share[..., : n - d]
            z[..., n - d :] += share[..., n - d :]
        else:
            z += share
    z += remaining
    return out, z


def thin_receiver(rng: np.random.Generator, q, y) -> np.ndarray:
    """Receiver-side conversion of channel-``p`` outputs into channel-``p_tilde`` outputs."""
    return thin_split(rng, q, y)[0]


CONCAVE_FAMILIES = ("affine", "affine_capped", "sqrt_offset")


def random_concave_production(rng: np.random.Generator, families: Sequence[str] = CONCAVE_FAMILIES) -> ProductionFunction:
    family = families[int(rng.integers(len(families)))]
    if family == "affine":
        return ProductionFunction.affine(rng.uniform(0.1, 2.0))
    if family == "affine_capped":
        v = rng.uniform(0.1, 2.0)
        return ProductionFunction.affine_capped(v, v + rng.uniform(0.5, 10.0))
    if family == "sqrt_offset":
        return ProductionFunction.sqrt_offset(rng.uniform(0.25, 4.0))
    raise ValueError(f"no random sampler for family {family!r}")


def greedy_feasible_releases(f: ProductionFunction, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random release sequence that is feasible by construction.

    Each slot releases everything, nothing, or a uniform fraction of the
    current storage with probabilities 0.3 / 0.3 / 0.4.
    """
    x = np.zeros(n)
    s = 0.0
    for i in range(n):
        u = rng.random()
        frac = 1.0 if u < 0.3 else 0.0 if u < 0.6 else rng.random()
        x[i] = frac * s
        s = eval_f(f, max(s - x[i], 0.0))
    return x


def random_filter(rng: np.random.Generator, max_len: int = 5) -> DominationCertificate:
    """Non-negative filter of random length with mass in (0, 1]; a quarter have mass exactly 1."""
    k = int(rng.integers(1, max_len + 1))
    w = rng.dirichlet(np.full(k, 0.7))
    mass = 1.0 if rng.random() < 0.25 else rng.uniform(0.05, 1.0)
    return DominationCertificate.from_filter(w * mass)


@dataclass(frozen=True)
class LemmaSuiteResult:
    trials: int
    violations: int
    invariant_failures: int
    max_deficit: float
    failing_trials: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "violations": self.violations,
            "invariant_failures": self.invariant_failures,
            "max_deficit": self.max_deficit,
            "failing_trials": list(self.failing_trials),
        }


def lemma_a1_suite(
    seed,
    trials: int = 1000,
    length: int = 50,
    families: Sequence[str] = CONCAVE_FAMILIES,
    max_filter_len: int = 5,
    production: ProductionFunction | None = None,
    require_concave: bool = True,
) -> LemmaSuiteResult:
    """Randomized check of precoding feasibility; trial ``k`` uses child stream ``k``."""
    from .rng import child_sequences

    violations = invariant_failures = 0
    worst = 0.0
    failing = []
    for k, ss in enumerate(child_sequences(seed, trials)):
        rng = np.random.default_rng(ss)
        f = production if production is not None else random_concave_production(rng, families)
        xt = greedy_feasible_releases(f, length, rng)
        q = random_filter(rng, max_filter_len)
        res = verify_lemma_a1(f, q, xt, require_concave=require_concave)
        worst = max(worst, float(res.max_deficit))
        if not res.feasible:
            violations += 1
            failing.append(k)
        if not res.invariant_ok:
            invariant_failures += 1
    return LemmaSuiteResult(trials, violations, invariant_failures, worst, tuple(failing))
