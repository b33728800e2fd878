"""Capacity bounds for the production-constrained Poisson channel.

All information quantities are in nats.  Peak- and mean-constrained
capacities are computed on uniform input grids, so every value is the
grid-restricted optimum (a lower bound on the continuous-support value).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from . import _solver
from .channel import log_transition_matrix
from .errors import ConvergenceError, DomainError, NonErgodicError, PreconditionError
from .transmitter import ProductionFunction, delta_l, delta_u, eval_f

logger = logging.getLogger(__name__)

BOUND_KINDS = ("peak", "avg", "thm1_lower", "thm1_upper", "thm2_lower", "thm3_lower")
DEFAULT_GRID = 256
DEFAULT_TOL = 1e-9
PINNED_MASS = 1e-6


@dataclass(frozen=True, eq=False)
class InputDistribution:
    support: np.ndarray
    pmf: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.support, dtype=float).ravel()
        p = np.asarray(self.pmf, dtype=float).ravel()
        if s.shape != p.shape or s.size == 0:
            raise ValueError("support and pmf must be non-empty and of equal length")
        if np.any(s < 0) or np.any(np.diff(s) <= 0):
            raise ValueError("support must be non-negative and strictly increasing")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be non-negative and sum to one")
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "pmf", p)

    @classmethod
    def point_mass(cls, x: float) -> InputDistribution:
        return cls(np.array([x]), np.array([1.0]))

    def mean(self) -> float:
        return float(self.support @ self.pmf)

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "pmf": self.pmf.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> InputDistribution:
        return cls(np.array(d["support"]), np.array(d["pmf"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InputDistribution):
            return NotImplemented
        return np.array_equal(self.support, other.support) and np.array_equal(self.pmf, other.pmf)


@dataclass(frozen=True, eq=False)
class ReleasePolicy:
    """Conditional release law: in state ``state_grid[i]`` release
    ``release_fractions[j] * state_grid[i]`` with probability ``cond_pmf[i, j]``."""

    state_grid: np.ndarray
    release_fractions: np.ndarray
    cond_pmf: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.state_grid, dtype=float).ravel()
        a = np.asarray(self.release_fractions, dtype=float).ravel()
        q = np.atleast_2d(np.asarray(self.cond_pmf, dtype=float))
        if s.size == 0 or np.any(s < 0) or np.any(np.diff(s) <= 0):
            raise ValueError("state grid must be non-negative and strictly increasing")
        if a.size == 0 or np.any(a < 0) or np.any(a > 1):
            raise ValueError("release fractions must lie in [0, 1]")
        if q.shape != (s.size, a.size):
            raise ValueError(f"cond_pmf must have shape {(s.size, a.size)}, got {q.shape}")
        if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("each cond_pmf row must be a probability vector")
        object.__setattr__(self, "state_grid", s)
        object.__setattr__(self, "release_fractions", a)
        object.__setattr__(self, "cond_pmf", q)

    @classmethod
    def full_release(cls, state_grid: Sequence[float]) -> ReleasePolicy:
        n = len(state_grid)
        return cls(np.asarray(state_grid), np.array([1.0]), np.ones((n, 1)))

    @classmethod
    def on_off(cls, state_grid: Sequence[float], p_release: float = 0.5) -> ReleasePolicy:
        """Release everything with probability ``p_release``, nothing otherwise."""
        n = len(state_grid)
        row = np.array([1.0 - p_release, p_release])
        return cls(np.asarray(state_grid), np.array([0.0, 1.0]), np.tile(row, (n, 1)))

    def to_dict(self) -> dict:
        return {
            "state_grid": self.state_grid.tolist(),
            "release_fractions": self.release_fractions.tolist(),
            "cond_pmf": self.cond_pmf.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ReleasePolicy:
        return cls(np.array(d["state_grid"]), np.array(d["release_fractions"]), np.array(d["cond_pmf"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReleasePolicy):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("state_grid", "release_fractions", "cond_pmf")
        )


def state_grid(f: ProductionFunction, n: int) -> np.ndarray:
    """Uniform storage grid on ``[f(0), phi]``."""
    phi = f.phi
    if not math.isfinite(phi):
        raise PreconditionError("a storage grid needs a finite saturation level")
    lo = eval_f(f, 0.0)
    if n == 1 or phi <= lo:
        return np.array([lo])
    return np.linspace(lo, phi, n)


@dataclass(eq=False)
class BoundReport:
    bound_kind: str
    value: float
    constraint_c: float
    iterations: int = 0
    final_gap: float = 0.0
    tol: float = DEFAULT_TOL
    distribution: InputDistribution | None = None
    policy: ReleasePolicy | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    runtime_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.bound_kind not in BOUND_KINDS:
            raise ValueError(f"unknown bound kind {self.bound_kind!r}")

    @property
    def value_bits(self) -> float:
        return self.value / math.log(2)

    def to_dict(self) -> dict:
        # runtime is left out so that reports are reproducible byte for byte
        return {
            "bound_kind": self.bound_kind,
            "value": self.value,
            "constraint_c": self.constraint_c,
            "iterations": self.iterations,
            "final_gap": self.final_gap,
            "tol": self.tol,
            "distribution": None if self.distribution is None else self.distribution.to_dict(),
            "policy": None if self.policy is None else self.policy.to_dict(),
            "diagnostics": self.diagnostics,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> BoundReport:
        return cls(
            bound_kind=d["bound_kind"],
            value=d["value"],
            constraint_c=d["constraint_c"],
            iterations=d["iterations"],
            final_gap=d["final_gap"],
            tol=d["tol"],
            distribution=None if d["distribution"] is None else InputDistribution.from_dict(d["distribution"]),
            policy=None if d["policy"] is None else ReleasePolicy.from_dict(d["policy"]),
            diagnostics=dict(d["diagnostics"]),
            warnings=list(d["warnings"]),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BoundReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _mi_from_points(xs: np.ndarray, pmf: np.ndarray, p0: float) -> float:
    keep = pmf > 0
    xs, pmf = np.asarray(xs, dtype=float)[keep], pmf[keep]
    if xs.size <= 1 or np.ptp(xs) == 0:
        return 0.0
    L = log_transition_matrix(xs, p0)
    F, _, _ = _solver._Problem(L, np.zeros(len(xs)), 0.0).full(pmf)
    return max(F, 0.0)


def exact_mi(dist: InputDistribution, p0: float) -> float:
    """``I(X;Y)`` for ``Y ~ Poisson(p0 X)``, outputs summed to the 1e-12 tail point."""
    if p0 <= 0:
        raise DomainError("p0 must be positive")
    return _mi_from_points(dist.support, dist.pmf, p0)


def _distribution(xs: np.ndarray, r: np.ndarray) -> InputDistribution:
    keep = r > 0
    pmf = r[keep] / r[keep].sum()
    return InputDistribution(xs[keep], pmf)


def _check_p0(p0: float) -> None:
    if not p0 > 0:
        raise DomainError("p0 must be positive")


def ba_peak(
    c: float, p0: float, grid_size: int = DEFAULT_GRID, tol: float = DEFAULT_TOL, kind: str = "peak"
) -> BoundReport:
    """Peak-constrained capacity: inputs on a uniform grid over ``[0, c]``."""
    if c < 0:
        raise DomainError("c must be non-negative")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    _check_p0(p0)
    diag = {"grid_size": grid_size, "grid_restricted": True, "p0": p0}
    if c == 0:
        return BoundReport(kind, 0.0, 0.0, 0, 0.0, tol, InputDistribution.point_mass(0.0), diagnostics=diag)
    xs = np.linspace(0.0, c, grid_size)
    res = _solver.solve(log_transition_matrix(xs, p0), np.zeros(grid_size), 0.0, tol)
    return BoundReport(
        kind, max(res.objective, 0.0), float(c), res.iterations, res.gap, tol,
        _distribution(xs, res.r), diagnostics=diag,
    )


def ba_avg(
    c: float,
    p0: float,
    x_max: float | None = None,
    grid_size: int = DEFAULT_GRID,
    tol: float = DEFAULT_TOL,
    tol_c: float | None = None,
    kind: str = "avg",
    max_root_iter: int = 200,
) -> BoundReport:
    """Mean-constrained capacity ``max I(X;Y)`` s.t. ``E[X] <= c`` on ``[0, x_max]``.

    The multiplier ``mu`` of the mean constraint is found by a safeguarded
    secant search.  The reported gap is a duality certificate: the best dual
    value ``max_r F_mu(r) + mu c`` seen minus the mutual information of the
    returned, mean-feasible distribution.
    """
    if c < 0:
        raise DomainError("c must be non-negative")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    _check_p0(p0)
    if x_max is None:
        x_max = max(20.0 * c, 10.0 / p0)
    if x_max < c:
        raise DomainError(f"x_max={x_max} must be at least c={c}")
    tol_c = 1e-6 * max(c, 1.0) if tol_c is None else tol_c
    diag: dict[str, Any] = {"grid_size": grid_size, "grid_restricted": True, "p0": p0, "x_max": float(x_max)}
    if c == 0:
        diag["mu"] = 0.0
        return BoundReport(kind, 0.0, 0.0, 0, 0.0, tol, InputDistribution.point_mass(0.0), diagnostics=diag)

    xs = np.linspace(0.0, x_max, grid_size)
    L = log_transition_matrix(xs, p0)
    iterations = 0
    cache: dict[float, _solver.SolverResult] = {}

    def run(mu: float) -> _solver.SolverResult:
        nonlocal iterations
        warm = cache[min(cache, key=lambda m: abs(m - mu))].r if cache else None
        res = _solver.solve(L, xs, mu, tol, r0=warm)
        iterations += res.iterations
        cache[mu] = res
        return res

    def mean(res):
        return float(res.r @ xs)

    res0 = run(0.0)
    if mean(res0) <= c + tol_c:
        r, mu = res0.r, 0.0
        solver_gap = res0.gap
    else:
        # bracket the multiplier: mean(lo) > c >= mean(hi)
        lo, r_lo = 0.0, res0
        hi = 1.0
        r_hi = run(hi)
        while mean(r_hi) > c:
            lo, r_lo = hi, r_hi
            hi *= 2.0
            if hi > 1e12:
                raise ConvergenceError("could not bracket the mean-constraint multiplier")
            r_hi = run(hi)
        def settled(m, res):
            dev = abs(mean(res) - c)
            return dev <= tol_c and m * dev <= 0.5 * tol

        last_side = 0
        accepted = None
        for _ in range(max_root_iter):
            if settled(hi, r_hi):
                accepted = (hi, r_hi)
            elif lo > 0 and settled(lo, r_lo):
                accepted = (lo, r_lo)
            if accepted is not None or hi - lo <= 1e-14 * hi:
                break
            m_lo, m_hi = mean(r_lo), mean(r_hi)
            if lo == 0.0:
                mu = 0.25 * hi
            elif m_hi <= 0.0 or last_side == 2 or last_side == -2:
                mu = math.sqrt(lo * hi)
            else:
                # secant on log(mean) against log(mu); the mean decays roughly like a power of mu
                u_lo, u_hi = math.log(lo), math.log(hi)
                y_lo, y_hi = math.log(m_lo), math.log(m_hi)
                mu = math.exp(u_lo + (math.log(c) - y_lo) * (u_hi - u_lo) / (y_hi - y_lo))
                if not (lo < mu < hi):
                    mu = math.sqrt(lo * hi)
            res = run(mu)
            if mean(res) > c:
                lo, r_lo = mu, res
                last_side = -2 if last_side == -1 else -1
            else:
                hi, r_hi = mu, res
                last_side = 2 if last_side == 1 else 1
        if accepted is not None:
            mu, r = accepted[0], accepted[1].r
            solver_gap = accepted[1].gap
        else:
            # the optimal mean jumps across c: mix the two bracketing optima
            mu = hi
            m_lo, m_hi = mean(r_lo), mean(r_hi)
            theta = (c - m_hi) / (m_lo - m_hi)
            r = theta * r_lo.r + (1.0 - theta) * r_hi.r
            diag["mixed"] = True
            solver_gap = max(r_lo.gap, r_hi.gap)

    value = _mi_from_points(xs, r, p0)
    upper = min(res.upper + m * c for m, res in cache.items())
    gap = max(upper - value, solver_gap)
    diag["mu"] = float(mu)
    diag["mean"] = float(r @ xs)
    diag["dual_upper"] = float(upper)
    report = BoundReport(kind, value, float(c), iterations, gap, tol, _distribution(xs, r), diagnostics=diag)
    if r[-1] > PINNED_MASS:
        msg = f"mass {r[-1]:.2e} pinned at x_max={x_max:g}; the grid truncation may bias R_c low"
        report.warnings.append(msg)
        logger.warning(msg)
    if gap > tol:
        raise ConvergenceError(f"mean-constrained solve ended with certificate gap {gap:.3e}", last_gap=gap)
    return report


def thm1_bounds(
    f: ProductionFunction,
    p0: float,
    grid_size: int = DEFAULT_GRID,
    tol: float = DEFAULT_TOL,
    x_max: float | None = None,
    s_max: float | None = None,
) -> tuple[BoundReport, BoundReport]:
    """Sandwich ``peak(Delta_u) <= C <= avg(Delta_u)``."""
    du = delta_u(f, s_max=s_max)
    lower = ba_peak(du, p0, grid_size, tol, kind="thm1_lower")
    upper = ba_avg(du, p0, x_max, grid_size, tol, kind="thm1_upper")
    for rep in (lower, upper):
        rep.diagnostics["delta_u"] = du
    return lower, upper


def thm2_bound(
    f: ProductionFunction,
    p0: float,
    grid_size: int = DEFAULT_GRID,
    tol: float = DEFAULT_TOL,
    x_max: float | None = None,
    s_probe: float = 1e3,
    window: int = 20,
) -> BoundReport:
    """Lower bound ``avg(Delta_l)``, valid when the storage is unbounded."""
    dl = delta_l(f, s_probe, window)
    rep = ba_avg(dl, p0, x_max, grid_size, tol, kind="thm2_lower")
    rep.diagnostics["delta_l"] = dl
    return rep


def _snap_down(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(grid, values + 1e-12 * np.maximum(1.0, np.abs(values)), side="right") - 1
    return np.clip(idx, 0, len(grid) - 1)


def _restrict_policy(f: ProductionFunction, policy: ReleasePolicy, warn: list[str]) -> ReleasePolicy:
    f0 = eval_f(f, 0.0)
    grid = policy.state_grid
    keep = grid >= f0 - 1e-12 * max(1.0, f0)
    if not keep.all():
        msg = f"dropped {int((~keep).sum())} state(s) below f(0)={f0:g}"
        warn.append(msg)
        logger.warning(msg)
        if not keep.any():
            raise PreconditionError("no policy state lies in [f(0), phi]")
        policy = ReleasePolicy(grid[keep], policy.release_fractions, policy.cond_pmf[keep])
    if policy.state_grid[0] > f0 + 1e-9 * max(1.0, f0):
        raise PreconditionError(f"state grid must contain f(0)={f0:g} as its smallest point")
    return policy


def policy_transition_matrix(f: ProductionFunction, policy: ReleasePolicy) -> np.ndarray:
    """Markov kernel of ``S' = f(S - X)`` with successor states snapped down onto the grid."""
    grid = policy.state_grid
    n = len(grid)
    P = np.zeros((n, n))
    for i, s in enumerate(grid):
        post = np.maximum(s - policy.release_fractions * s, 0.0)
        nxt = np.array([eval_f(f, v) for v in post])
        np.add.at(P[i], _snap_down(grid, nxt), policy.cond_pmf[i])
    return P


def stationary_law(P: np.ndarray, start: int, tol_tv: float, max_iter: int) -> tuple[np.ndarray, int, float]:
    """Power iteration from a point mass; returns (law, iterations, last TV step)."""
    pi = np.zeros(P.shape[0])
    pi[start] = 1.0
    tv = np.inf
    for it in range(1, max_iter + 1):
        nxt = pi @ P
        tv = 0.5 * float(np.abs(nxt - pi).sum())
        pi = nxt
        if tv < tol_tv:
            return pi, it, tv
    raise NonErgodicError(
        f"state marginals still move by {tv:.3e} in TV after {max_iter} steps", last_gap=tv
    )


def thm3_lower(
    f: ProductionFunction,
    policy: ReleasePolicy,
    p0: float,
    tol_tv: float = 1e-12,
    max_iter: int = 10**6,
) -> BoundReport:
    """``I(X;Y|S)`` under the stationary law of the policy-driven storage chain."""
    _check_p0(p0)
    if not math.isfinite(f.phi):
        raise PreconditionError("the policy bound needs a finite saturation level")
    warn: list[str] = []
    policy = _restrict_policy(f, policy, warn)
    grid = policy.state_grid
    P = policy_transition_matrix(f, policy)
    start = int(np.argmin(np.abs(grid - eval_f(f, 0.0))))
    pi, iters, tv = stationary_law(P, start, tol_tv, max_iter)
    per_state = np.array(
        [_mi_from_points(policy.release_fractions * s, policy.cond_pmf[i], p0) for i, s in enumerate(grid)]
    )
    value = max(float(pi @ per_state), 0.0)
    diag = {"p0": p0, "stationary": pi.tolist(), "per_state_mi": per_state.tolist()}
    return BoundReport(
        "thm3_lower", value, float(f.phi), iters, tv, tol_tv, policy=policy, diagnostics=diag, warnings=warn
    )
