"""Production-constrained transmitter: recharge map, storage dynamics, feasibility.

The transmitter holds ``s`` moles, releases ``x <= s`` and then recharges to
``f(s - x)``.  Starting empty, idling drives the storage towards the saturation
level ``phi = lim f^i(0)``, which may be infinite.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, InfeasibleReleaseError, ModelError, PreconditionError

logger = logging.getLogger(__name__)

INFINITE = math.inf
"""Sentinel for an unbounded saturation level (``phi = inf``)."""

DIVERGENCE_THRESHOLD = 1e9
TOL_FEAS = 1e-9

FAMILIES = ("affine", "affine_capped", "sqrt_offset", "piecewise_linear")
_PARAM_KEYS = {
    "affine": {"v"},
    "affine_capped": {"v", "cap"},
    "sqrt_offset": {"c"},
    "piecewise_linear": {"knots"},
}


@dataclass(frozen=True, eq=False)
class ProductionFunction:
    """Recharge map ``f`` from post-release storage to next-slot storage.

    Families and their parameters:

    * ``affine``: ``f(s) = s + v``
    * ``affine_capped``: ``f(s) = min(s + v, cap)``
    * ``sqrt_offset``: ``f(s) = sqrt(s + c)``
    * ``piecewise_linear``: linear interpolation through ``knots`` (pairs
      ``(s_k, f_k)`` with ``s_0 = 0``), continued past the last knot with the
      slope of the last segment.
    """

    family: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown production family {self.family!r}")
        keys = set(self.params)
        if keys != _PARAM_KEYS[self.family]:
            raise ValueError(
                f"{self.family} expects params {sorted(_PARAM_KEYS[self.family])}, got {sorted(keys)}"
            )
        if self.family == "piecewise_linear":
            knots = tuple((float(s), float(v)) for s, v in self.params["knots"])
            if len(knots) < 2:
                raise ValueError("piecewise_linear needs at least two knots")
            s_k = np.array([k[0] for k in knots])
            f_k = np.array([k[1] for k in knots])
            if s_k[0] != 0.0:
                raise ValueError("first knot must sit at s = 0")
            if np.any(np.diff(s_k) <= 0):
                raise ValueError("knot abscissae must be strictly increasing")
            if np.any(np.diff(f_k) < 0) or f_k[0] < 0:
                raise ValueError("knot values must be non-negative and non-decreasing")
            object.__setattr__(self, "params", {"knots": knots})
        else:
            clean = {}
            for k, v in self.params.items():
                v = float(v)
                if not math.isfinite(v) or v < 0:
                    raise ValueError(f"parameter {k} must be a finite non-negative real")
                clean[k] = v
            object.__setattr__(self, "params", clean)

    # constructors -----------------------------------------------------------

    @classmethod
    def affine(cls, v: float) -> ProductionFunction:
        return cls("affine", {"v": v})

    @classmethod
    def affine_capped(cls, v: float, cap: float) -> ProductionFunction:
        return cls("affine_capped", {"v": v, "cap": cap})

    @classmethod
    def sqrt_offset(cls, c: float) -> ProductionFunction:
        return cls("sqrt_offset", {"c": c})

    @classmethod
    def piecewise_linear(cls, knots: Sequence[Sequence[float]]) -> ProductionFunction:
        return cls("piecewise_linear", {"knots": knots})

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        if self.family == "piecewise_linear":
            return {"family": self.family, "params": {"knots": [list(k) for k in self.params["knots"]]}}
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ProductionFunction:
        return cls(d["family"], dict(d["params"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProductionFunction):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(repr(self.to_dict()))

    # evaluation -------------------------------------------------------------

    @cached_property
    def _knot_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        knots = self.params["knots"]
        return np.array([k[0] for k in knots]), np.array([k[1] for k in knots])

    def raw(self, s):
        """Evaluate the family formula with no domain clamping (vectorized)."""
        s = np.asarray(s, dtype=float)
        p = self.params
        if self.family == "affine":
            out = s + p["v"]
        elif self.family == "affine_capped":
            out = np.minimum(s + p["v"], p["cap"])
        elif self.family == "sqrt_offset":
            out = np.sqrt(s + p["c"])
        else:
            s_k, f_k = self._knot_arrays
            slope = (f_k[-1] - f_k[-2]) / (s_k[-1] - s_k[-2])
            out = np.where(s <= s_k[-1], np.interp(s, s_k, f_k), f_k[-1] + slope * (s - s_k[-1]))
        return out if out.ndim else float(out)

    @cached_property
    def phi(self) -> float:
        return compute_phi(self)

    def __call__(self, s):
        """Vectorized ``f`` with inputs clamped to ``[0, phi]``."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise DomainError("storage level must be non-negative")
        if math.isfinite(self.phi):
            s = np.minimum(s, self.phi)
        return self.raw(s)


def eval_f(f: ProductionFunction, s: float) -> float:
    """Return ``f(s)``; inputs above the saturation level are clamped to it."""
    if s < 0 or math.isnan(s):
        raise DomainError(f"f is defined on [0, phi]; got s={s}")
    phi = f.phi
    if s > phi:
        if s > phi * (1 + 1e-12) + 1e-12:
            logger.warning("eval_f: s=%g exceeds phi=%g; clamping", s, phi)
        s = phi
    return float(f.raw(s))


def compute_phi(f: ProductionFunction, tol: float = 1e-12, max_iter: int = 10**6) -> float:
    """Saturation level ``lim_i f^i(0)``, or ``INFINITE`` when the iterates diverge.

    Affine families are resolved in closed form and piecewise-linear maps by
    their first crossing of the diagonal.  Other families are iterated from zero.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = f.params
    if f.family == "affine":
        return INFINITE if p["v"] > 0 else 0.0
    if f.family == "affine_capped":
        return p["cap"] if p["v"] > 0 else 0.0

    if f.family == "piecewise_linear":
        return _pwl_phi(f)

    s = 0.0
    for _ in range(max_iter):
        nxt = f.raw(s)
        if nxt < s - tol:
            raise ModelError(f"f({s:g}) = {nxt:g} < {s:g}: production must be non-negative")
        if nxt > DIVERGENCE_THRESHOLD:
            return INFINITE
        if abs(nxt - s) <= tol:
            return float(nxt)
        s = float(nxt)
    raise ModelError(f"f-iterates did not settle within {max_iter} steps (last {s:g})")


def _pwl_phi(f: ProductionFunction) -> float:
    # iterates of a non-decreasing map from 0 climb to its smallest fixed point
    s_k, f_k = f._knot_arrays
    g = f_k - s_k
    if g[0] <= 0:
        return 0.0
    hit = np.flatnonzero(g <= 0)
    if hit.size:
        j = int(hit[0])
        return float(s_k[j - 1] + g[j - 1] / (g[j - 1] - g[j]) * (s_k[j] - s_k[j - 1]))
    slope = (f_k[-1] - f_k[-2]) / (s_k[-1] - s_k[-2])
    if slope >= 1.0:
        return INFINITE
    return float(s_k[-1] + g[-1] / (1.0 - slope))


def delta_u(
    f: ProductionFunction,
    phi: float | None = None,
    grid_size: int = 10**4,
    s_max: float | None = None,
) -> float:
    """Largest per-slot production ``sup_{s in [0, phi]} f(s) - s``."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    phi = f.phi if phi is None else phi
    p = f.params
    if f.family == "affine":
        return p["v"]
    if f.family == "affine_capped":
        return min(p["v"], p["cap"]) if p["v"] > 0 else 0.0
    if math.isfinite(phi):
        horizon = phi
    elif s_max is not None:
        horizon = float(s_max)
    else:
        raise PreconditionError("phi is infinite: pass a finite search horizon s_max")
    if horizon == 0:
        return float(f.raw(0.0))

    grid = np.linspace(0.0, horizon, grid_size)
    prod = f.raw(grid) - grid
    k = int(np.argmax(prod))
    best = float(prod[k])
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid_size - 1)]
    res = minimize_scalar(
        lambda s: -(f.raw(s) - s), bounds=(lo, hi), method="bounded", options={"xatol": 1e-10}
    )
    return max(best, float(-res.fun))


def delta_l(f: ProductionFunction, s_probe: float = 1e3, window: int = 20) -> float:
    """Tail production ``liminf_{s -> inf} f(s) - s`` on a geometric probe grid."""
    # the affine map is defined on all of [0, inf) even when v = 0 pins phi at 0
    if f.family == "affine":
        return f.params["v"]
    if math.isfinite(f.phi):
        raise PreconditionError("delta_l needs phi = infinite")
    probes = s_probe * 2.0 ** np.arange(window + 1)
    return float(np.min(f.raw(probes) - probes))


def step_state(f: ProductionFunction, s: float, x: float) -> float:
    """One slot: release ``x`` from storage ``s`` and recharge, ``f(s - x)``."""
    if x < 0:
        raise DomainError("release must be non-negative")
    if x > s + TOL_FEAS:
        raise InfeasibleReleaseError(f"release {x:g} exceeds storage {s:g}")
    return eval_f(f, max(s - x, 0.0))


@dataclass(frozen=True)
class FeasibilityTrace:
    ok: bool
    s_trace: tuple[float, ...]
    first_violation: int | None = None


def check_feasible(f: ProductionFunction, x: Sequence[float], tol: float = TOL_FEAS) -> FeasibilityTrace:
    """Simulate ``S_0 = 0, S_{i+1} = f(S_i - X_i)`` and flag the first overdraw.

    ``s_trace[i]`` is the storage at the start of slot ``i``.  On a violation
    the trace stops at the offending slot.
    """
    s = 0.0
    trace = []
    for i, xi in enumerate(x):
        xi = float(xi)
        trace.append(s)
        if xi < 0 or xi > s + tol:
            return FeasibilityTrace(False, tuple(trace), i)
        s = eval_f(f, max(s - xi, 0.0))
    return FeasibilityTrace(True, tuple(trace), None)


def idle_trace(f: ProductionFunction, n: int) -> np.ndarray:
    """Storage levels ``f^i(0)`` for ``i = 0..n-1`` (no releases)."""
    out = np.empty(n)
    s = 0.0
    for i in range(n):
        out[i] = s
        s = eval_f(f, s)
    return out


def is_concave(f: ProductionFunction, grid_size: int = 1000) -> bool:
    if grid_size < 3:
        raise ValueError("grid_size must be >= 3")
    if f.family != "piecewise_linear":
        return True
    s_k, f_k = f._knot_arrays
    slopes = np.diff(f_k) / np.diff(s_k)
    return bool(np.all(np.diff(slopes) <= 1e-12 * np.maximum(1.0, np.abs(slopes[:-1]))))
