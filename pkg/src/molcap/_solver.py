"""Cost-penalized channel capacity on a finite input grid.

For a channel matrix ``W[x, y]`` (given in the log domain), a per-letter cost
and a multiplier ``mu >= 0`` we maximize over input pmfs ``r``

    F(r) = I(r; W) - mu * sum_x r_x cost_x.

Both solvers return the duality-gap certificate ``max_x g_x - F(r)`` where
``g_x = D(W_x || q_r) - mu * cost_x``.  Because ``F`` is concave, ``max_x g_x``
upper-bounds the optimum, so the gap bounds the suboptimality of ``r``.

``blahut_arimoto`` is the classical multiplicative update.  ``column_generation``
keeps a small active support, solves the restricted problem with a projected
Newton method, and adds the letter with the largest ``g_x`` until the gap
closes; it reaches 1e-9 gaps in a fraction of the time plain BA needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError


@dataclass
class SolverResult:
    r: np.ndarray
    objective: float
    gap: float
    iterations: int
    history: list[float] = field(default_factory=list)

    @property
    def upper(self) -> float:
        return self.objective + self.gap


class _Problem:
    def __init__(self, logW: np.ndarray, cost: np.ndarray, mu: float):
        self.L = np.asarray(logW, dtype=float)
        self.W = np.exp(self.L)
        with np.errstate(invalid="ignore"):
            self.WL = np.where(self.W > 0, self.W * self.L, 0.0).sum(axis=1)
        self.a = self.WL - mu * np.asarray(cost, dtype=float)
        self.n = self.L.shape[0]

    def log_q(self, idx: np.ndarray, r: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return logsumexp(np.log(r)[:, None] + self.L[idx], axis=0)

    def g(self, lq: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
        W = self.W if idx is None else self.W[idx]
        a = self.a if idx is None else self.a[idx]
        with np.errstate(invalid="ignore"):
            t = np.where(W > 0, W * lq[None, :], 0.0)
        return a - t.sum(axis=1)

    def full(self, r: np.ndarray) -> tuple[float, float, np.ndarray]:
        idx = np.flatnonzero(r > 0)
        g = self.g(self.log_q(idx, r[idx]))
        F = float(r[idx] @ g[idx])
        return F, float(g.max() - F), g


def blahut_arimoto(
    logW: np.ndarray,
    cost: np.ndarray,
    mu: float = 0.0,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    r0: np.ndarray | None = None,
) -> SolverResult:
    """Classical BA with the cost penalty folded into the exponent.

    ``history`` records ``F`` after every update; it is non-decreasing.
    """
    prob = _Problem(logW, cost, mu)
    r = np.full(prob.n, 1.0 / prob.n) if r0 is None else np.asarray(r0, dtype=float).copy()
    history = []
    F, gap, g = prob.full(r)
    history.append(F)
    for it in range(1, max_iter + 1):
        if gap <= tol:
            return SolverResult(r, F, gap, it - 1, history)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r > 0, np.log(r) + g - g.max(), -np.inf)
        r = np.exp(w - logsumexp(w))
        F, gap, g = prob.full(r)
        history.append(F)
    raise ConvergenceError(f"Blahut-Arimoto stopped with gap {gap:.3e} > {tol:.1e}", last_gap=gap)


def _restricted_newton(prob: _Problem, S, rS, tol, max_iter=200):
    for _ in range(max_iter):
        lq = prob.log_q(S, rS)
        g = prob.g(lq, S)
        F = rS @ g
        if len(S) == 1 or g.max() - g.min() < tol * 1e-2:
            break
        fin = np.isfinite(lq)
        LS = prob.L[S][:, fin]
        H = -np.exp(LS[:, None, :] + LS[None, :, :] - lq[fin][None, None, :]).sum(axis=2)
        # KKT system on the simplex, symmetrically rescaled by sqrt(r)
        sr = np.sqrt(rS)
        m = len(S)
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = sr[:, None] * H * sr[None, :]
        K[:m, m] = sr
        K[m, :m] = sr
        rhs = np.concatenate([-sr * g, [0.0]])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        d = sr * sol[:m]
        neg = d < 0
        alpha = min(1.0, np.min(-rS[neg] / d[neg])) if neg.any() else 1.0
        slack = 1e-12 * max(1.0, abs(F))
        while True:
            rn = np.maximum(rS + alpha * d, 0.0)
            rn /= rn.sum()
            keep = rn > 0
            Fn = rn[keep] @ prob.g(prob.log_q(S[keep], rn[keep]), S[keep])
            if Fn >= F - slack or alpha < 1e-10:
                break
            alpha *= 0.5
        if not np.isfinite(Fn) or Fn < F - slack:
            # fall back to one BA step on the active set
            rn = rS * np.exp(g - g.max())
            rn /= rn.sum()
        keep = rn > 1e-300
        S = S[keep]
        rS = rn[keep] / rn[keep].sum()
    return S, rS


def column_generation(
    logW: np.ndarray,
    cost: np.ndarray,
    mu: float = 0.0,
    tol: float = 1e-9,
    max_outer: int = 300,
    r0: np.ndarray | None = None,
) -> SolverResult:
    """Active-set solver; ``r0`` optionally warm-starts the active letters and weights."""
    prob = _Problem(logW, cost, mu)
    n = prob.n
    if r0 is not None and np.any(r0 > 0):
        S = np.flatnonzero(r0 > 0)
        rS = r0[S] / r0[S].sum()
    else:
        S = np.array([0, n - 1]) if n > 1 else np.array([0])
        rS = np.full(len(S), 1.0 / len(S))
    stalls = 0
    gap = np.inf
    history = []
    for outer in range(1, max_outer + 1):
        S, rS = _restricted_newton(prob, S, rS, tol)
        g = prob.g(prob.log_q(S, rS))
        F = float(rS @ g[S])
        gap = float(g.max() - F)
        history.append(F)
        if gap <= tol:
            break
        j = int(np.argmax(g))
        if j in S:
            stalls += 1
            if stalls > 5:
                break
            continue
        S2 = np.append(S, j)

        def slope(t):
            r2 = np.append(rS * (1 - t), t)
            gg = prob.g(prob.log_q(S2, r2), S2)
            return gg[-1] - r2 @ gg

        # insertion weight: bisection on log t for the zero of dF/dt
        if slope(1.0) > 0:
            t = 1.0
        else:
            lo, hi = -745.0, 0.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if slope(np.exp(mid)) > 0:
                    lo = mid
                else:
                    hi = mid
            t = np.exp(lo)
        S = S2
        rS = np.append(rS * (1 - t), t)
    r = np.zeros(n)
    r[S] = rS
    return SolverResult(r, F, gap, outer, history)


def solve(
    logW: np.ndarray,
    cost: np.ndarray,
    mu: float = 0.0,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    r0: np.ndarray | None = None,
) -> SolverResult:
    """Column generation first, plain BA from its output if the gap is still open."""
    res = column_generation(logW, cost, mu, tol, r0=r0)
    if res.gap <= tol:
        return res
    ba = blahut_arimoto(logW, cost, mu, tol, max_iter=max_iter, r0=0.5 * res.r + 0.5 / len(res.r))
    ba.iterations += res.iterations
    return ba
