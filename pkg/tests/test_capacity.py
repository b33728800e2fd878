import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg, optimize, stats

from molcap import _solver
from molcap.capacity import (
    BoundReport,
    InputDistribution,
    ReleasePolicy,
    ba_avg,
    ba_peak,
    exact_mi,
    policy_transition_matrix,
    state_grid,
    thm1_bounds,
    thm2_bound,
    thm3_lower,
)
from molcap.errors import ConvergenceError, DomainError, NonErgodicError, PreconditionError
from molcap.transmitter import ProductionFunction

Y_MAX = 400


def poisson_matrix(xs, p0, y_max=Y_MAX):
    """Plain pmf table; rows sum to one up to the (negligible) tail past y_max."""
    y = np.arange(y_max + 1)
    return stats.poisson.pmf(y[None, :], p0 * np.asarray(xs, dtype=float)[:, None])


def brute_mi(xs, pmf, p0):
    """Double sum over (x, y) written independently of the package."""
    W = poisson_matrix(xs, p0)
    q = pmf @ W
    total = 0.0
    for i, px in enumerate(pmf):
        if px == 0:
            continue
        for y in range(W.shape[1]):
            w = W[i, y]
            if w > 0 and q[y] > 0:
                total += px * w * (math.log(w) - math.log(q[y]))
    return total


def best_onoff_mi(c, p0, iters=60):
    """Golden-section search over the on-probability of a {0, c} input."""
    g = (math.sqrt(5) - 1) / 2

    def mi(t):
        return brute_mi([0.0, c], np.array([1 - t, t]), p0)

    a, b = 0.0, 1.0
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, f2 = mi(x1), mi(x2)
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = mi(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = mi(x1)
    return max(f1, f2)


def project(v, xs, c):
    """Euclidean projection onto {r >= 0, sum r = 1, r @ xs <= c}."""

    def simplex(b):
        w = v - b * xs
        a = optimize.brentq(lambda a: np.maximum(w - a, 0).sum() - 1, w.min() - 1, w.max())
        return np.maximum(w - a, 0)

    r = simplex(0.0)
    if r @ xs <= c:
        return r
    hi = 1.0
    while simplex(hi) @ xs > c:
        hi *= 2
    b = optimize.brentq(lambda b: simplex(b) @ xs - c, 0.0, hi, xtol=1e-15)
    return simplex(b)


def pga_avg(c, p0, xs, max_iter=6000, check=200, stall=1e-9):
    """Accelerated projected-gradient ascent with backtracking and momentum restarts.

    Returns the best feasible value and a dual upper bound
    ``min_mu max_x D(W_x || q) - mu (x - c)`` evaluated at the final output law.
    """
    W = poisson_matrix(xs, p0, y_max=120)
    W /= W.sum(axis=1, keepdims=True)
    logW = np.log(np.where(W > 0, W, 1.0))

    def value_and_grad(r):
        q = np.maximum(r @ W, 1e-300)
        d = (W * (logW - np.log(q))).sum(axis=1)
        return float(r @ d), d

    r = project(np.full(len(xs), 1.0 / len(xs)), xs, c)
    fr, dr = value_and_grad(r)
    z, t, step, last = r.copy(), 1.0, 1.0, -np.inf
    for it in range(1, max_iter + 1):
        fz, gz = value_and_grad(z)
        while True:
            rn = project(z + step * gz, xs, c)
            fn, dn = value_and_grad(rn)
            diff = rn - z
            if fn >= fz + gz @ diff - diff @ diff / (2 * step):
                break
            step *= 0.5
        if fn < fr:
            z, t = r.copy(), 1.0
            continue
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = rn + (t - 1) / t_new * (rn - r)
        r, fr, dr, t = rn, fn, dn, t_new
        step *= 1.2
        if it % check == 0:
            if fr - last < stall:
                break
            last = fr
    upper = optimize.minimize_scalar(
        lambda m: np.max(dr - m * (xs - c)), bounds=(0, 10), method="bounded", options={"xatol": 1e-12}
    ).fun
    return fr, upper


def test_exact_mi_examples():
    assert exact_mi(InputDistribution.point_mass(3.0), 1.0) == 0.0


@pytest.mark.parametrize("c", [1e-2, 1e-3, 1e-4])
def test_exact_mi_vanishes_with_small_inputs(c):
    # only "no count" vs "some count" carries information: I ~ (c/2) ln 2 as c -> 0
    val = exact_mi(InputDistribution(np.array([0, c]), np.array([0.5, 0.5])), 1.0)
    assert val == pytest.approx(brute_mi([0.0, c], np.array([0.5, 0.5]), 1.0), abs=1e-12)
    assert val == pytest.approx(0.5 * c * math.log(2), rel=2 * c)


@pytest.mark.parametrize("c,p0", [(5.0, 1.0), (2.0, 0.5), (0.7, 3.0)])
def test_exact_mi_matches_double_sum(c, p0):
    dist = InputDistribution(np.array([0.0, c]), np.array([0.5, 0.5]))
    assert exact_mi(dist, p0) == pytest.approx(brute_mi([0.0, c], dist.pmf, p0), abs=1e-10)


def test_exact_mi_three_point_input():
    xs, pmf = np.array([0.0, 1.5, 4.0]), np.array([0.2, 0.3, 0.5])
    assert exact_mi(InputDistribution(xs, pmf), 1.3) == pytest.approx(brute_mi(xs, pmf, 1.3), abs=1e-10)


def test_ba_peak_examples():
    assert ba_peak(0.0, 1.0).value == 0.0
    rep = ba_peak(1.0, 1.0)
    assert rep.value >= best_onoff_mi(1.0, 1.0) - 1e-9
    assert rep.final_gap <= rep.tol
    assert rep.distribution.support.max() <= 1.0


def test_ba_peak_optimum_on_grid_is_two_point():
    # for small peak levels the optimal input uses only the endpoints
    rep = ba_peak(1.0, 1.0, grid_size=64)
    assert rep.value == pytest.approx(best_onoff_mi(1.0, 1.0), abs=1e-7)


def test_ba_avg_matches_projected_gradient():
    rep = ba_avg(1.0, 1.0, x_max=20.0)
    xs = np.linspace(0, 20, 256)
    lo, hi = pga_avg(1.0, 1.0, xs)
    assert rep.value >= lo - 1e-9
    assert rep.value - lo <= 1e-5
    assert rep.value <= hi + 1e-9
    assert rep.distribution.mean() <= 1.0 + 1e-6


def test_ba_avg_examples_and_errors():
    assert ba_avg(0.0, 1.0).value == 0.0
    with pytest.raises(DomainError):
        ba_avg(1.0, 0.0)
    with pytest.raises(DomainError):
        ba_avg(-1.0, 1.0)
    with pytest.raises(DomainError):
        ba_avg(5.0, 1.0, x_max=2.0)


def test_ba_avg_flags_truncation():
    rep = ba_avg(2.0, 1.0, x_max=3.0, grid_size=64)
    assert any("pinned" in w for w in rep.warnings)


def test_ba_avg_non_convergence_carries_gap():
    with pytest.raises(ConvergenceError) as info:
        ba_avg(1.0, 1.0, grid_size=64, max_root_iter=0)
    assert info.value.last_gap is not None and info.value.last_gap > 0


def test_peak_below_avg_and_monotone_in_c():
    cs = [0.5, 1.0, 2.0]
    peaks = [ba_peak(c, 1.0, grid_size=128).value for c in cs]
    avgs = [ba_avg(c, 1.0, grid_size=128).value for c in cs]
    assert all(p <= a + 1e-9 for p, a in zip(peaks, avgs))
    assert np.all(np.diff(peaks) >= -1e-12) and np.all(np.diff(avgs) >= -1e-12)


def test_blahut_arimoto_history_is_monotone():
    xs = np.linspace(0, 3, 40)
    from molcap.channel import log_transition_matrix

    res = _solver.blahut_arimoto(log_transition_matrix(xs, 1.0), xs, mu=0.3, tol=1e-5)
    assert np.all(np.diff(res.history) >= -1e-13)
    cg = _solver.column_generation(log_transition_matrix(xs, 1.0), xs, mu=0.3, tol=1e-10)
    assert res.objective <= cg.objective + 1e-12 <= res.upper + 1e-12


@settings(max_examples=40, deadline=None)
@given(
    W=st.lists(st.lists(st.floats(0.01, 1), min_size=4, max_size=4), min_size=2, max_size=5),
    mu=st.floats(0, 1),
)
def test_solvers_agree_on_random_channels(W, mu):
    W = np.array(W)
    W /= W.sum(axis=1, keepdims=True)
    cost = np.arange(len(W), dtype=float)
    L = np.log(W)
    ba = _solver.blahut_arimoto(L, cost, mu, tol=1e-10, max_iter=200_000)
    cg = _solver.solve(L, cost, mu, tol=1e-10)
    # each certificate bounds the other's objective
    assert cg.objective <= ba.upper + 1e-12
    assert ba.objective <= cg.upper + 1e-12
    assert abs(cg.objective - ba.objective) <= 1e-9
    assert abs(cg.r.sum() - 1) < 1e-12 and np.all(cg.r >= 0)


def test_thm1_examples():
    lower, upper = thm1_bounds(ProductionFunction.affine_capped(2, 10), 1.0)
    assert 0 <= lower.value <= upper.value
    assert lower.diagnostics["delta_u"] == 2
    zl, zu = thm1_bounds(ProductionFunction.affine(0), 1.0, s_max=1.0)
    assert zl.value == 0 and zu.value == 0
    al, au = thm1_bounds(ProductionFunction.affine(2), 1.0)
    assert al.value == lower.value and au.value == upper.value


def test_thm2_examples():
    f = ProductionFunction.affine(1.5)
    _, upper = thm1_bounds(f, 1.0)
    assert abs(thm2_bound(f, 1.0).value - upper.value) <= 2 * upper.tol
    assert thm2_bound(ProductionFunction.affine(0), 1.0).value == 0.0
    with pytest.raises(PreconditionError):
        thm2_bound(ProductionFunction.affine_capped(1, 5), 1.0)


def test_thm2_tail_production():
    s = np.concatenate([[0.0], np.geomspace(1e-2, 1e6, 300)])
    knots = np.column_stack([s, s + 1 + np.exp(-s)]).tolist()
    knots.append([knots[-1][0] + 1, knots[-1][1] + 1])
    rep = thm2_bound(ProductionFunction.piecewise_linear(knots), 1.0)
    assert rep.diagnostics["delta_l"] == pytest.approx(1.0, abs=1e-9)
    assert rep.value == pytest.approx(ba_avg(1.0, 1.0).value, abs=1e-6)


def onoff_policy(f, n=11):
    return ReleasePolicy.on_off(state_grid(f, n), 0.5)


def test_thm3_full_release_is_zero():
    f = ProductionFunction.affine_capped(1, 2)
    assert thm3_lower(f, ReleasePolicy.full_release(state_grid(f, 11)), 1.0).value == 0.0


def test_thm3_matches_eigenvector_oracle():
    f = ProductionFunction.affine_capped(1, 2)
    pol = onoff_policy(f)
    rep = thm3_lower(f, pol, 1.0)
    P = policy_transition_matrix(f, pol)
    pi = linalg.null_space(P.T - np.eye(len(P)))[:, 0]
    pi /= pi.sum()
    per_state = [brute_mi([0.0, s], np.array([0.5, 0.5]), 1.0) for s in pol.state_grid]
    assert rep.value == pytest.approx(float(pi @ per_state), abs=1e-10)
    np.testing.assert_allclose(rep.diagnostics["stationary"], pi, atol=1e-10)
    assert rep.final_gap < 1e-10


def test_thm3_below_thm1_upper():
    f = ProductionFunction.affine_capped(1, 2)
    _, upper = thm1_bounds(f, 1.0)
    for p in (0.2, 0.5, 0.8):
        assert thm3_lower(f, ReleasePolicy.on_off(state_grid(f, 21), p), 1.0).value <= upper.value + 1e-6


def test_thm3_transition_rows_are_stochastic():
    f = ProductionFunction.sqrt_offset(2)
    grid = state_grid(f, 30)
    pol = ReleasePolicy(grid, np.array([0.0, 0.5, 1.0]), np.tile([0.2, 0.3, 0.5], (30, 1)))
    P = policy_transition_matrix(f, pol)
    np.testing.assert_allclose(P.sum(axis=1), 1.0)
    assert thm3_lower(f, pol, 1.0).value > 0


def test_thm3_non_ergodic_policy():
    # never releasing from the top state and always releasing below it: period 2 oscillation
    f = ProductionFunction.affine_capped(1, 2)
    grid = np.array([1.0, 2.0])
    pol = ReleasePolicy(grid, np.array([0.0, 1.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(NonErgodicError):
        thm3_lower(f, pol, 1.0, max_iter=1000)


def test_thm3_preconditions():
    with pytest.raises(PreconditionError):
        thm3_lower(ProductionFunction.affine(1), ReleasePolicy.full_release([1.0, 2.0]), 1.0)
    f = ProductionFunction.affine_capped(1, 2)
    with pytest.raises(PreconditionError):
        thm3_lower(f, ReleasePolicy.full_release([1.5, 2.0]), 1.0)


def test_report_round_trip():
    rep = ba_peak(1.0, 1.0, grid_size=32)
    again = BoundReport.from_dict(rep.to_dict())
    assert again == rep
    pol = onoff_policy(ProductionFunction.affine_capped(1, 2))
    assert ReleasePolicy.from_dict(pol.to_dict()) == pol
