"""Monte-Carlo harness: on/off codebooks, ML decoding, equivalence tests, chain checks.

Trials are split into fixed-size chunks; chunk ``k`` always draws from child
stream ``k`` of the root seed and results are reduced in chunk order, so a run
is reproducible regardless of the number of worker threads.
"""

from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from . import rng as rngmod
from .capacity import ReleasePolicy, _restrict_policy, _snap_down, policy_transition_matrix, stationary_law
from .channel import convolve_mean, log_pmf
from .errors import ConstructionError, InfeasibleReleaseError, NonErgodicError, PreconditionError
from .isi import precode_transmitter, solve_domination, thin_receiver
from .transmitter import TOL_FEAS, ProductionFunction, check_feasible, eval_f, is_concave

DEFAULT_CHUNK = 10_000
ALPHA = 0.01
MIN_EXPECTED = 5.0


@dataclass(frozen=True, eq=False)
class Codebook:
    """``codewords[m]`` is the full release sequence for message ``m``, idle prefix included."""

    codewords: np.ndarray
    warmup: int = 0
    level: float | None = None

    def __post_init__(self) -> None:
        cw = np.atleast_2d(np.asarray(self.codewords, dtype=float))
        if np.any(cw < 0):
            raise ValueError("codewords must be non-negative")
        object.__setattr__(self, "codewords", cw)

    @classmethod
    def from_codewords(cls, codewords: Sequence[Sequence[float]], warmup: int = 0) -> Codebook:
        return cls(np.asarray(codewords, dtype=float), warmup)

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def length(self) -> int:
        return self.codewords.shape[1]

    @property
    def rate(self) -> float:
        """Raw rate ``ln M / n`` in nats per use, idle prefix counted."""
        return math.log(self.size) / self.length

    @property
    def asymptotic_rate(self) -> float:
        """Rate with the one-off idle prefix left out of the denominator."""
        return math.log(self.size) / max(self.length - self.warmup, 1)

    def is_feasible(self, f: ProductionFunction) -> bool:
        return all(check_feasible(f, cw).ok for cw in self.codewords)

    def to_dict(self) -> dict:
        return {"codewords": self.codewords.tolist(), "warmup": self.warmup, "level": self.level}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _feasible_from(f: ProductionFunction, s: float, x: np.ndarray, tol: float = TOL_FEAS) -> bool:
    for xi in x:
        if xi > s + tol:
            return False
        s = eval_f(f, max(s - xi, 0.0))
    return True


def minimal_warmup(f: ProductionFunction, codewords: np.ndarray, max_warmup: int = 100_000) -> int:
    """Fewest idle slots after which every codeword is feasible.

    Idling only raises the storage (``f`` is non-decreasing), so feasibility is
    monotone in the prefix length and a doubling + bisection search applies.
    """
    idle = [0.0]

    def level(w: int) -> float:
        while len(idle) <= w:
            idle.append(eval_f(f, idle[-1]))
        return idle[w]

    def ok(w: int) -> bool:
        s = level(w)
        return all(_feasible_from(f, s, cw) for cw in codewords)

    if ok(0):
        return 0
    hi = 1
    while not ok(hi):
        saturated = math.isfinite(f.phi) and level(hi) >= f.phi - 1e-12 * max(1.0, f.phi)
        if saturated or hi >= max_warmup:
            raise ConstructionError(
                f"codewords stay infeasible after {hi} idle slots (storage {level(hi):g})"
            )
        hi = min(2 * hi, max_warmup)
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def build_onoff_codebook(
    f: ProductionFunction, n: int, M: int, level: float, seed, p_on: float = 0.5
) -> Codebook:
    """``M`` random words over ``{0, level}`` of length ``n``, made feasible by an idle prefix."""
    if n < 1 or M < 1:
        raise ValueError("need n >= 1 and M >= 1")
    if level < 0:
        raise ValueError("level must be non-negative")
    if level > f.phi + TOL_FEAS:
        raise ConstructionError(f"level {level:g} exceeds the saturation level {f.phi:g}")
    gen = rngmod.generator(seed)
    bits = gen.random((M, n)) < p_on
    words = level * bits.astype(float)
    w = minimal_warmup(f, words)
    full = np.concatenate([np.zeros((M, w)), words], axis=1)
    return Codebook(full, w, float(level))


def _log_means(p, codebook: Codebook) -> np.ndarray:
    lam = convolve_mean(p, codebook.codewords)
    with np.errstate(divide="ignore"):
        logl = np.log(lam)
    # -1e300 stands in for log 0: zero counts contribute 0, positive counts sink the score
    return lam, np.where(np.isfinite(logl), logl, -1e300)


def ml_decode(p, codebook: Codebook, y) -> int | np.ndarray:
    """Maximum-likelihood message index (0-based; ties go to the smallest index).

    ``y`` may be a single output sequence or a batch with one sequence per row.
    """
    lam, logl = _log_means(p, codebook)
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    yb = np.atleast_2d(y)
    with np.errstate(over="ignore"):
        score = yb @ logl.T - lam.sum(axis=1)[None, :]
    idx = np.argmax(score, axis=1)
    return int(idx[0]) if single else idx


def log_likelihoods(p, codebook: Codebook, y) -> np.ndarray:
    """Exact per-codeword log-likelihoods of a single output sequence."""
    lam = convolve_mean(p, codebook.codewords)
    return np.asarray(log_pmf(np.asarray(y)[None, :], lam), dtype=float).sum(axis=1)


def wilson_interval(errors: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(errors, trials).proportion_ci(level, method="wilson")
    return float(ci.low), float(ci.high)


def _run_chunks(n_trials: int, chunk_size: int, seed, work: Callable, workers: int) -> list:
    bounds = rngmod.chunk_bounds(n_trials, chunk_size)
    seeds = rngmod.child_sequences(seed, len(bounds))
    jobs = [(b - a, s) for (a, b), s in zip(bounds, seeds)]
    if workers <= 1:
        return [work(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: work(*j), jobs))


@dataclass
class ErrorRateResult:
    trials: int
    errors: int
    error_rate: float
    ci95_low: float
    ci95_high: float
    chunk_errors: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _require_feasible(f: ProductionFunction, codewords: np.ndarray, what: str) -> None:
    for m, cw in enumerate(codewords):
        tr = check_feasible(f, cw)
        if not tr.ok:
            raise InfeasibleReleaseError(f"{what} {m} overdraws storage at slot {tr.first_violation}")


def error_rate(
    f: ProductionFunction,
    p,
    codebook: Codebook,
    trials: int,
    seed,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> ErrorRateResult:
    """Monte-Carlo block error rate of ML decoding with uniform messages."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    _require_feasible(f, codebook.codewords, "codeword")
    lam = convolve_mean(p, codebook.codewords)
    M = codebook.size

    def work(n: int, ss) -> int:
        gen = np.random.default_rng(ss)
        msg = gen.integers(0, M, n)
        y = gen.poisson(lam[msg])
        return int(np.sum(ml_decode(p, codebook, y) != msg))

    chunks = _run_chunks(trials, chunk_size, seed, work, workers)
    errors = int(sum(chunks))
    lo, hi = wilson_interval(errors, trials)
    return ErrorRateResult(trials, errors, errors / trials, lo, hi, chunks)


def _histograms(y: np.ndarray) -> list[np.ndarray]:
    return [np.bincount(col) for col in y.T]


def _add_hist(acc: list[np.ndarray] | None, new: list[np.ndarray]) -> list[np.ndarray]:
    if acc is None:
        return [h.copy() for h in new]
    out = []
    for a, b in zip(acc, new):
        k = max(len(a), len(b))
        out.append(np.pad(a, (0, k - len(a))) + np.pad(b, (0, k - len(b))))
    return out


def merged_table(h_a: np.ndarray, h_b: np.ndarray, min_expected: float = MIN_EXPECTED) -> np.ndarray:
    """2 x K contingency table with adjacent values pooled until every expected count >= ``min_expected``."""
    k = max(len(h_a), len(h_b))
    a = np.pad(h_a, (0, k - len(h_a))).astype(float)
    b = np.pad(h_b, (0, k - len(h_b))).astype(float)
    n_a, n_b = a.sum(), b.sum()
    total = n_a + n_b
    need = min_expected * total / min(n_a, n_b)
    cols = []
    cur_a = cur_b = 0.0
    for va, vb in zip(a, b):
        cur_a += va
        cur_b += vb
        if cur_a + cur_b >= need:
            cols.append((cur_a, cur_b))
            cur_a = cur_b = 0.0
    if cur_a + cur_b > 0:
        if cols:
            la, lb = cols.pop()
            cols.append((la + cur_a, lb + cur_b))
        else:
            cols.append((cur_a, cur_b))
    return np.array(cols).T


def chi2_slot_pvalue(h_a: np.ndarray, h_b: np.ndarray) -> float:
    table = merged_table(h_a, h_b)
    if table.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(table, correction=False).pvalue)


def two_proportion_test(k_a: int, k_b: int, n: int, level: float = 1 - ALPHA) -> tuple[float, float]:
    """Pooled two-sided z-test p-value and the unpooled interval half-width for ``p_a - p_b``."""
    pa, pb = k_a / n, k_b / n
    pooled = (k_a + k_b) / (2 * n)
    z_crit = stats.norm.ppf(0.5 + level / 2)
    half = z_crit * math.sqrt(pa * (1 - pa) / n + pb * (1 - pb) / n)
    if pooled in (0.0, 1.0):
        return 1.0, half
    z = (pa - pb) / math.sqrt(pooled * (1 - pooled) * 2 / n)
    return float(2 * stats.norm.sf(abs(z))), half


@dataclass
class EquivalenceResult:
    mode: str
    trials: int
    errors: int
    errors_ref: int
    error_rate: float
    error_rate_ref: float
    ci95_low: float
    ci95_high: float
    chi2_pvalue: float
    chi2_min_slot_pvalue: float
    ztest_pvalue: float
    diff_halfwidth99: float
    verdict: str
    certificate: dict
    chunk_errors: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chunk_errors"] = [list(c) for c in self.chunk_errors]
        return d


def precoded_equivalence_test(
    f: ProductionFunction,
    p,
    p_tilde,
    codebook: Codebook,
    trials: int,
    seed,
    mode: str = "precode",
    paired: bool = False,
    alpha: float = ALPHA,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> EquivalenceResult:
    """Compare a codebook on channel ``p_tilde`` with its adapted use on channel ``p``.

    Reference arm: codeword ``x_tilde`` sent straight through ``p_tilde``.
    Test arm, ``mode="precode"``: ``q * x_tilde`` sent through ``p``.
    Test arm, ``mode="thin"``: ``x_tilde`` sent through ``p`` and the counts thinned by ``q``.
    Both arms decode under the ``p_tilde`` likelihood.  With ``paired=True``
    the arms share message and channel streams; otherwise they are independent.
    """
    if mode not in ("precode", "thin"):
        raise ValueError("mode must be 'precode' or 'thin'")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cert = solve_domination(p, p_tilde)
    if cert is None:
        raise PreconditionError("p_tilde is not dominated by p")
    _require_feasible(f, codebook.codewords, "codeword")
    lam_ref = convolve_mean(p_tilde, codebook.codewords)
    if mode == "precode":
        if not is_concave(f):
            raise PreconditionError("precoding needs a concave production function")
        sent = precode_transmitter(cert, codebook.codewords)
        _require_feasible(f, sent, "precoded codeword")
    else:
        sent = codebook.codewords
    lam_test = convolve_mean(p, sent)
    M = codebook.size

    def work(n: int, ss):
        ref_ss, test_ss, thin_ss = rngmod.child_sequences(ss, 3)
        g_ref = np.random.default_rng(ref_ss)
        g_test = np.random.default_rng(ref_ss if paired else test_ss)
        msg_a = g_ref.integers(0, M, n)
        y_a = g_ref.poisson(lam_ref[msg_a])
        msg_b = g_test.integers(0, M, n)
        y_b = g_test.poisson(lam_test[msg_b])
        if mode == "thin":
            y_b = thin_receiver(np.random.default_rng(thin_ss), cert, y_b)
        err_a = int(np.sum(ml_decode(p_tilde, codebook, y_a) != msg_a))
        err_b = int(np.sum(ml_decode(p_tilde, codebook, y_b) != msg_b))
        return err_a, err_b, _histograms(y_a), _histograms(y_b)

    chunks = _run_chunks(trials, chunk_size, seed, work, workers)
    hist_a = hist_b = None
    for _, _, ha, hb in chunks:
        hist_a = _add_hist(hist_a, ha)
        hist_b = _add_hist(hist_b, hb)
    k_a = sum(c[0] for c in chunks)
    k_b = sum(c[1] for c in chunks)
    pvals = [chi2_slot_pvalue(a, b) for a, b in zip(hist_a, hist_b)]
    chi2_p = min(1.0, len(pvals) * min(pvals))
    z_p, half = two_proportion_test(k_a, k_b, trials)
    lo, hi = wilson_interval(k_b, trials)
    passed = chi2_p > alpha and abs(k_a - k_b) / trials <= half
    return EquivalenceResult(
        mode, trials, k_b, k_a, k_b / trials, k_a / trials, lo, hi, chi2_p, min(pvals), z_p, half,
        "pass" if passed else "fail", cert.to_dict(), [(c[0], c[1]) for c in chunks],
    )


def simulate_policy_chain(
    f: ProductionFunction, policy: ReleasePolicy, n: int, seed
) -> tuple[ReleasePolicy, np.ndarray, np.ndarray]:
    """Run the snapped storage chain for ``n`` slots from the state ``f(0)``.

    Returns the (restricted) policy, the state indices and the release-fraction indices.
    """
    policy = _restrict_policy(f, policy, [])
    grid = policy.state_grid
    fr = policy.release_fractions
    nxt = np.empty((len(grid), len(fr)), dtype=np.int64)
    for i, s in enumerate(grid):
        nxt[i] = _snap_down(grid, np.array([eval_f(f, max(s - a * s, 0.0)) for a in fr]))
    cdf = np.cumsum(policy.cond_pmf, axis=1).tolist()
    nxt_l = nxt.tolist()
    u = rngmod.generator(seed).random(n).tolist()
    states = np.empty(n, dtype=np.int64)
    acts = np.empty(n, dtype=np.int64)
    i = int(np.argmin(np.abs(grid - eval_f(f, 0.0))))
    last = len(fr) - 1
    for k in range(n):
        j = min(bisect_right(cdf[i], u[k]), last)
        states[k] = i
        acts[k] = j
        i = nxt_l[i][j]
    return policy, states, acts


@dataclass
class AmsTrace:
    checkpoints: list[int]
    tv: list[float]
    stationary: list[float]
    ergodic: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def ams_empirical_check(
    f: ProductionFunction,
    policy: ReleasePolicy,
    n: int,
    seed,
    n_checkpoints: int = 25,
    tol_tv: float = 1e-12,
) -> AmsTrace:
    """TV distance between Cesaro-averaged state occupancy and the stationary law."""
    if not math.isfinite(f.phi):
        raise PreconditionError("the occupancy check needs a finite saturation level")
    if n < 1:
        raise ValueError("n must be >= 1")
    policy, states, _ = simulate_policy_chain(f, policy, n, seed)
    P = policy_transition_matrix(f, policy)
    try:
        pi, _, _ = stationary_law(P, int(states[0]), tol_tv, 10**5)
        ergodic = True
    except NonErgodicError:
        # periodic chain: the Cesaro limit is still the solution of pi = pi P
        A = np.vstack([P.T - np.eye(len(P)), np.ones(len(P))])
        b = np.zeros(len(P) + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        ergodic = False
    checkpoints = sorted({int(round(v)) for v in np.logspace(0, math.log10(n), n_checkpoints)} | {n})
    onehot = np.zeros((n, len(pi)))
    onehot[np.arange(n), states] = 1.0
    running = np.cumsum(onehot, axis=0)
    tv = [0.5 * float(np.abs(running[c - 1] / c - pi).sum()) for c in checkpoints]
    return AmsTrace(checkpoints, tv, pi.tolist(), ergodic)


def _plugin_conditional_mi(states, acts, y) -> float:
    """Plug-in ``I(X;Y|S)`` from joint counts of (state, action, output)."""
    n = len(states)
    ymax = int(y.max()) + 1 if len(y) else 1
    na = int(acts.max()) + 1
    key = (states * na + acts) * ymax + y
    joint = np.unique(key, return_counts=True)
    sa = np.unique(states * na + acts, return_counts=True)
    sy = np.unique(states * ymax + y, return_counts=True)
    s_only = np.unique(states, return_counts=True)
    c_sa = dict(zip(sa[0].tolist(), sa[1].tolist()))
    c_sy = dict(zip(sy[0].tolist(), sy[1].tolist()))
    c_s = dict(zip(s_only[0].tolist(), s_only[1].tolist()))
    total = 0.0
    for k, c in zip(joint[0].tolist(), joint[1].tolist()):
        yy = k % ymax
        sa_key = k // ymax
        s = sa_key // na
        total += c * math.log(c * c_s[s] / (c_sa[sa_key] * c_sy[s * ymax + yy]))
    return total / n


def empirical_conditional_mi(
    f: ProductionFunction, policy: ReleasePolicy, p0: float, n: int, seed, batches: int = 50
) -> tuple[float, float]:
    """Long-run plug-in estimate of ``I(X;Y|S)`` and its batch-means standard error."""
    chain_ss, out_ss = rngmod.child_sequences(seed, 2)
    policy, states, acts = simulate_policy_chain(f, policy, n, chain_ss)
    x = policy.release_fractions[acts] * policy.state_grid[states]
    y = np.random.default_rng(out_ss).poisson(p0 * x)
    est = _plugin_conditional_mi(states, acts, y)
    parts = np.array_split(np.arange(n), batches)
    vals = np.array([_plugin_conditional_mi(states[b], acts[b], y[b]) for b in parts])
    return est, float(vals.std(ddof=1) / math.sqrt(batches))


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunRecord:
    """Reproducible record of one simulation run (chunk-level outcomes, no timings)."""

    config_hash: str
    seed: int
    kind: str
    summary: dict
    outcomes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(d["config_hash"], d["seed"], d["kind"], d["summary"], d["outcomes"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
