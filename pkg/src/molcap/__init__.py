"""Capacity bounds and ISI adaptation for production-constrained molecular transmitters."""

from .capacity import (
    BoundReport,
    InputDistribution,
    ReleasePolicy,
    ba_avg,
    ba_peak,
    exact_mi,
    state_grid,
    thm1_bounds,
    thm2_bound,
    thm3_lower,
)
from .channel import ChannelProfile, convolve_mean, log_pmf, sample_outputs
from .isi import (
    DominationCertificate,
    memoryless_dominator,
    precode_transmitter,
    solve_domination,
    superadditivity_check,
    thin_receiver,
    verify_lemma_a1,
)
from .sim import (
    Codebook,
    RunRecord,
    ams_empirical_check,
    build_onoff_codebook,
    empirical_conditional_mi,
    error_rate,
    ml_decode,
    precoded_equivalence_test,
)
from .transmitter import (
    INFINITE,
    ProductionFunction,
    check_feasible,
    compute_phi,
    delta_l,
    delta_u,
    eval_f,
    is_concave,
    step_state,
)

__version__ = "0.1.0"
