"""Sparse Bayesian state estimation for linear dynamical systems with
jointly sparse inputs and bursty missing observations, estimated by EM
(Kalman smoothing for the input variances, Viterbi decoding for the
missing-data mask), with convergence diagnostics and brute-force oracles.
"""
from .model import (
    Dataset,
    SimConfig,
    SystemModel,
    Theta,
    random_model,
    simulate,
    simulate_dataset,
    simulate_inputs,
    simulate_missing,
    validate_model,
    validate_theta,
)
from .likelihood import (
    StackedCovariance,
    build_dtilde,
    build_ry,
    grad_gamma,
    grad_gamma_fd,
    log_likelihood,
    log_likelihood_innovations,
)
from .em import (
    AscentViolationError,
    EMOptions,
    EMTrace,
    FilterResult,
    Posterior,
    em_iterate,
    emission_scores,
    estep_stats,
    kalman_filter,
    mstep_gamma,
    q_function,
    rts_smoother,
    run_em,
    viterbi,
)
from .diagnostics import (
    CheckRecord,
    DiagnosticsReport,
    check_coercive,
    check_gibbs_surrogate,
    check_map_closed,
    check_monotone,
    check_q_ascent,
    check_stationary,
    run_suite,
)
from .oracle import (
    ExhaustiveMLResult,
    OracleResult,
    batch_posterior,
    brute_force_gamma,
    brute_force_z,
    exhaustive_ml,
)

__version__ = "0.1.0"
