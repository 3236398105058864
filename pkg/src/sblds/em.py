"""EM iteration for the mixed continuous/discrete estimation problem.

One EM step computes the Gaussian posterior of the state path under the
current parameter (forward Kalman filter + backward RTS smoother), then
maximizes the expected complete-data log-density separately over the two
parameter halves: a closed-form average of posterior input second moments
for the variance vector, and Viterbi decoding of the mask against the
per-step emission scores plus the Markov prior.  Both halves consume the
same posterior, computed once per iteration.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .model import (
    GAMMA_FLOOR_DEFAULT,
    SystemModel,
    Theta,
    validate_model,
    validate_theta,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class AscentViolationError(RuntimeError):
    """The per-iteration log-likelihood dropped beyond tolerance.

    Monotone ascent is guaranteed by the EM construction, so a violation
    signals an implementation or numerical failure, not a property of the
    data.
    """


@dataclass
class FilterResult:
    """Forward-pass moments, one slot per time step (time-major arrays).

    pred_mean/pred_cov hold the one-step-ahead prior, filt_mean/filt_cov
    the posterior after the (possibly skipped) measurement update.  On
    steps with z_k = 0 the filtered entries equal the predicted ones and
    the gain is zero.  loglik_terms sum to the marginal log-likelihood.
    """

    pred_mean: np.ndarray   # (K, n)
    pred_cov: np.ndarray    # (K, n, n)
    filt_mean: np.ndarray   # (K, n)
    filt_cov: np.ndarray    # (K, n, n)
    gains: np.ndarray       # (K, n, m)
    loglik_terms: np.ndarray  # (K,)


@dataclass
class Posterior:
    """Smoothed state moments given all K observations.

    lag1[k] is the smoothed cross-covariance between the states at steps
    k and k-1; lag1[0] is zero because the initial state is deterministic.
    """

    mean: np.ndarray   # (K, n)
    cov: np.ndarray    # (K, n, n)
    lag1: np.ndarray   # (K, n, n)


@dataclass
class EStepStats:
    """Per-step posterior second moments needed by the M-step.

    second_moment[k] = E[x_k x_k'], cross_moment[k] = E[x_k x_{k-1}']
    (zero at k = 0), input_sq[k, i] = E[u_{k,i}^2] where u_k is the input
    implied by consecutive states.
    """

    second_moment: np.ndarray  # (K, n, n)
    cross_moment: np.ndarray   # (K, n, n)
    input_sq: np.ndarray       # (K, n)


@dataclass(frozen=True)
class EMOptions:
    max_iters: int = 1000
    tol_rel_L: float = 1e-10
    tol_gamma: float = 1e-8
    gamma_floor: float = GAMMA_FLOOR_DEFAULT
    record_Q: bool = False

    def validate(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol_rel_L <= 0 or self.tol_gamma <= 0:
            raise ValueError("tolerances must be positive")
        if self.gamma_floor < 0:
            raise ValueError("gamma_floor must be nonnegative")


@dataclass
class IterationRecord:
    """One completed EM iteration, evaluated at its starting parameter."""

    iteration: int
    L: float
    grad_inf_norm: float
    gamma_change: float
    z_hamming_change: int
    wall_ms: float
    Q_next: float | None = None
    Q_self: float | None = None


@dataclass
class EMTrace:
    records: list[IterationRecord] = field(default_factory=list)
    theta_final: Theta | None = None
    L_final: float = np.nan
    termination: str = ""

    @property
    def L_sequence(self) -> np.ndarray:
        """Objective values along the run, including the final parameter."""
        return np.array([rec.L for rec in self.records] + [self.L_final])


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def kalman_filter(model: SystemModel, Y: np.ndarray, theta: Theta) -> FilterResult:
    """Forward pass under (gamma, z): prior x_1 ~ N(0, diag gamma).

    Steps with z_k = 0 skip the measurement update entirely; their
    log-likelihood term is the pure-noise density of y_k, which is the
    exact predictive density there.
    """
    validate_model(model)
    validate_theta(model, theta)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (model.m, model.K):
        raise ValueError(f"Y: expected shape ({model.m}, {model.K}), got {Y.shape}")
    return _filter_impl(model, Y, theta)


def _filter_impl(model: SystemModel, Y: np.ndarray, theta: Theta) -> FilterResult:
    """Filter body without input validation (hot path for EM loops)."""
    n, m, K = model.n, model.m, model.K
    D, A, sigma2 = model.D, model.A, float(model.sigma2)
    Qproc = np.diag(np.asarray(theta.gamma, dtype=float))
    z = np.asarray(theta.z, dtype=np.int64)

    fr = FilterResult(
        pred_mean=np.zeros((K, n)),
        pred_cov=np.zeros((K, n, n)),
        filt_mean=np.zeros((K, n)),
        filt_cov=np.zeros((K, n, n)),
        gains=np.zeros((K, n, m)),
        loglik_terms=np.zeros(K),
    )
    x = np.zeros(n)
    P = Qproc.copy()
    eye_n = np.eye(n)
    sigma2_eye_m = sigma2 * np.eye(m)
    for k in range(K):
        if k > 0:
            x = D @ x
            P = _symmetrize(D @ P @ D.T + Qproc)
        fr.pred_mean[k] = x
        fr.pred_cov[k] = P
        y_k = Y[:, k]
        if z[k] == 1:
            S = A @ P @ A.T + sigma2_eye_m
            chol = np.linalg.cholesky(_symmetrize(S))
            innov = y_k - A @ x
            # One stacked solve covers the gain and the innovation quadratic.
            rhs = np.concatenate([A @ P, innov[:, None]], axis=1)
            half = solve_triangular(chol, rhs, lower=True, check_finite=False)
            full = solve_triangular(chol, half, lower=True, trans=1, check_finite=False)
            gain = full[:, :n].T                    # P A' S^{-1}
            x = x + gain @ innov
            IKA = eye_n - gain @ A
            P = _symmetrize(IKA @ P @ IKA.T + sigma2 * (gain @ gain.T))
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            quad = float(half[:, n] @ half[:, n])
            fr.loglik_terms[k] = -0.5 * (m * LOG_2PI + logdet + quad)
            fr.gains[k] = gain
        else:
            fr.loglik_terms[k] = -0.5 * (
                m * np.log(2.0 * np.pi * sigma2) + float(y_k @ y_k) / sigma2
            )
        fr.filt_mean[k] = x
        fr.filt_cov[k] = P
    return fr


def rts_smoother(model: SystemModel, fr: FilterResult) -> Posterior:
    """Backward pass: smoothed moments and lag-one cross-covariances.

    The cross-covariance between steps k and k-1 is the smoothed
    covariance at k times the transposed smoother gain at k-1, which is
    exact for this recursion.
    """
    K, n = fr.filt_mean.shape
    D = model.D
    mean = np.zeros((K, n))
    cov = np.zeros((K, n, n))
    gains = np.zeros((max(K - 1, 0), n, n))
    mean[K - 1] = fr.filt_mean[K - 1]
    cov[K - 1] = fr.filt_cov[K - 1]
    for k in range(K - 2, -1, -1):
        P_pred_next = fr.pred_cov[k + 1]
        # J = P_filt D' P_pred_next^{-1}; solve instead of inverting
        J = np.linalg.solve(P_pred_next, D @ fr.filt_cov[k]).T
        mean[k] = fr.filt_mean[k] + J @ (mean[k + 1] - fr.pred_mean[k + 1])
        cov[k] = _symmetrize(fr.filt_cov[k] + J @ (cov[k + 1] - P_pred_next) @ J.T)
        gains[k] = J
    lag1 = np.zeros((K, n, n))
    for k in range(1, K):
        lag1[k] = cov[k] @ gains[k - 1].T
    return Posterior(mean=mean, cov=cov, lag1=lag1)


def estep_stats(model: SystemModel, post: Posterior) -> EStepStats:
    """Posterior second moments of states and implied inputs.

    The initial state is deterministically zero, so the first input is
    the first state itself (cross moment zero at k = 0).
    """
    K, n = post.mean.shape
    D = model.D
    S = post.cov + np.einsum("ki,kj->kij", post.mean, post.mean)
    C = np.zeros((K, n, n))
    C[1:] = post.lag1[1:] + np.einsum("ki,kj->kij", post.mean[1:], post.mean[:-1])
    input_sq = np.zeros((K, n))
    input_sq[0] = np.diag(S[0])
    for k in range(1, K):
        M = S[k] - C[k] @ D.T - D @ C[k].T + D @ S[k - 1] @ D.T
        input_sq[k] = np.diag(M)
    # Tiny negatives are pure roundoff; the quantity is a diagonal of a PSD matrix.
    np.clip(input_sq, 0.0, None, out=input_sq)
    return EStepStats(second_moment=S, cross_moment=C, input_sq=input_sq)


def mstep_gamma(stats: EStepStats, gamma_floor: float = GAMMA_FLOOR_DEFAULT) -> np.ndarray:
    """Closed-form variance update: time-average of posterior input power."""
    return np.maximum(gamma_floor, stats.input_sq.mean(axis=0))


def emission_scores(model: SystemModel, Y: np.ndarray, post: Posterior) -> np.ndarray:
    """(K, 2) table of expected per-step observation log-densities.

    Column 1 scores "observed" (expectation of the Gaussian log-density
    of y_k around A x_k under the posterior), column 0 scores "missing"
    (pure-noise density of y_k).
    """
    Y = np.asarray(Y, dtype=float)
    m, sigma2 = model.m, float(model.sigma2)
    const = -0.5 * m * np.log(2.0 * np.pi * sigma2)
    ynorm2 = np.sum(Y * Y, axis=0)
    cross = np.sum(Y * (model.A @ post.mean.T), axis=0)
    AtA = model.A.T @ model.A
    S = post.cov + np.einsum("ki,kj->kij", post.mean, post.mean)
    trace_term = np.einsum("ij,kij->k", AtA, S)
    score0 = const - ynorm2 / (2.0 * sigma2)
    score1 = const - (ynorm2 - 2.0 * cross + trace_term) / (2.0 * sigma2)
    return np.column_stack([score0, score1])


def markov_log_prior(model: SystemModel, z: np.ndarray) -> float:
    """Log-probability of a mask sequence under the sticky chain."""
    z = np.asarray(z, dtype=np.int64)
    with np.errstate(divide="ignore"):
        log_init = np.log(np.array([1.0 - model.pi1, model.pi1]))
        log_trans = np.log(np.array([
            [model.p0, 1.0 - model.p0],
            [1.0 - model.p1, model.p1],
        ]))
    total = log_init[z[0]]
    for k in range(1, len(z)):
        total += log_trans[z[k - 1], z[k]]
    return float(total)


def viterbi(scores: np.ndarray, model: SystemModel) -> np.ndarray:
    """Maximize sum of per-step scores plus the Markov prior over masks.

    Dynamic programming over the two states; ties prefer z_k = 1 both at
    the final step and when choosing predecessors during backtracking.
    Degenerate transition probabilities (0 or 1) are handled through
    -inf branches, which are never selected when an alternative exists.
    """
    scores = np.asarray(scores, dtype=float)
    K = scores.shape[0]
    if scores.shape != (K, 2):
        raise ValueError(f"scores: expected shape (K, 2), got {scores.shape}")
    with np.errstate(divide="ignore"):
        log_init = np.log(np.array([1.0 - model.pi1, model.pi1]))
        log_trans = np.log(np.array([
            [model.p0, 1.0 - model.p0],
            [1.0 - model.p1, model.p1],
        ]))
    delta = log_init + scores[0]
    back = np.zeros((K, 2), dtype=np.int64)
    for k in range(1, K):
        new_delta = np.empty(2)
        for j in (0, 1):
            cand = delta + log_trans[:, j]
            prev = 1 if cand[1] >= cand[0] else 0
            new_delta[j] = cand[prev] + scores[k, j]
            back[k, j] = prev
        delta = new_delta
    path = np.zeros(K, dtype=np.int64)
    path[K - 1] = 1 if delta[1] >= delta[0] else 0
    for k in range(K - 1, 0, -1):
        path[k - 1] = back[k, path[k]]
    return path


def _gamma_q_term(input_sq: np.ndarray, gamma: np.ndarray) -> float:
    """Expected input-prior log-density (the gamma-dependent part of Q).

    Exactly-zero variances are a degenerate boundary: -inf when the
    posterior carries input power there, +inf (the limit) when it does
    not.  The floor used by the M-step keeps running iterates away from
    this branch.
    """
    gamma = np.asarray(gamma, dtype=float)
    K = input_sq.shape[0]
    zero = gamma == 0.0
    if np.any(zero):
        if np.any(input_sq[:, zero] > 0.0):
            return float("-inf")
        return float("inf")
    per_coord = -0.5 * K * np.log(2.0 * np.pi * gamma) - input_sq.sum(axis=0) / (2.0 * gamma)
    return float(per_coord.sum())


def _q_from_parts(
    model: SystemModel, scores: np.ndarray, stats: EStepStats, theta: Theta
) -> float:
    z = np.asarray(theta.z, dtype=np.int64)
    emit = float(scores[np.arange(len(z)), z].sum())
    return emit + markov_log_prior(model, z) + _gamma_q_term(stats.input_sq, theta.gamma)


def q_function(model: SystemModel, Y: np.ndarray, theta: Theta, theta_ref: Theta) -> float:
    """Expected complete-data log-density of theta under theta_ref's posterior."""
    validate_theta(model, theta)
    post = rts_smoother(model, kalman_filter(model, Y, theta_ref))
    stats = estep_stats(model, post)
    scores = emission_scores(model, Y, post)
    return _q_from_parts(model, scores, stats, theta)


def _em_step(
    model: SystemModel,
    Y: np.ndarray,
    theta: Theta,
    gamma_floor: float,
) -> tuple[Theta, float, EStepStats, np.ndarray]:
    """One EM step; also returns the objective at theta and the E-step parts."""
    fr = _filter_impl(model, Y, theta)
    L = float(np.sum(fr.loglik_terms))
    post = rts_smoother(model, fr)
    stats = estep_stats(model, post)
    scores = emission_scores(model, Y, post)
    gamma_next = mstep_gamma(stats, gamma_floor)
    z_next = viterbi(scores, model)
    return Theta(gamma=gamma_next, z=z_next), L, stats, scores


def em_iterate(
    model: SystemModel,
    Y: np.ndarray,
    theta: Theta,
    gamma_floor: float = GAMMA_FLOOR_DEFAULT,
) -> Theta:
    """One full EM step: both parameter halves from one shared posterior."""
    validate_theta(model, theta)
    theta_next, _, _, _ = _em_step(model, Y, theta, gamma_floor)
    return theta_next


def run_em(model: SystemModel, Y: np.ndarray, theta0: Theta, opts: EMOptions) -> EMTrace:
    """Iterate EM from theta0 until the stopping rule or max_iters.

    Stops when both the relative objective change and the relative gamma
    change of the last step fall below their tolerances.  A drop of the
    objective beyond 1e-10*(1+|L|) raises AscentViolationError, since
    ascent is guaranteed by construction.
    """
    from .likelihood import grad_gamma  # deferred: likelihood imports this module

    validate_model(model)
    opts.validate()
    gamma0 = np.maximum(np.asarray(theta0.gamma, dtype=float), opts.gamma_floor)
    theta = Theta(gamma=gamma0, z=np.asarray(theta0.z, dtype=np.int64))
    validate_theta(model, theta)

    trace = EMTrace()
    L_prev: float | None = None
    gamma_change_prev = np.inf
    for r in range(opts.max_iters):
        t0 = time.perf_counter()
        fr = _filter_impl(model, Y, theta)
        L = float(np.sum(fr.loglik_terms))
        if L_prev is not None:
            if L < L_prev - 1e-10 * (1.0 + abs(L_prev)):
                raise AscentViolationError(
                    f"objective dropped at iteration {r}: {L_prev!r} -> {L!r}"
                )
            if (
                abs(L - L_prev) <= opts.tol_rel_L * (1.0 + abs(L_prev))
                and gamma_change_prev <= opts.tol_gamma
            ):
                trace.theta_final = theta
                trace.L_final = L
                trace.termination = "converged"
                return trace
        post = rts_smoother(model, fr)
        stats = estep_stats(model, post)
        scores = emission_scores(model, Y, post)
        theta_next = Theta(
            gamma=mstep_gamma(stats, opts.gamma_floor), z=viterbi(scores, model)
        )
        q_next = q_self = None
        if opts.record_Q:
            q_next = _q_from_parts(model, scores, stats, theta_next)
            q_self = _q_from_parts(model, scores, stats, theta)
        grad_norm = float(np.max(np.abs(grad_gamma(model, Y, theta))))
        trace.records.append(IterationRecord(
            iteration=r,
            L=L,
            grad_inf_norm=grad_norm,
            gamma_change=float(
                np.max(np.abs(theta_next.gamma - theta.gamma))
                / (1.0 + np.max(np.abs(theta.gamma)))
            ),
            z_hamming_change=int(np.sum(theta_next.z != theta.z)),
            wall_ms=(time.perf_counter() - t0) * 1e3,
            Q_next=q_next,
            Q_self=q_self,
        ))
        L_prev = L
        gamma_change_prev = trace.records[-1].gamma_change
        theta = theta_next

    trace.theta_final = theta
    trace.L_final = float(np.sum(_filter_impl(model, Y, theta).loglik_terms))
    trace.termination = "max_iters"
    return trace
