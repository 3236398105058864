"""Executable certificates for a finished EM run.

Each check turns one provable property of the iteration (monotone
ascent, surrogate ascent, stationarity of the limit in the continuous
block, coercivity of the objective, closedness/continuity of the
iteration map) into a pass/fail record with the measured value, the
threshold it was held to, and a witness for failures.  Checks are pure
functions of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import em
from .likelihood import _stacked_operator, grad_gamma, log_likelihood_innovations
from .model import GAMMA_FLOOR_DEFAULT, SystemModel, Theta, validate_theta


@dataclass
class CheckRecord:
    name: str
    passed: bool
    value: float
    threshold: float
    witness: str | None = None
    note: str | None = None


@dataclass
class DiagnosticsReport:
    checks: list[CheckRecord] = field(default_factory=list)

    @property
    def verdict(self) -> bool:
        return all(c.passed for c in self.checks)


def check_monotone(trace: em.EMTrace, tol: float = 1e-10) -> CheckRecord:
    """Objective never drops along the run beyond tol*(1+|L|)."""
    L = trace.L_sequence
    if len(L) < 2:
        raise ValueError("monotonicity needs a trace of length >= 2")
    drops = L[:-1] - L[1:] - tol * (1.0 + np.abs(L[:-1]))
    worst = int(np.argmax(drops))
    return CheckRecord(
        name="monotone_ascent",
        passed=bool(np.all(drops <= 0.0)),
        value=float(L[worst] - L[worst + 1]),
        threshold=tol,
        witness=None if np.all(drops <= 0.0) else f"iteration {worst}",
    )


def check_stationary(
    model: SystemModel,
    Y: np.ndarray,
    theta_final: Theta,
    tol: float = 1e-4,
    gamma_floor: float = GAMMA_FLOOR_DEFAULT,
) -> CheckRecord:
    """Projected gradient in the continuous block vanishes at the limit.

    Coordinates clamped at the floor with an inward-pointing (negative)
    gradient are boundary-optimal and excluded, matching the KKT reading
    of stationarity on the nonnegative orthant.
    """
    grad = grad_gamma(model, Y, theta_final)
    L = log_likelihood_innovations(model, Y, theta_final)
    at_floor = np.asarray(theta_final.gamma) <= gamma_floor
    projected = np.where(at_floor & (grad < 0.0), 0.0, grad)
    value = float(np.max(np.abs(projected)))
    threshold = tol * (1.0 + abs(L))
    worst = int(np.argmax(np.abs(projected)))
    return CheckRecord(
        name="stationarity",
        passed=value <= threshold,
        value=value,
        threshold=threshold,
        witness=None if value <= threshold else f"gamma coordinate {worst}",
    )


def check_q_ascent(trace: em.EMTrace, tol: float = 1e-10) -> CheckRecord:
    """Each M-step does not decrease the surrogate it maximizes."""
    if not trace.records or any(r.Q_next is None or r.Q_self is None for r in trace.records):
        raise ValueError("trace has no recorded Q values (run with record_Q)")
    worst_gap = -np.inf
    worst_iter = None
    for rec in trace.records:
        gap = rec.Q_self - rec.Q_next - tol * (1.0 + abs(rec.Q_self))
        if gap > worst_gap:
            worst_gap = gap
            worst_iter = rec.iteration
    return CheckRecord(
        name="q_ascent",
        passed=worst_gap <= 0.0,
        value=float(worst_gap),
        threshold=0.0,
        witness=None if worst_gap <= 0.0 else f"iteration {worst_iter}",
    )


def check_gibbs_surrogate(
    model: SystemModel,
    Y: np.ndarray,
    theta_pairs: list[tuple[Theta, Theta]],
    tol: float = 1e-9,
) -> CheckRecord:
    """The surrogate gain lower-bounds the objective gain.

    For pairs (theta, theta_ref) sharing the same mask, the objective
    difference must dominate the Q difference; the entropy-like remainder
    is never computed directly.
    """
    worst_violation = -np.inf
    worst_idx = None
    for idx, (theta, theta_ref) in enumerate(theta_pairs):
        if np.any(np.asarray(theta.z) != np.asarray(theta_ref.z)):
            raise ValueError(f"pair {idx}: masks must match")
        L_t = log_likelihood_innovations(model, Y, theta)
        L_r = log_likelihood_innovations(model, Y, theta_ref)
        dq = em.q_function(model, Y, theta, theta_ref) - em.q_function(
            model, Y, theta_ref, theta_ref
        )
        violation = dq - (L_t - L_r) - tol * (1.0 + abs(L_t))
        if violation > worst_violation:
            worst_violation = violation
            worst_idx = idx
    return CheckRecord(
        name="gibbs_surrogate",
        passed=worst_violation <= 0.0,
        value=float(worst_violation),
        threshold=0.0,
        witness=None if worst_violation <= 0.0 else f"pair {worst_idx}",
    )


def check_coercive(
    model: SystemModel,
    Y: np.ndarray,
    z: np.ndarray,
    gamma: np.ndarray,
    t_grid: tuple[float, ...] = (1.0, 10.0, 1e2, 1e3, 1e4),
) -> CheckRecord:
    """Objective decays along the ray t*gamma, witnessing coercivity.

    Requires strict decrease over the last three grid points and a total
    drop of at least log(t_max)/2, the rate the log-determinant growth
    guarantees once the signal covariance is nonzero.  Skipped (pass with
    a note) when the mask and output map annihilate the signal entirely.
    """
    gamma = np.asarray(gamma, dtype=float)
    z = np.asarray(z, dtype=np.int64)
    if len(t_grid) < 3 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing with at least 3 points")
    B = _stacked_operator(model, z)
    if not np.any(z) or np.allclose(B, 0.0):
        return CheckRecord(
            name="coercivity",
            passed=True,
            value=0.0,
            threshold=0.0,
            note="skipped: signal operator is zero, objective constant in gamma",
        )
    vals = np.array([
        log_likelihood_innovations(model, Y, Theta(gamma=t * gamma, z=z)) for t in t_grid
    ])
    tail = vals[-3:]
    strictly_down = bool(np.all(np.diff(tail) < 0.0))
    drop = float(vals[0] - vals[-1])
    threshold = 0.5 * float(np.log(t_grid[-1]))
    passed = strictly_down and drop >= threshold
    return CheckRecord(
        name="coercivity",
        passed=passed,
        value=drop,
        threshold=threshold,
        witness=None if passed else f"values along ray: {vals.tolist()}",
    )


def check_map_closed(
    model: SystemModel,
    Y: np.ndarray,
    gamma_seq: list[np.ndarray],
    gamma_lim: np.ndarray,
    z_fixed: np.ndarray,
    gamma_tol: float = 1e-6,
    gamma_floor: float = GAMMA_FLOOR_DEFAULT,
) -> CheckRecord:
    """Iteration-map outputs converge to the output at the input limit.

    The continuous part must land within gamma_tol by the end of the
    sequence; the discrete part must be constant and equal to the limit
    output over the trailing quarter of the sequence.  A mask that keeps
    flipping there (a decision-boundary tie) is reported as the witness.
    """
    z_fixed = np.asarray(z_fixed, dtype=np.int64)
    theta_lim = Theta(gamma=np.asarray(gamma_lim, dtype=float), z=z_fixed)
    out_lim = em.em_iterate(model, Y, theta_lim, gamma_floor)
    outs = [
        em.em_iterate(model, Y, Theta(gamma=np.asarray(g, dtype=float), z=z_fixed), gamma_floor)
        for g in gamma_seq
    ]
    if not outs:
        raise ValueError("gamma_seq must be nonempty")
    tail_len = max(1, len(outs) // 4)
    tail = outs[-tail_len:]
    z_stable = all(np.array_equal(o.z, out_lim.z) for o in tail)
    final_gap = float(np.max(np.abs(outs[-1].gamma - out_lim.gamma)))
    passed = z_stable and final_gap <= gamma_tol
    witness = None
    if not z_stable:
        bad = next(
            len(outs) - tail_len + j
            for j, o in enumerate(tail)
            if not np.array_equal(o.z, out_lim.z)
        )
        witness = f"mask output differs from limit at sequence index {bad} (tie region)"
    elif final_gap > gamma_tol:
        witness = "gamma output at final index off the limit output"
    return CheckRecord(
        name="map_closedness",
        passed=passed,
        value=final_gap,
        threshold=gamma_tol,
        witness=witness,
    )


def run_suite(
    model: SystemModel,
    Y: np.ndarray,
    trace: em.EMTrace,
    *,
    checks: tuple[str, ...] = (
        "monotone",
        "q_ascent",
        "stationary",
        "gibbs",
        "coercive",
        "map_closed",
    ),
    tol_monotone: float = 1e-10,
    tol_stationary: float = 1e-4,
    tol_q: float = 1e-10,
    tol_gibbs: float = 1e-9,
    gamma_floor: float = GAMMA_FLOOR_DEFAULT,
) -> DiagnosticsReport:
    """Standard post-run suite over a completed trace."""
    theta_final = trace.theta_final
    if theta_final is None:
        raise ValueError("trace has no final parameter")
    validate_theta(model, theta_final)
    report = DiagnosticsReport()
    for name in checks:
        if name == "monotone":
            if len(trace.L_sequence) < 2:
                report.checks.append(CheckRecord(
                    name="monotone_ascent", passed=True, value=0.0, threshold=tol_monotone,
                    note="skipped: single-evaluation trace",
                ))
            else:
                report.checks.append(check_monotone(trace, tol_monotone))
        elif name == "q_ascent":
            if trace.records and all(
                r.Q_next is not None and r.Q_self is not None for r in trace.records
            ):
                report.checks.append(check_q_ascent(trace, tol_q))
            else:
                report.checks.append(CheckRecord(
                    name="q_ascent", passed=True, value=0.0, threshold=tol_q,
                    note="skipped: trace has no recorded Q values",
                ))
        elif name == "stationary":
            report.checks.append(
                check_stationary(model, Y, theta_final, tol_stationary, gamma_floor)
            )
        elif name == "gibbs":
            pairs = [
                (Theta(gamma=scale * theta_final.gamma, z=theta_final.z), theta_final)
                for scale in (0.5, 0.9, 1.1, 2.0)
            ]
            report.checks.append(check_gibbs_surrogate(model, Y, pairs, tol_gibbs))
        elif name == "coercive":
            report.checks.append(
                check_coercive(model, Y, theta_final.z, np.maximum(theta_final.gamma, 1e-6))
            )
        elif name == "map_closed":
            seq = [theta_final.gamma + 2.0**-j for j in range(1, 21)]
            report.checks.append(check_map_closed(
                model, Y, seq, theta_final.gamma, theta_final.z,
                gamma_floor=gamma_floor,
            ))
        else:
            raise ValueError(f"unknown check name: {name}")
    return report
