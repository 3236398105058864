"""Statistical model and simulator.

Linear dynamics driven by jointly sparse inputs, observed through a noisy
output map that is switched off during "missing" steps.  The missing
indicator follows a sticky two-state Markov chain, so outages come in
bursts.  Everything here is a pure function of (model, config, seed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAMMA_FLOOR_DEFAULT = 1e-12


@dataclass(frozen=True)
class SystemModel:
    """Known system: dynamics, output map, noise level, and the mask chain.

    Attributes
    ----------
    D : (n, n) state transition matrix
    A : (m, n) output matrix
    sigma2 : observation noise variance, > 0
    p0 : P{z_k = 0 | z_{k-1} = 0}, probability an outage persists
    p1 : P{z_k = 1 | z_{k-1} = 1}, probability observation persists
    K : horizon length (number of time steps)
    pi1 : P{z_1 = 1}, initial mask distribution
    """

    D: np.ndarray
    A: np.ndarray
    sigma2: float
    p0: float
    p1: float
    K: int
    pi1: float = 0.5

    @property
    def n(self) -> int:
        return int(np.asarray(self.D).shape[0])

    @property
    def m(self) -> int:
        return int(np.asarray(self.A).shape[0])


@dataclass(frozen=True)
class Theta:
    """Mixed estimation parameter: continuous input variances + binary mask.

    gamma : (n,) nonnegative per-coordinate input prior variances
    z : (K,) mask hypothesis, z[k] in {0, 1}
    """

    gamma: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class SimConfig:
    """Recipe for drawing one synthetic dataset."""

    sparsity: int
    input_variance: float = 1.0
    support: tuple[int, ...] | None = None
    seed: int = 0


@dataclass(frozen=True)
class Dataset:
    """One simulated run: ground truth plus observations.

    X, U are (n, K) with column k = time k; Y is (m, K); zstar is the
    (K,) ground-truth mask.  seed records the SimConfig seed when the
    dataset came out of simulate_dataset.
    """

    X: np.ndarray
    U: np.ndarray
    zstar: np.ndarray
    Y: np.ndarray
    seed: int | None = None


def validate_model(model: SystemModel) -> None:
    """Raise ValueError naming the offending field if the model is invalid."""
    D = np.asarray(model.D)
    A = np.asarray(model.A)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"D: dimension mismatch, expected a square matrix, got shape {D.shape}")
    n = D.shape[0]
    if n < 1:
        raise ValueError("n must be >= 1 (D is empty)")
    if A.ndim != 2 or A.shape[1] != n:
        raise ValueError(f"A: dimension mismatch, expected shape (m, {n}), got {A.shape}")
    if A.shape[0] < 1:
        raise ValueError("m must be >= 1 (A has no rows)")
    if not np.all(np.isfinite(D)):
        raise ValueError("D must be finite")
    if not np.all(np.isfinite(A)):
        raise ValueError("A must be finite")
    if not (float(model.sigma2) > 0.0):
        raise ValueError("sigma2 must be positive")
    for name in ("p0", "p1", "pi1"):
        val = float(getattr(model, name))
        if not (0.0 <= val <= 1.0):
            raise ValueError(f"{name} must be in [0, 1], got {val}")
    if int(model.K) < 1:
        raise ValueError(f"K must be >= 1, got {model.K}")


def validate_theta(model: SystemModel, theta: Theta) -> None:
    """Raise ValueError if theta does not fit the model's dimensions."""
    gamma = np.asarray(theta.gamma)
    z = np.asarray(theta.z)
    if gamma.shape != (model.n,):
        raise ValueError(f"gamma: expected shape ({model.n},), got {gamma.shape}")
    if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite and nonnegative")
    if z.shape != (model.K,):
        raise ValueError(f"z: expected shape ({model.K},), got {z.shape}")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("z entries must be 0 or 1")


def validate_sim_config(model: SystemModel, cfg: SimConfig) -> None:
    if not (0 <= int(cfg.sparsity) <= model.n):
        raise ValueError(f"sparsity must be in [0, {model.n}], got {cfg.sparsity}")
    if cfg.input_variance < 0:
        raise ValueError("input_variance must be nonnegative")
    if cfg.support is not None:
        support = tuple(int(i) for i in cfg.support)
        if len(set(support)) != len(support):
            raise ValueError("support must not contain duplicates")
        if len(support) != int(cfg.sparsity):
            raise ValueError(
                f"support size {len(support)} does not match sparsity {cfg.sparsity}"
            )
        if any(i < 0 or i >= model.n for i in support):
            raise ValueError(f"support indices must lie in [0, {model.n})")


def simulate_missing(model: SystemModel, rng: np.random.Generator) -> np.ndarray:
    """Draw the (K,) mask from the sticky two-state Markov chain."""
    validate_model(model)
    z = np.zeros(model.K, dtype=np.int64)
    draws = rng.random(model.K)
    z[0] = 1 if draws[0] < model.pi1 else 0
    stay = (model.p0, model.p1)
    for k in range(1, model.K):
        prev = z[k - 1]
        z[k] = prev if draws[k] < stay[prev] else 1 - prev
    return z


def simulate_inputs(model: SystemModel, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw a jointly sparse (n, K) input matrix.

    A support set of size cfg.sparsity is drawn uniformly at random (or
    taken from cfg.support); rows on the support are i.i.d. Gaussian
    with variance cfg.input_variance; all other rows are exactly zero.
    """
    validate_model(model)
    validate_sim_config(model, cfg)
    # Split the stream so the support draw does not shift the value draw.
    rng_support, rng_values = rng.spawn(2)
    if cfg.support is not None:
        support = np.array(sorted(int(i) for i in cfg.support), dtype=np.int64)
    else:
        support = np.sort(rng_support.choice(model.n, size=int(cfg.sparsity), replace=False))
    U = np.zeros((model.n, model.K))
    if support.size:
        U[support, :] = rng_values.normal(
            0.0, np.sqrt(cfg.input_variance), size=(support.size, model.K)
        )
    return U


def simulate(
    model: SystemModel,
    U: np.ndarray,
    zstar: np.ndarray,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Dataset:
    """Propagate the state recursion from x_0 = 0 and add observation noise."""
    validate_model(model)
    U = np.asarray(U, dtype=float)
    zstar = np.asarray(zstar, dtype=np.int64)
    if U.shape != (model.n, model.K):
        raise ValueError(f"U: expected shape ({model.n}, {model.K}), got {U.shape}")
    if zstar.shape != (model.K,):
        raise ValueError(f"zstar: expected shape ({model.K},), got {zstar.shape}")
    X = np.zeros((model.n, model.K))
    x = np.zeros(model.n)
    for k in range(model.K):
        x = model.D @ x + U[:, k]
        X[:, k] = x
    noise = rng.normal(0.0, np.sqrt(model.sigma2), size=(model.m, model.K))
    Y = zstar[None, :] * (model.A @ X) + noise
    return Dataset(X=X, U=U, zstar=zstar, Y=Y, seed=seed)


def simulate_dataset(model: SystemModel, cfg: SimConfig) -> Dataset:
    """Full draw from one seed, with independent sub-streams per component.

    Inputs, the missing-pattern chain, and the observation noise each get
    their own child stream of cfg.seed, so changing how one component
    consumes randomness leaves the others bit-identical.
    """
    validate_model(model)
    validate_sim_config(model, cfg)
    ss = np.random.SeedSequence(cfg.seed)
    ss_inputs, ss_chain, ss_noise = ss.spawn(3)
    U = simulate_inputs(model, cfg, np.random.default_rng(ss_inputs))
    zstar = simulate_missing(model, np.random.default_rng(ss_chain))
    return simulate(model, U, zstar, np.random.default_rng(ss_noise), seed=cfg.seed)


def random_model(
    n: int,
    m: int,
    K: int,
    *,
    sigma2: float,
    p0: float,
    p1: float,
    pi1: float = 0.5,
    spectral_radius: float = 0.8,
    rng: np.random.Generator,
) -> SystemModel:
    """Draw a random system with the spectral radius of D pinned."""
    M = rng.standard_normal((n, n)) / np.sqrt(n)
    rho = float(np.max(np.abs(np.linalg.eigvals(M)))) if n > 0 else 0.0
    D = spectral_radius * M / rho if rho > 0 else np.zeros((n, n))
    A = rng.standard_normal((m, n)) / np.sqrt(n)
    model = SystemModel(D=D, A=A, sigma2=sigma2, p0=p0, p1=p1, K=K, pi1=pi1)
    validate_model(model)
    return model
