"""Shared instance builders for the test suite.

Instances are deterministic functions of an integer seed; the model draw
and the data draw use decoupled streams so shapes and data can be varied
independently.
"""
from __future__ import annotations

import numpy as np
import pytest

from sblds.model import SimConfig, SystemModel, Theta, random_model, simulate_dataset


def make_instance(
    seed: int,
    n: int = 3,
    m: int = 2,
    K: int = 6,
    *,
    sigma2: float = 0.1,
    input_variance: float = 1.0,
    sparsity: int | None = None,
    p0: float = 0.8,
    p1: float = 0.9,
    pi1: float = 0.8,
    spectral_radius: float = 0.7,
):
    rng = np.random.default_rng(10_000 + seed)
    model = random_model(
        n, m, K, sigma2=sigma2, p0=p0, p1=p1, pi1=pi1,
        spectral_radius=spectral_radius, rng=rng,
    )
    cfg = SimConfig(
        sparsity=n if sparsity is None else sparsity,
        input_variance=input_variance,
        seed=seed,
    )
    dataset = simulate_dataset(model, cfg)
    return model, dataset


def random_theta(model: SystemModel, seed: int, gamma_lo: float = 0.1, gamma_hi: float = 2.0) -> Theta:
    rng = np.random.default_rng(20_000 + seed)
    gamma = rng.uniform(gamma_lo, gamma_hi, model.n)
    z = (rng.random(model.K) < 0.7).astype(np.int64)
    return Theta(gamma=gamma, z=z)


def scalar_model(sigma2: float = 0.01, p1: float = 1.0, pi1: float = 1.0) -> SystemModel:
    """1-D system with the mask pinned to "observed" by degenerate transitions."""
    return SystemModel(
        D=np.array([[0.0]]), A=np.array([[1.0]]),
        sigma2=sigma2, p0=1.0, p1=p1, K=1, pi1=pi1,
    )


@pytest.fixture
def small_instance():
    return make_instance(0)
