import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sblds.likelihood import (
    build_dtilde,
    build_ry,
    grad_gamma,
    grad_gamma_fd,
    log_likelihood,
    log_likelihood_innovations,
)
from sblds.model import SystemModel, Theta

from conftest import make_instance, random_theta, scalar_model


def scalar_theta(g):
    return Theta(gamma=np.array([g]), z=np.array([1]))


class TestBuildDtilde:
    def test_single_step_is_identity(self):
        model = SystemModel(D=np.eye(3) * 0.4, A=np.ones((1, 3)), sigma2=1.0, p0=0.5, p1=0.5, K=1)
        assert np.array_equal(build_dtilde(model), np.eye(3))

    def test_zero_dynamics_gives_identity(self):
        model = SystemModel(D=np.zeros((2, 2)), A=np.ones((1, 2)), sigma2=1.0, p0=0.5, p1=0.5, K=4)
        assert np.array_equal(build_dtilde(model), np.eye(8))

    def test_scalar_two_step_pattern(self):
        model = SystemModel(D=np.array([[0.5]]), A=np.array([[1.0]]), sigma2=1.0, p0=0.5, p1=0.5, K=2)
        assert np.allclose(build_dtilde(model), [[1.0, 0.0], [0.5, 1.0]])

    @given(
        st.integers(min_value=1, max_value=3),
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_block_power_structure(self, n, K, seed):
        rng = np.random.default_rng(seed)
        D = rng.uniform(-0.9, 0.9, (n, n))
        model = SystemModel(D=D, A=np.ones((1, n)), sigma2=1.0, p0=0.5, p1=0.5, K=K)
        Dt = build_dtilde(model)
        for k in range(K):
            for j in range(K):
                block = Dt[k * n:(k + 1) * n, j * n:(j + 1) * n]
                expected = np.linalg.matrix_power(D, k - j) if k >= j else np.zeros((n, n))
                assert np.allclose(block, expected, atol=1e-12)


class TestBuildRy:
    def test_all_missing_annihilates_signal(self):
        model, _ = make_instance(1, n=2, m=2, K=4)
        theta = Theta(gamma=np.ones(2), z=np.zeros(4, dtype=np.int64))
        assert np.all(build_ry(model, theta).ry == 0)

    def test_scalar_value(self):
        a, g = 1.7, 0.6
        model = SystemModel(D=np.array([[0.0]]), A=np.array([[a]]), sigma2=0.3, p0=0.5, p1=0.5, K=1)
        cov = build_ry(model, scalar_theta(g))
        assert np.allclose(cov.ry, [[a * a * g]])

    def test_two_step_hand_formula_and_sample_covariance(self):
        a, d, g = 1.3, 0.5, 0.8
        model = SystemModel(D=np.array([[d]]), A=np.array([[a]]), sigma2=0.2, p0=0.5, p1=0.5, K=2)
        theta = Theta(gamma=np.array([g]), z=np.array([1, 1]))
        ry = build_ry(model, theta).ry
        expected = a * a * g * np.array([[1.0, d], [d, 1.0 + d * d]])
        assert np.allclose(ry, expected, atol=1e-12)
        # cross-check against the sample covariance of noiseless draws
        N = 1_000_000
        rng = np.random.default_rng(99)
        U = rng.normal(0.0, np.sqrt(g), size=(2, N))
        y1 = a * U[0]
        y2 = a * (d * U[0] + U[1])
        sample = np.cov(np.vstack([y1, y2]))
        scale = np.sqrt(np.outer(np.diag(expected), np.diag(expected))) + np.abs(expected) ** 2
        assert np.all(np.abs(sample - expected) < 3.0 * np.sqrt(scale / N) + 1e-3)

    def test_symmetry_and_psd_sweep(self):
        for seed in range(200):
            model, _ = make_instance(seed, n=2 + seed % 3, m=1 + seed % 2, K=3 + seed % 4)
            theta = random_theta(model, seed)
            ry = build_ry(model, theta).ry
            scale = np.max(np.abs(ry)) + 1e-300
            assert np.max(np.abs(ry - ry.T)) <= 1e-12 * scale
            min_eig = np.min(np.linalg.eigvalsh(ry))
            assert min_eig >= -1e-10 * np.linalg.norm(ry, 2)


class TestLogLikelihood:
    def test_all_missing_closed_form(self):
        model, ds = make_instance(2, n=2, m=2, K=5, sigma2=0.4)
        theta = Theta(gamma=np.ones(2), z=np.zeros(5, dtype=np.int64))
        y = ds.Y.flatten(order="F")
        km = model.m * model.K
        expected = -0.5 * km * np.log(2 * np.pi * model.sigma2) - (y @ y) / (2 * model.sigma2)
        assert np.isclose(log_likelihood(model, ds.Y, theta), expected, rtol=1e-12)
        assert np.isclose(log_likelihood_innovations(model, ds.Y, theta), expected, rtol=1e-12)

    def test_scalar_closed_form(self):
        model = scalar_model(sigma2=0.3)
        g, y1 = 0.7, 1.1
        Y = np.array([[y1]])
        expected = -0.5 * np.log(2 * np.pi * (g + 0.3)) - y1**2 / (2 * (g + 0.3))
        assert np.isclose(log_likelihood(model, Y, scalar_theta(g)), expected, rtol=1e-13)

    def test_single_step_matches_direct_density(self):
        model, ds = make_instance(3, n=3, m=2, K=1)
        theta = Theta(gamma=np.array([0.5, 1.0, 2.0]), z=np.array([1]))
        S = model.A @ np.diag(theta.gamma) @ model.A.T + model.sigma2 * np.eye(2)
        y = ds.Y[:, 0]
        expected = -0.5 * (
            2 * np.log(2 * np.pi) + np.linalg.slogdet(S)[1] + y @ np.linalg.solve(S, y)
        )
        assert np.isclose(log_likelihood_innovations(model, ds.Y, theta), expected, rtol=1e-12)

    def test_direct_equals_innovations_seeded(self):
        model, ds = make_instance(5, n=3, m=2, K=5)
        theta = random_theta(model, 5)
        Ld = log_likelihood(model, ds.Y, theta)
        Li = log_likelihood_innovations(model, ds.Y, theta)
        assert abs(Ld - Li) <= 1e-8 * (1 + abs(Ld))

    def test_longer_instance_cross_oracle(self):
        model, ds = make_instance(6, n=4, m=2, K=20)
        theta = random_theta(model, 6)
        Ld = log_likelihood(model, ds.Y, theta)
        Li = log_likelihood_innovations(model, ds.Y, theta)
        assert abs(Ld - Li) <= 1e-8 * (1 + abs(Ld))

    def test_upper_bound_holds(self):
        for seed in range(40):
            model, ds = make_instance(seed, n=2 + seed % 3, m=1 + seed % 3, K=4 + seed % 5)
            theta = random_theta(model, seed + 1)
            bound = -0.5 * model.K * model.m * np.log(2 * np.pi * model.sigma2)
            assert log_likelihood(model, ds.Y, theta) <= bound + 1e-12

    def test_coercivity_direction(self):
        model, ds = make_instance(7, n=2, m=2, K=5)
        theta = random_theta(model, 7)
        vals = [
            log_likelihood(model, ds.Y, Theta(gamma=t * theta.gamma, z=theta.z))
            for t in (1e2, 1e3, 1e4, 1e5)
        ]
        assert np.all(np.diff(vals) < 0)


class TestGradGamma:
    def test_all_missing_gradient_is_zero(self):
        model, ds = make_instance(8, n=3, m=2, K=4)
        theta = Theta(gamma=np.ones(3), z=np.zeros(4, dtype=np.int64))
        assert np.allclose(grad_gamma(model, ds.Y, theta), 0.0)
        assert np.max(np.abs(grad_gamma_fd(model, ds.Y, theta))) <= 1e-9

    def test_scalar_hand_derivative(self):
        model = scalar_model(sigma2=0.3)
        y1 = 1.2
        Y = np.array([[y1]])
        for g in (0.2, 0.9, 2.5):
            expected = -1 / (2 * (g + 0.3)) + y1**2 / (2 * (g + 0.3) ** 2)
            assert np.isclose(grad_gamma(model, Y, scalar_theta(g))[0], expected, rtol=1e-12)
        g_star = y1**2 - 0.3
        assert abs(grad_gamma(model, Y, scalar_theta(g_star))[0]) < 1e-14

    def test_matches_finite_differences_seeded(self):
        model, ds = make_instance(9, n=3, m=2, K=6)
        theta = random_theta(model, 9)
        g = grad_gamma(model, ds.Y, theta)
        fd = grad_gamma_fd(model, ds.Y, theta)
        assert np.max(np.abs(g - fd)) <= 1e-5 * (1 + np.max(np.abs(g)))

    def test_fd_sweep(self):
        for seed in range(25):
            model, ds = make_instance(seed + 40, n=2 + seed % 4, m=1 + seed % 3, K=4 + seed % 6)
            theta = random_theta(model, seed + 40)
            g = grad_gamma(model, ds.Y, theta)
            fd = grad_gamma_fd(model, ds.Y, theta)
            assert np.max(np.abs(g - fd)) <= 1e-5 * (1 + np.max(np.abs(g)))


class TestGradGammaFd:
    def test_richardson_order(self):
        model = scalar_model(sigma2=0.3)
        Y = np.array([[1.2]])
        theta = scalar_theta(0.9)
        exact = grad_gamma(model, Y, theta)[0]
        err_h = abs(grad_gamma_fd(model, Y, theta, h=1e-3)[0] - exact)
        err_h2 = abs(grad_gamma_fd(model, Y, theta, h=5e-4)[0] - exact)
        assert err_h > 1e-12  # step large enough that truncation dominates
        assert err_h2 <= err_h / 2.5  # central differences: error ~ h^2

    def test_boundary_uses_one_sided(self):
        model, ds = make_instance(10, n=2, m=2, K=4)
        theta = Theta(gamma=np.array([0.0, 1.0]), z=np.ones(4, dtype=np.int64))
        fd = grad_gamma_fd(model, ds.Y, theta)
        assert np.all(np.isfinite(fd))

    def test_nonpositive_step_rejected(self):
        model, ds = make_instance(11, n=2, m=2, K=4)
        theta = random_theta(model, 11)
        with pytest.raises(ValueError, match="h"):
            grad_gamma_fd(model, ds.Y, theta, h=0.0)
