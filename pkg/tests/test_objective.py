import numpy as np
import pytest
from scipy import stats
from scipy.special import multigammaln as scipy_multigammaln

from detmin import objective
from detmin.domains import DomainSpec
from detmin.errors import NumericalError
from detmin.generator import psi_from_rho
from detmin.objective import ObjectiveParams


def random_instance(rng, M=None, r=None, N=None):
    M = M or int(rng.integers(1, 9))
    r = r or int(rng.integers(1, min(M, 4) + 1))
    N = N or int(rng.integers(r, 11))
    A = rng.normal(size=(r, r))
    Psi = A @ A.T + 0.5 * np.eye(r)
    phi = float(rng.uniform(r - 1 + 0.1, 20))
    params = ObjectiveParams(sigma_v2=float(rng.uniform(0.05, 2)), Psi=Psi, phi=phi, M=M, r=r)
    return params, rng.normal(size=(M, N)), rng.normal(size=(M, r)), rng.normal(size=(r, N))


def fd_grad(f, X, h_rel=1e-6):
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        h = h_rel * (1 + abs(X[idx]))
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        G[idx] = (f(Xp) - f(Xm)) / (2 * h)
    return G


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestObjectiveParams:
    def test_derived(self):
        p = ObjectiveParams(sigma_v2=0.01, Psi=12 * np.eye(5), phi=6, M=20, r=5)
        assert p.beta == 32
        assert p.lam == pytest.approx(0.32)
        assert p.lam / p.beta == pytest.approx(p.sigma_v2, rel=1e-15)

    def test_override(self):
        p = ObjectiveParams(sigma_v2=0.01, Psi=np.eye(1), phi=1, M=1, r=1, lam_override=3.0)
        assert p.lam == 3.0

    def test_invalid(self):
        with pytest.raises(ValueError):
            ObjectiveParams(sigma_v2=0.0, Psi=np.eye(1), phi=1, M=1, r=1)
        with pytest.raises(ValueError):
            ObjectiveParams(sigma_v2=1.0, Psi=np.eye(2), phi=1, M=1, r=1)
        with pytest.raises(ValueError):
            ObjectiveParams(sigma_v2=1.0, Psi=np.eye(1), phi=-10, M=1, r=1)


class TestEvaluate:
    def test_scalar_example(self):
        p = ObjectiveParams(sigma_v2=1.0, Psi=np.eye(1), phi=1, M=1, r=1)
        J = objective.evaluate(p, np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]))
        assert J == pytest.approx(1 + 4 * np.log(0.5), abs=1e-12)
        assert J == pytest.approx(-1.7726, abs=1e-4)

    def test_h_zero(self):
        rng = np.random.default_rng(0)
        p, Y, _, S = random_instance(rng, M=5, r=3, N=7)
        J = objective.evaluate(p, Y, np.zeros((5, 3)), S)
        expected = np.sum(Y**2) + p.lam * np.log(np.linalg.det(p.Psi / p.beta))
        assert J == pytest.approx(expected, rel=1e-12)

    def test_against_plain_determinant(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p, Y, H, S = random_instance(rng)
            expected = np.sum((Y - H @ S) ** 2) + p.lam * np.log(np.linalg.det((H.T @ H + p.Psi) / p.beta))
            assert objective.evaluate(p, Y, H, S) == pytest.approx(expected, rel=1e-10, abs=1e-10)

    def test_map_objective_scaling(self):
        rng = np.random.default_rng(2)
        p, Y, _, _ = random_instance(rng, M=6, r=2, N=8)
        diffs = []
        for _ in range(100):
            H, S = rng.normal(size=(6, 2)), rng.normal(size=(2, 8))
            diffs.append(objective.evaluate(p, Y, H, S) / (2 * p.sigma_v2) - objective.map_objective(p, Y, H, S))
        np.testing.assert_allclose(diffs, diffs[0], rtol=1e-10, atol=1e-10)

    def test_shape_mismatch(self):
        p = ObjectiveParams(sigma_v2=1.0, Psi=np.eye(2), phi=3, M=3, r=2)
        with pytest.raises(ValueError):
            objective.evaluate(p, np.zeros((3, 4)), np.zeros((3, 2)), np.zeros((2, 5)))

    def test_cholesky_failure_reports_eigenvalues(self):
        with pytest.raises(NumericalError) as info:
            objective.logdet_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert info.value.diagnostics["min_eigenvalue"] == pytest.approx(-1.0)


class TestGradients:
    def test_grad_H_finite_differences(self):
        rng = np.random.default_rng(3)
        p, Y, H, S = random_instance(rng, M=4, r=2, N=6)
        g = objective.grad_H(p, Y, H, S)
        fd = fd_grad(lambda X: objective.evaluate(p, Y, X, S), H)
        assert rel_err(g, fd) <= 1e-5

    def test_grad_S_finite_differences(self):
        rng = np.random.default_rng(4)
        p, Y, H, S = random_instance(rng, M=4, r=2, N=6)
        g = objective.grad_S(p, Y, H, S)
        fd = fd_grad(lambda X: objective.evaluate(p, Y, H, X), S)
        assert rel_err(g, fd) <= 1e-6

    def test_grad_H_at_zero(self):
        rng = np.random.default_rng(5)
        p, Y, _, S = random_instance(rng, M=5, r=2, N=6)
        np.testing.assert_allclose(objective.grad_H(p, Y, np.zeros((5, 2)), S), -2 * Y @ S.T)

    def test_grad_S_zero_residual(self):
        rng = np.random.default_rng(6)
        p, _, H, S = random_instance(rng, M=5, r=2, N=6)
        np.testing.assert_allclose(objective.grad_S(p, H @ S, H, S), 0, atol=1e-12)

    def test_grad_S_orthonormal(self):
        rng = np.random.default_rng(7)
        p, Y, _, _ = random_instance(rng, M=5, r=2, N=6)
        H = np.linalg.qr(rng.normal(size=(5, 2)))[0]
        np.testing.assert_allclose(objective.grad_S(p, Y, H, np.zeros((2, 6))), -2 * H.T @ Y)

    def test_logdet_part_linear_in_lambda(self):
        rng = np.random.default_rng(8)
        p, Y, H, S = random_instance(rng, M=5, r=2, N=6)
        data = -2 * (Y - H @ S) @ S.T
        p2 = ObjectiveParams(p.sigma_v2, p.Psi, p.phi, p.M, p.r, lam_override=2 * p.lam)
        np.testing.assert_allclose(objective.grad_H(p2, Y, H, S) - data,
                                   2 * (objective.grad_H(p, Y, H, S) - data), rtol=1e-12)

    def test_fifty_random_instances(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(50):
            p, Y, H, S = random_instance(rng)
            worst = max(worst,
                        rel_err(objective.grad_H(p, Y, H, S), fd_grad(lambda X: objective.evaluate(p, Y, X, S), H)),
                        rel_err(objective.grad_S(p, Y, H, S), fd_grad(lambda X: objective.evaluate(p, Y, H, X), S)))
        assert worst <= 1e-5


class TestSigmaStationaryAndBlend:
    def test_examples(self):
        np.testing.assert_allclose(objective.sigma_stationary(np.array([[1.0]]), np.eye(1), 1.0, 1), [[0.5]])
        Psi = 3 * np.eye(2)
        np.testing.assert_allclose(objective.sigma_stationary(np.zeros((4, 2)), Psi, 2.0, 4), Psi / 9)

    def test_mu(self):
        b = objective.covariance_blend(np.ones((20, 5)), 12 * np.eye(5), 6.0, 20)
        assert b.mu == 0.625
        assert objective.covariance_blend(np.ones((3200, 5)), np.eye(5), 26.0, 3200).mu >= 0.99

    def test_h_zero(self):
        Psi = np.diag([1.0, 2.0])
        b = objective.covariance_blend(np.zeros((7, 2)), Psi, 3.0, 7)
        np.testing.assert_allclose(b.blended, (1 - b.mu) * Psi / 6)

    def test_identity(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            M, r = int(rng.integers(1, 30)), int(rng.integers(1, 6))
            A = rng.normal(size=(r, r))
            Psi = A @ A.T + np.eye(r)
            phi = float(rng.uniform(0, 300))
            H = rng.normal(size=(M, r))
            b = objective.covariance_blend(H, Psi, phi, M)
            s = objective.sigma_stationary(H, Psi, phi, M)
            assert 0 < b.mu < 1
            assert np.max(np.abs(b.blended - s)) <= 1e-12 * np.max(np.abs(s))


def brute_log_posterior(H, S, Sigma, p, Y):
    """Independent construction from scipy densities."""
    data = stats.norm(scale=np.sqrt(p.sigma_v2)).logpdf(Y - H @ S).sum()
    cond = stats.multivariate_normal(mean=np.zeros(p.r), cov=Sigma).logpdf(H).sum()
    prior = stats.invwishart(df=p.phi, scale=p.Psi).logpdf(Sigma)
    return data, cond, prior


class TestLogPosterior:
    def test_against_scipy_densities(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p, Y, H, S = random_instance(rng, M=int(rng.integers(2, 9)), r=int(rng.integers(2, 4)))
            Sigma = objective.sigma_stationary(H, p.Psi, p.phi, p.M)
            t = objective.log_posterior_terms(H, S, Sigma, p, Y)
            data, cond, prior = brute_log_posterior(H, S, Sigma, p, Y)
            assert t.data == pytest.approx(data, rel=1e-10)
            assert t.conditional == pytest.approx(cond, rel=1e-10)
            assert t.prior == pytest.approx(prior, rel=1e-9, abs=1e-9)
            assert t.source == 0.0

    def test_scalar_conditional(self):
        p = ObjectiveParams(sigma_v2=1.0, Psi=np.eye(1), phi=1, M=1, r=1)
        t = objective.log_posterior_terms(np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), p, np.zeros((1, 1)))
        assert t.conditional == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)

    def test_source_indicator(self):
        p = ObjectiveParams(sigma_v2=1.0, Psi=np.eye(2), phi=3, M=2, r=2)
        S = np.array([[2.0], [0.0]])
        t = objective.log_posterior_terms(np.eye(2), S, np.eye(2), p, np.zeros((2, 1)), DomainSpec.linf_ball(2))
        assert t.source == -np.inf and t.total == -np.inf

    def test_multigammaln(self):
        for a, d in [(3.0, 1), (2.5, 2), (10.0, 5)]:
            assert objective.multigammaln(a, d) == pytest.approx(scipy_multigammaln(a, d), rel=1e-13)

    def test_sigma_gradient_vanishes_at_stationary_point(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            p, Y, H, S = random_instance(rng, M=6, r=3, N=5)
            Sig = objective.sigma_stationary(H, p.Psi, p.phi, p.M)

            def g(Sm):
                t = objective.log_posterior_terms(H, S, Sm, p, Y)
                return t.conditional + t.prior

            h = 1e-5
            worst = 0.0
            for _ in range(20):
                D = rng.normal(size=(3, 3))
                D = (D + D.T) / np.linalg.norm(D + D.T)
                worst = max(worst, abs(g(Sig + h * D) - g(Sig - h * D)) / (2 * h))
            assert worst <= 1e-6
            np.testing.assert_allclose(objective.sigma_gradient(H, Sig, p.Psi, p.phi, p.M), 0, atol=1e-9)

    def test_sigma_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        p, Y, H, S = random_instance(rng, M=5, r=2, N=4)
        Sig = np.array([[1.5, 0.2], [0.2, 0.8]])
        G = objective.sigma_gradient(H, Sig, p.Psi, p.phi, p.M)
        D = np.array([[0.3, -0.7], [-0.7, 1.1]])

        def g(Sm):
            t = objective.log_posterior_terms(H, S, Sm, p, Y)
            return t.conditional + t.prior

        h = 1e-6
        fd = (g(Sig + h * D) - g(Sig - h * D)) / (2 * h)
        assert np.sum(G * D) == pytest.approx(fd, rel=1e-6)

    def test_reduction_consistency(self):
        rng = np.random.default_rng(14)
        p, Y, _, _ = random_instance(rng, M=6, r=3, N=8)
        J, L = [], []
        for _ in range(100):
            H = rng.normal(size=(6, 3)) * rng.uniform(0.1, 3)
            S = rng.normal(size=(3, 8))
            Sig = objective.sigma_stationary(H, p.Psi, p.phi, p.M)
            t = objective.log_posterior_terms(H, S, Sig, p, Y)
            J.append(objective.evaluate(p, Y, H, S))
            L.append(-2 * p.sigma_v2 * (t.data + t.conditional + t.prior))
        diff = np.array(J) - np.array(L)
        assert np.max(np.abs(diff - diff[0])) <= 1e-8 * abs(diff[0])
        assert stats.spearmanr(J, [-v for v in L]).statistic == pytest.approx(-1.0)

    def test_non_spd_sigma(self):
        p = ObjectiveParams(sigma_v2=1.0, Psi=np.eye(2), phi=3, M=2, r=2)
        with pytest.raises(NumericalError):
            objective.log_posterior_terms(np.eye(2), np.zeros((2, 1)), -np.eye(2), p, np.zeros((2, 1)))


def test_paper_psi_makes_prior_mode_identity():
    Psi = psi_from_rho(1.0, 6.0, 5)
    b = objective.covariance_blend(np.zeros((20, 5)), Psi, 6.0, 20)
    np.testing.assert_allclose(b.prior_mode, np.eye(5))
