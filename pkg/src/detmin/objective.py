"""MAP objective for determinant-regularized structured factorization.

The working objective is

    J(H, S) = ||Y - H S||_F^2 + lam * logdet((H^T H + Psi) / beta)

with ``beta = M + r + phi + 1`` and ``lam = beta * sigma_v2``.  It is
``2 * sigma_v2`` times the negative log posterior of (H, S, Sigma_h) after
Sigma_h has been replaced by its stationary value ``(H^T H + Psi) / beta``,
up to additive constants.  :func:`log_posterior_terms` keeps every term of
the unreduced posterior so the reduction can be checked numerically.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy.special import gammaln

from . import domains
from .errors import NumericalError


@dataclass(frozen=True)
class ObjectiveParams:
    sigma_v2: float
    Psi: np.ndarray
    phi: float
    M: int
    r: int
    lam_override: float = None

    def __post_init__(self):
        Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        if Psi.shape != (self.r, self.r):
            raise ValueError(f"Psi must be {self.r}x{self.r}, got {Psi.shape}")
        object.__setattr__(self, "Psi", Psi)
        if not self.sigma_v2 > 0:
            raise ValueError("sigma_v2 must be positive")
        if not self.beta > 0:
            raise ValueError(f"beta = M + r + phi + 1 must be positive, got {self.beta}")
        if self.lam_override is not None and not self.lam_override > 0:
            raise ValueError("lambda must be positive")

    @property
    def beta(self):
        return self.M + self.r + self.phi + 1.0

    @property
    def lam(self):
        if self.lam_override is not None:
            return float(self.lam_override)
        return self.beta * self.sigma_v2


@dataclass(frozen=True)
class CovarianceBlend:
    sample_cov: np.ndarray
    prior_mode: np.ndarray
    mu: float
    blended: np.ndarray


@dataclass(frozen=True)
class LogPosteriorTerms:
    data: float
    source: float
    conditional: float
    prior: float

    @property
    def total(self):
        return self.data + self.source + self.conditional + self.prior


def _check_shapes(Y, H, S):
    Y, H, S = (np.asarray(a, dtype=float) for a in (Y, H, S))
    if Y.ndim != 2 or H.ndim != 2 or S.ndim != 2:
        raise ValueError("Y, H and S must be 2-D arrays")
    M, N = Y.shape
    if H.shape[0] != M or S.shape[1] != N or H.shape[1] != S.shape[0]:
        raise ValueError(f"incompatible shapes Y{Y.shape}, H{H.shape}, S{S.shape}")
    return Y, H, S


def cholesky_spd(A, what="matrix"):
    """Lower Cholesky factor; NumericalError with conditioning info on failure."""
    try:
        return la.cholesky(A, lower=True)
    except la.LinAlgError:
        w = np.linalg.eigvalsh(0.5 * (A + A.T))
        raise NumericalError(
            f"{what} is not numerically positive definite",
            min_eigenvalue=float(w[0]),
            max_eigenvalue=float(w[-1]),
        ) from None


def logdet_spd(A, what="matrix"):
    L = cholesky_spd(A, what)
    return 2.0 * np.sum(np.log(np.diag(L)))


def multigammaln(a, d):
    """log of the multivariate gamma function Gamma_d(a)."""
    j = np.arange(1, d + 1)
    return d * (d - 1) / 4.0 * np.log(np.pi) + np.sum(gammaln(a + (1.0 - j) / 2.0))


def evaluate(params, Y, H, S):
    """J(H, S); the log-determinant goes through a Cholesky factor."""
    Y, H, S = _check_shapes(Y, H, S)
    R = Y - H @ S
    G = (H.T @ H + params.Psi) / params.beta
    return float(np.sum(R * R) + params.lam * logdet_spd(G, "(H^T H + Psi) / beta"))


def map_objective(params, Y, H, S):
    """Negative log posterior with Sigma_h profiled out, constants dropped.

    Equals ``evaluate(...) / (2 * sigma_v2)`` when lambda follows the prescription.
    """
    Y, H, S = _check_shapes(Y, H, S)
    R = Y - H @ S
    G = (H.T @ H + params.Psi) / params.beta
    return float(np.sum(R * R) / (2 * params.sigma_v2) + params.beta / 2 * logdet_spd(G))


def grad_H(params, Y, H, S):
    """-2 (Y - H S) S^T + 2 lam H (H^T H + Psi)^-1."""
    Y, H, S = _check_shapes(Y, H, S)
    R = Y - H @ S
    L = cholesky_spd(H.T @ H + params.Psi, "H^T H + Psi")
    # (H^T H + Psi) is symmetric, so H A^-1 = (A^-1 H^T)^T
    HAinv = la.cho_solve((L, True), H.T).T
    return -2.0 * R @ S.T + 2.0 * params.lam * HAinv


def grad_S(params, Y, H, S):
    Y, H, S = _check_shapes(Y, H, S)
    return -2.0 * H.T @ (Y - H @ S)


def sigma_stationary(H, Psi, phi, M):
    """Maximiser over Sigma_h of the conditional-plus-prior log density for fixed H."""
    H = np.asarray(H, dtype=float)
    r = H.shape[1]
    return (H.T @ H + Psi) / (M + r + phi + 1.0)


def covariance_blend(H, Psi, phi, M):
    H = np.asarray(H, dtype=float)
    r = H.shape[1]
    sample_cov = H.T @ H / M
    prior_mode = np.asarray(Psi, dtype=float) / (phi + r + 1.0)
    mu = M / (M + phi + r + 1.0)
    blended = mu * sample_cov + (1.0 - mu) * prior_mode
    return CovarianceBlend(sample_cov=sample_cov, prior_mode=prior_mode, mu=mu, blended=blended)


def log_posterior_terms(H, S, Sigma, params, Y, domain=None):
    """Unnormalised log posterior of (H, S, Sigma_h) split into its four parts.

    ``source`` is 0 when every column of S is in ``domain`` (or no domain is
    given) and ``-inf`` otherwise; the uniform density's ``-log vol(D)`` is
    dropped.  The normaliser ``log f_Y(Y)`` is not included.
    """
    Y, H, S = _check_shapes(Y, H, S)
    M, N = Y.shape
    r = H.shape[1]
    sv2 = params.sigma_v2
    phi = params.phi
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Ls = cholesky_spd(Sigma, "Sigma")
    logdet_sigma = 2.0 * np.sum(np.log(np.diag(Ls)))

    R = Y - H @ S
    c1 = -M * N * np.log(np.sqrt(2 * np.pi * sv2))
    data = -np.sum(R * R) / (2 * sv2) + c1

    if domain is None or domains.contains(domain, S):
        source = 0.0
    else:
        source = -np.inf

    tr_h = np.trace(la.cho_solve((Ls, True), H.T @ H))
    conditional = -M / 2 * logdet_sigma - tr_h / 2 - M * r / 2 * np.log(2 * np.pi)

    tr_psi = np.trace(la.cho_solve((Ls, True), params.Psi))
    prior = (
        phi / 2 * logdet_spd(params.Psi, "Psi")
        - (r + phi + 1) / 2 * logdet_sigma
        - r * phi / 2 * np.log(2.0)
        - multigammaln(phi / 2, r)
        - tr_psi / 2
    )
    return LogPosteriorTerms(data=float(data), source=float(source),
                             conditional=float(conditional), prior=float(prior))


def sigma_gradient(H, Sigma, Psi, phi, M):
    """Gradient in Sigma_h of the conditional-plus-prior log density."""
    H = np.asarray(H, dtype=float)
    r = H.shape[1]
    L = cholesky_spd(Sigma, "Sigma")
    Sinv = la.cho_solve((L, True), np.eye(r))
    return -(M + r + phi + 1) / 2 * Sinv + 0.5 * Sinv @ (H.T @ H + Psi) @ Sinv
