"""Recovery metrics: ambiguity-resolving alignment, SINR and the LMMSE benchmark."""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.optimize import linear_sum_assignment

from .domains import DomainKind, source_moments
from .errors import NumericalError

SINR_CAP_DB = 200.0


@dataclass
class Alignment:
    """Signed permutation mapping estimated rows onto reference rows.

    Row ``i`` of the aligned estimate is ``signs[i] * S_est[perm[i]]``
    (times ``gain[i]`` when gains are enabled).
    """

    perm: np.ndarray
    signs: np.ndarray
    gain: np.ndarray = None
    zero_variance_rows: list = field(default_factory=list)

    def apply(self, S_est):
        S_est = np.asarray(S_est, dtype=float)
        out = self.signs[:, None] * S_est[self.perm]
        if self.gain is not None:
            out = self.gain[:, None] * out
        return out

    @property
    def is_identity(self):
        return bool(np.all(self.perm == np.arange(self.perm.size)) and np.all(self.signs == 1)
                    and (self.gain is None or np.allclose(self.gain, 1.0)))


def _row_correlations(A, B):
    """Pearson correlation between every row of A and every row of B.

    Constant rows get correlation 0; their indices are returned alongside.
    """
    Ac = A - A.mean(axis=1, keepdims=True)
    Bc = B - B.mean(axis=1, keepdims=True)
    na = np.linalg.norm(Ac, axis=1)
    nb = np.linalg.norm(Bc, axis=1)
    # exact test on the range: centring a constant row can leave rounding noise
    flat_a = np.ptp(A, axis=1) == 0
    flat_b = np.ptp(B, axis=1) == 0
    C = (Ac @ Bc.T) / np.outer(np.where(flat_a, 1.0, na), np.where(flat_b, 1.0, nb))
    C[flat_a, :] = 0.0
    C[:, flat_b] = 0.0
    return C, np.flatnonzero(flat_b).tolist()


def align(S_ref, S_est, domain, gain=False):
    """Signed permutation of the rows of ``S_est`` that best matches ``S_ref``.

    Rows are matched by optimal assignment on |correlation|.  Sign flips are
    only allowed for the l-infinity ball; for the simplex and the orthant
    the assignment uses the signed correlation and all signs are +1.
    """
    S_ref = np.asarray(S_ref, dtype=float)
    S_est = np.asarray(S_est, dtype=float)
    if S_ref.shape != S_est.shape:
        raise ValueError(f"shape mismatch: {S_ref.shape} vs {S_est.shape}")
    C, flat = _row_correlations(S_ref, S_est)
    signed = domain.kind is DomainKind.LINF_BALL
    score = np.abs(C) if signed else C
    rows, cols = linear_sum_assignment(score, maximize=True)
    perm = cols[np.argsort(rows)]
    r = S_ref.shape[0]
    if signed:
        signs = np.where(C[np.arange(r), perm] < 0, -1, 1)
    else:
        signs = np.ones(r, dtype=int)
    al = Alignment(perm=perm, signs=signs, zero_variance_rows=flat)
    if gain:
        A = al.apply(S_est)
        den = np.sum(A * A, axis=1)
        g = np.where(den > 0, np.sum(S_ref * A, axis=1) / np.where(den > 0, den, 1.0), 1.0)
        al.gain = np.maximum(g, 0.0)
    return al


def sinr_db(S_ref, S_est_aligned, cap=SINR_CAP_DB):
    """10 log10(||S_ref||^2 / ||S_ref - S_est||^2); ``cap`` when the error is zero."""
    S_ref = np.asarray(S_ref, dtype=float)
    S_est_aligned = np.asarray(S_est_aligned, dtype=float)
    if S_ref.shape != S_est_aligned.shape:
        raise ValueError(f"shape mismatch: {S_ref.shape} vs {S_est_aligned.shape}")
    signal = np.sum(S_ref * S_ref)
    if signal == 0:
        raise ValueError("reference sources are identically zero")
    err = np.sum((S_ref - S_est_aligned) ** 2)
    if err == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(signal / err)))


def aligned_sinr_db(S_ref, S_est, domain):
    return sinr_db(S_ref, align(S_ref, S_est, domain).apply(S_est))


def lmmse_estimate(Y, H_g, sigma_v2, domain):
    """Linear MMSE estimate of the sources given the true mixing matrix and noise level.

    ``mean + Cov_s H^T (H Cov_s H^T + sigma_v2 I)^-1 (Y - H mean)`` with the
    moments of the uniform law on ``domain``.  At ``sigma_v2 = 0`` the
    innovation matrix is rank deficient and is solved in the least-squares
    sense.
    """
    Y = np.asarray(Y, dtype=float)
    H = np.asarray(H_g, dtype=float)
    if sigma_v2 < 0:
        raise ValueError("sigma_v2 must be nonnegative")
    if H.shape[1] != domain.dim or H.shape[0] != Y.shape[0]:
        raise ValueError(f"incompatible shapes H{H.shape}, Y{Y.shape} for {domain}")
    mean, cov = source_moments(domain)
    M = H.shape[0]
    innov = H @ cov @ H.T + sigma_v2 * np.eye(M)
    centred = Y - (H @ mean)[:, None]
    if sigma_v2 > 0:
        try:
            X = la.cho_solve(la.cho_factor(innov, lower=True), centred)
        except la.LinAlgError:
            raise NumericalError("innovation covariance is singular",
                                 min_eigenvalue=float(np.linalg.eigvalsh(innov)[0])) from None
    else:
        X = np.linalg.lstsq(innov, centred, rcond=None)[0]
    return mean[:, None] + cov @ H.T @ X
