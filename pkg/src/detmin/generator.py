"""Synthetic data from the Bayesian structured-factorization model.

    Sigma_h ~ IW(Psi, phi)          (or fixed, see ``HRowCovariance``)
    rows of H_g ~ N(0, Sigma_h)
    columns of S_g ~ Uniform(D)
    V_g_ij ~ N(0, sigma_v2)
    Y = H_g S_g + V_g
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg as la

from . import domains
from .domains import DomainSpec


class HRowCovariance(str, Enum):
    IDENTITY = "identity"
    SAMPLE_INVERSE_WISHART = "inverse_wishart"
    EXPLICIT = "explicit"


def _as_spd(A, name):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    try:
        L = la.cholesky(A, lower=True)
    except la.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None
    return A, L


@dataclass
class ModelParams:
    M: int
    r: int
    N: int
    sigma_v2: float
    Psi: np.ndarray
    phi: float
    domain: DomainSpec
    h_cov: HRowCovariance = HRowCovariance.IDENTITY
    Sigma_h: np.ndarray = None  # only read in EXPLICIT mode

    def __post_init__(self):
        self.h_cov = HRowCovariance(self.h_cov)
        for name in ("M", "r", "N"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            setattr(self, name, int(v))
        if self.r > min(self.M, self.N):
            raise ValueError(f"need r <= min(M, N), got r={self.r}, M={self.M}, N={self.N}")
        if self.sigma_v2 < 0:
            raise ValueError("sigma_v2 must be nonnegative")
        if self.domain.dim != self.r:
            raise ValueError(f"domain dimension {self.domain.dim} != r={self.r}")
        self.Psi, _ = _as_spd(self.Psi, "Psi")
        if self.Psi.shape[0] != self.r:
            raise ValueError(f"Psi must be {self.r}x{self.r}")
        if self.h_cov is HRowCovariance.SAMPLE_INVERSE_WISHART and not self.phi > self.r - 1:
            raise ValueError(f"inverse-Wishart sampling needs phi > r - 1, got phi={self.phi}")
        if self.h_cov is HRowCovariance.EXPLICIT:
            if self.Sigma_h is None:
                raise ValueError("explicit covariance mode needs Sigma_h")
            self.Sigma_h, _ = _as_spd(self.Sigma_h, "Sigma_h")
            if self.Sigma_h.shape[0] != self.r:
                raise ValueError(f"Sigma_h must be {self.r}x{self.r}")

    def to_dict(self):
        d = {
            "M": self.M,
            "r": self.r,
            "N": self.N,
            "sigma_v2": float(self.sigma_v2),
            "Psi": self.Psi.tolist(),
            "phi": float(self.phi),
            "domain": self.domain.kind.value,
            "h_cov": self.h_cov.value,
        }
        if self.h_cov is HRowCovariance.EXPLICIT:
            d["Sigma_h"] = self.Sigma_h.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        """Inverse of :meth:`to_dict`.

        ``Psi`` may be replaced by ``rho``, in which case the scale matrix is
        ``rho * (phi + r + 1) * I``.
        """
        try:
            r = int(d["r"])
            phi = float(d["phi"])
            if "Psi" in d:
                Psi = np.asarray(d["Psi"], dtype=float)
            else:
                Psi = psi_from_rho(float(d["rho"]), phi, r)
            return cls(
                M=d["M"],
                r=r,
                N=d["N"],
                sigma_v2=float(d["sigma_v2"]),
                Psi=Psi,
                phi=phi,
                domain=DomainSpec(d.get("domain", "linf_ball"), r),
                h_cov=d.get("h_cov", "identity"),
                Sigma_h=d.get("Sigma_h"),
            )
        except KeyError as exc:
            raise ValueError(f"model config is missing {exc.args[0]!r}") from None


@dataclass
class GeneratedData:
    Y: np.ndarray
    H_g: np.ndarray
    S_g: np.ndarray
    Sigma_h: np.ndarray
    V_g: np.ndarray = field(repr=False)

    def save_csv(self, directory):
        """Write each block to ``<directory>/<name>.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("Y", "H_g", "S_g", "Sigma_h", "V_g"):
            save_matrix_csv(directory / f"{name}.csv", getattr(self, name))


def save_matrix_csv(path, A):
    """Row-major CSV with a ``# shape R C`` header line."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    np.savetxt(path, A, delimiter=",", fmt="%.17g", header=f"shape {A.shape[0]} {A.shape[1]}")


def load_matrix_csv(path):
    with open(path) as fh:
        header = fh.readline()
    parts = header.lstrip("#").split()
    if len(parts) != 3 or parts[0] != "shape":
        raise ValueError(f"{path}: missing '# shape R C' header")
    shape = (int(parts[1]), int(parts[2]))
    A = np.loadtxt(path, delimiter=",", ndmin=2)
    if A.shape != shape:
        raise ValueError(f"{path}: header says {shape}, found {A.shape}")
    return A


def psi_from_rho(rho, phi, r):
    """Scale matrix ``rho * (phi + r + 1) * I_r``; its prior mode is ``rho * I``."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho!r}")
    return rho * (phi + r + 1) * np.eye(r)


def _bartlett_factor(r, dof, rng):
    """Lower-triangular ``A`` with ``A A^T ~ Wishart(I_r, dof)``."""
    A = np.zeros((r, r))
    A[np.diag_indices(r)] = np.sqrt(rng.chisquare(dof - np.arange(r)))
    A[np.tril_indices(r, -1)] = rng.standard_normal(r * (r - 1) // 2)
    return A


def sample_wishart(scale, dof, rng):
    """One Wishart(scale, dof) draw via the Bartlett decomposition."""
    scale, L = _as_spd(scale, "scale")
    r = scale.shape[0]
    if not dof > r - 1:
        raise ValueError(f"Wishart needs dof > r - 1, got dof={dof}, r={r}")
    LA = L @ _bartlett_factor(r, dof, rng)
    return LA @ LA.T


def sample_inverse_wishart(Psi, phi, rng):
    """One draw from IW(Psi, phi), the law of ``W^-1`` for ``W ~ Wishart(Psi^-1, phi)``.

    With ``Psi = C C^T`` the factor ``C^-T`` is a square root of ``Psi^-1``, so
    ``W = C^-T A A^T C^-1`` for a Bartlett factor ``A`` and
    ``W^-1 = (C A^-T)(C A^-T)^T``: one triangular solve, no explicit inverse.
    """
    Psi, C = _as_spd(Psi, "Psi")
    r = Psi.shape[0]
    if not phi > r - 1:
        raise ValueError(f"inverse-Wishart needs phi > r - 1, got phi={phi}, r={r}")
    A = _bartlett_factor(r, phi, rng)
    B = la.solve_triangular(A, C.T, lower=True).T
    Sigma = B @ B.T
    return 0.5 * (Sigma + Sigma.T)


def generate(p, rng):
    """Draw one data set from the model described by ``p``."""
    if p.h_cov is HRowCovariance.IDENTITY:
        Sigma_h = np.eye(p.r)
    elif p.h_cov is HRowCovariance.SAMPLE_INVERSE_WISHART:
        Sigma_h = sample_inverse_wishart(p.Psi, p.phi, rng)
    else:
        Sigma_h = p.Sigma_h.copy()
    Lh = la.cholesky(Sigma_h, lower=True)
    H_g = rng.standard_normal((p.M, p.r)) @ Lh.T
    S_g = domains.sample_uniform(p.domain, p.N, rng)
    V_g = np.sqrt(p.sigma_v2) * rng.standard_normal((p.M, p.N))
    Y = H_g @ S_g + V_g
    return GeneratedData(Y=Y, H_g=H_g, S_g=S_g, Sigma_h=Sigma_h, V_g=V_g)
