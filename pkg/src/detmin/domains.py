"""Latent-vector domains: projection, uniform sampling and membership.

Three domains are supported:

* ``simplex``   -- the unit simplex ``{x : x >= 0, sum(x) = 1}``
* ``linf_ball`` -- the unit l-infinity ball ``{x : |x_i| <= 1}``
* ``nonneg``    -- the nonnegative orthant ``{x : x >= 0}``

Every function accepts either a single vector of length ``dim`` or a matrix
of shape ``(dim, n)`` whose columns are treated independently.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import UnsupportedDomainError

DEFAULT_TOL = 1e-9


class DomainKind(str, Enum):
    SIMPLEX = "simplex"
    LINF_BALL = "linf_ball"
    NONNEG = "nonneg"


@dataclass(frozen=True)
class DomainSpec:
    kind: DomainKind
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "kind", DomainKind(self.kind))
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"domain dimension must be a positive integer, got {self.dim!r}")
        object.__setattr__(self, "dim", int(self.dim))

    @classmethod
    def simplex(cls, dim):
        return cls(DomainKind.SIMPLEX, dim)

    @classmethod
    def linf_ball(cls, dim):
        return cls(DomainKind.LINF_BALL, dim)

    @classmethod
    def nonneg(cls, dim):
        return cls(DomainKind.NONNEG, dim)

    def to_config(self):
        return {"kind": self.kind.value, "dim": self.dim}

    @classmethod
    def from_config(cls, cfg):
        """Build from ``{"kind": token, "dim": r}`` or a bare token plus ``dim``."""
        if isinstance(cfg, str):
            raise ValueError("a bare domain token needs a dimension; use {'kind': ..., 'dim': ...}")
        try:
            return cls(DomainKind(cfg["kind"]), cfg["dim"])
        except KeyError as exc:
            raise ValueError(f"domain config is missing {exc.args[0]!r}") from None

    def __str__(self):
        return f"{self.kind.value}({self.dim})"


def _check_dim(d, x):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[0] != d.dim:
        raise ValueError(f"expected leading dimension {d.dim} for {d}, got shape {x.shape}")
    return x


def project_simplex(x):
    """Euclidean projection of the columns of ``x`` onto the unit simplex.

    Sort-based thresholding: with ``u`` sorted descending, find the largest
    ``k`` with ``u_k - (cumsum(u)_k - 1) / k > 0`` and shift by that threshold.
    """
    x = np.asarray(x, dtype=float)
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    r = X.shape[0]
    U = -np.sort(-X, axis=0)
    css = np.cumsum(U, axis=0) - 1.0
    k = np.arange(1, r + 1)[:, None]
    cond = U - css / k > 0
    # cond is True on a prefix; k=1 always satisfies it
    rho = r - np.argmax(cond[::-1], axis=0) - 1
    theta = css[rho, np.arange(X.shape[1])] / (rho + 1)
    out = np.maximum(X - theta, 0.0)
    return out[:, 0] if vec else out


def project(d, x):
    """Closest point of ``d`` to ``x`` in the Euclidean norm (column-wise)."""
    x = _check_dim(d, x)
    if d.kind is DomainKind.SIMPLEX:
        return project_simplex(x)
    if d.kind is DomainKind.LINF_BALL:
        return np.clip(x, -1.0, 1.0)
    return np.maximum(x, 0.0)


def sample_uniform(d, n, rng):
    """Draw ``n`` i.i.d. uniform points of ``d`` as the columns of a ``(dim, n)`` array.

    The simplex sampler normalises i.i.d. standard exponentials, which gives
    the flat Dirichlet law exactly.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    if d.kind is DomainKind.LINF_BALL:
        return rng.uniform(-1.0, 1.0, size=(d.dim, n))
    if d.kind is DomainKind.SIMPLEX:
        E = rng.standard_exponential(size=(d.dim, n))
        return E / E.sum(axis=0, keepdims=True)
    raise UnsupportedDomainError(f"no uniform distribution on {d}")


def contains(d, x, tol=DEFAULT_TOL):
    """True iff every column of ``x`` satisfies the domain constraints within ``tol``."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    x = _check_dim(d, x)
    if d.kind is DomainKind.LINF_BALL:
        return bool(np.all(np.abs(x) <= 1.0 + tol))
    nonneg = bool(np.all(x >= -tol))
    if d.kind is DomainKind.NONNEG:
        return nonneg
    return nonneg and bool(np.all(np.abs(x.sum(axis=0) - 1.0) <= tol))


def source_moments(d):
    """Mean and covariance of the uniform law on ``d``."""
    r = d.dim
    if d.kind is DomainKind.LINF_BALL:
        return np.zeros(r), np.eye(r) / 3.0
    if d.kind is DomainKind.SIMPLEX:
        # flat Dirichlet(1, ..., 1)
        return np.full(r, 1.0 / r), (np.eye(r) / r - np.ones((r, r)) / r**2) / (r + 1)
    raise UnsupportedDomainError(f"no uniform distribution on {d}")
