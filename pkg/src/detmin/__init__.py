"""Determinant-regularised structured matrix factorisation with a MAP objective."""

from .domains import DomainKind, DomainSpec
from .errors import NumericalError, UnsupportedDomainError
from .generator import GeneratedData, HRowCovariance, ModelParams, generate, psi_from_rho
from .metrics import Alignment, align, lmmse_estimate, sinr_db
from .objective import ObjectiveParams, evaluate, grad_H, grad_S
from .solver import FitResult, SolverConfig, fit

__version__ = "0.1.0"
