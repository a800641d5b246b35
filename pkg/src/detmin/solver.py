"""Block coordinate descent for the MAP objective.

Each outer iteration runs a few accelerated projected-gradient steps on S
(convex quadratic, columns projected onto the domain) followed by a few
accelerated gradient steps on H (smooth, nonconvex).  Both inner loops use
the same :func:`nesterov_loop`.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.linalg as la

from . import domains
from .errors import NumericalError
from .objective import cholesky_spd, evaluate

log = logging.getLogger(__name__)

MIN_STEP = 1e-18
ROUNDING_SLACK = 1e-14


class StepRule(str, Enum):
    LIPSCHITZ = "lipschitz"
    BACKTRACKING = "backtracking"


class Init(str, Enum):
    SVD = "svd"
    RANDOM = "random"
    PROVIDED = "provided"


@dataclass
class SolverConfig:
    max_outer_iters: int = 500
    inner_iters_H: int = 50
    inner_iters_S: int = 50
    rel_obj_tol: float = 1e-8
    step_rule: StepRule = StepRule.BACKTRACKING
    shrink: float = 0.5
    max_tries: int = 60
    init: Init = Init.SVD
    init_scale: float = 1.0
    carry_momentum: bool = True
    extrapolation: float = 0.5
    continuation_factor: float = 10.0
    continuation_decay: float = 0.5
    warmup_iters_per_stage: int = 200
    warmup_tol: float = 1e-8
    H0: np.ndarray = field(default=None, repr=False)
    S0: np.ndarray = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        self.step_rule = StepRule(self.step_rule)
        self.init = Init(self.init)
        if not self.rel_obj_tol > 0:
            raise ValueError("rel_obj_tol must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        for name in ("max_outer_iters", "inner_iters_H", "inner_iters_S", "max_tries"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.continuation_factor < 0:
            raise ValueError("continuation_factor must be nonnegative")
        if not 0 < self.continuation_decay < 1:
            raise ValueError("continuation_decay must lie in (0, 1)")
        if self.init is Init.PROVIDED and (self.H0 is None or self.S0 is None):
            raise ValueError("provided initialisation needs both H0 and S0")

    _SERIAL = ("max_outer_iters", "inner_iters_H", "inner_iters_S", "rel_obj_tol",
               "step_rule", "shrink", "max_tries", "init", "init_scale", "carry_momentum", "extrapolation",
               "continuation_factor", "continuation_decay", "warmup_iters_per_stage",
               "warmup_tol", "seed")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self._SERIAL}
        d["step_rule"] = self.step_rule.value
        d["init"] = self.init.value
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls._SERIAL)
        if unknown:
            raise ValueError(f"unknown solver option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitResult:
    H_hat: np.ndarray
    S_hat: np.ndarray
    objective_trace: list
    converged: bool
    outer_iters_used: int
    objective_init: float = None
    warmup_iters: int = 0
    stationarity_S: float = None
    stationarity_H: float = None


@dataclass
class LoopInfo:
    value: float
    step: float
    restarts: int = 0
    backtracks: int = 0
    momentum: tuple = None


def nesterov_loop(x0, grad_fn, project_fn=None, step=1.0, iters=50, *, f=None,
                  backtracking=False, shrink=0.5, max_tries=60, momentum=None):
    """Accelerated (projected) gradient descent from a feasible ``x0``.

    Momentum follows ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`` with the
    extrapolation ``y = x_k + (t_k - 1) / t_{k+1} * (x_k - x_{k-1})``.

    With ``backtracking`` the step shrinks until the quadratic upper bound
    holds at the trial point, and an increase of ``f`` over the current
    iterate triggers a momentum restart (the step is redone from ``x_k``),
    so accepted values of ``f`` never increase.  Without it the step is
    fixed and momentum is restarted on the gradient criterion.

    ``momentum`` is an optional ``(x_prev, t)`` pair to resume from; the
    final pair is returned in ``LoopInfo.momentum``.

    Returns ``(x, LoopInfo)``.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if backtracking and f is None:
        raise ValueError("backtracking needs the objective f")
    proj = project_fn if project_fn is not None else (lambda z: z)
    x = np.array(x0, dtype=float)
    x_prev, t = (x, 1.0) if momentum is None else momentum
    info = LoopInfo(value=f(x) if f is not None else np.nan, step=step)

    def trial(y, fy, gy):
        nonlocal step
        for _ in range(max_tries):
            z = proj(y - step * gy)
            if not backtracking:
                return z, None
            d = z - y
            dd = np.vdot(d, d)
            if dd == 0.0:
                return y, fy
            fz = f(z)
            # relative slack absorbs rounding in f once the model decrease is ~eps
            bound = fy + np.vdot(gy, d) + dd / (2 * step) + ROUNDING_SLACK * abs(fy)
            if np.isfinite(fz) and fz <= bound:
                return z, fz
            step *= shrink
            info.backtracks += 1
            if step < MIN_STEP:
                break
        raise NumericalError("step size collapsed during backtracking", step=step, last_x=x)

    for _ in range(iters):
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = x + ((t - 1.0) / t_next) * (x - x_prev)
        if backtracking:
            fy = info.value if t == 1.0 else f(y)
            z, fz = trial(y, fy, grad_fn(y))
            if fz > info.value:
                info.restarts += 1
                t_next = 1.0
                z, fz = trial(x, info.value, grad_fn(x))
                if fz > info.value:
                    z, fz = x, info.value
            x_prev, x = x, z
            info.value = fz
        else:
            z, _ = trial(y, None, grad_fn(y))
            if np.vdot(y - z, z - x) > 0:
                info.restarts += 1
                t_next = 1.0
            x_prev, x = x, z
        t = t_next
    if not backtracking and f is not None:
        info.value = f(x)
    info.step = step
    info.momentum = (x_prev, t)
    return x, info


def step_size_S(H):
    """1 / L for the S-block gradient, L = 2 * lambda_max(H^T H); inf when H = 0."""
    H = np.asarray(H, dtype=float)
    L = 2.0 * np.linalg.norm(H, 2) ** 2
    return np.inf if L == 0 else 1.0 / L


def _lipschitz_H(S, Psi, lam):
    # data curvature plus a bound on the log-det curvature, 4 lam / lambda_min(Psi)
    psi_min = np.linalg.eigvalsh(Psi)[0]
    return 2.0 * np.linalg.norm(S, 2) ** 2 + 4.0 * lam / psi_min


def initialize(Y, domain, cfg, rng):
    """Starting (H, S) per ``cfg.init``.

    The SVD start takes the leading r left singular vectors scaled by their
    singular values, then rescales the pair so the projected S fills the
    domain instead of collapsing near the origin.
    """
    M, N = Y.shape
    r = domain.dim
    if cfg.init is Init.PROVIDED:
        H0 = np.array(cfg.H0, dtype=float)
        S0 = np.array(cfg.S0, dtype=float)
        if H0.shape != (M, r) or S0.shape != (r, N):
            raise ValueError(f"provided init must be H0 {M}x{r} and S0 {r}x{N}")
        return H0, domains.project(domain, S0)
    if cfg.init is Init.RANDOM:
        H0 = cfg.init_scale * rng.standard_normal((M, r))
        S0 = domains.project(domain, cfg.init_scale * rng.standard_normal((r, N)))
        return H0, S0
    U, sv, Vt = np.linalg.svd(Y, full_matrices=False)
    H0 = U[:, :r] * sv[:r]
    C = Vt[:r]
    peak = np.max(np.abs(C))
    if peak > 0:
        if domain.kind is domains.DomainKind.SIMPLEX:
            c = 1.0 / max(np.max(np.abs(C.sum(axis=0))), peak)
        else:
            c = 1.0 / peak
        H0 = H0 / c
        C = C * c
    return H0, domains.project(domain, C)


def stationarity(params, Y, H, S, domain):
    """(projected-gradient norm of the S block, gradient norm of the H block)."""
    R = Y - H @ S
    gS = -2.0 * H.T @ R
    eta = step_size_S(H)
    if np.isfinite(eta):
        pg_S = np.linalg.norm(S - domains.project(domain, S - eta * gS)) / eta
    else:
        pg_S = 0.0
    L = cholesky_spd(H.T @ H + params.Psi)
    gH = -2.0 * R @ S.T + 2.0 * params.lam * la.cho_solve((L, True), H.T).T
    return pg_S, np.linalg.norm(gH)


def _sweeps(Y, domain, params, cfg, H, S, max_iters, tol):
    """Alternate S and H blocks until the relative objective change drops below tol."""
    backtrack = cfg.step_rule is StepRule.BACKTRACKING
    Psi, lam, beta = params.Psi, params.lam, params.beta
    proj_S = lambda Z: domains.project(domain, Z)
    mom_S = mom_H = None
    J_cur = evaluate(params, Y, H, S)
    trace = []
    converged = False
    k = 0
    H_last, S_last = H, S
    beta_x, beta_cap = cfg.extrapolation, 1.0
    for k in range(1, max_iters + 1):
        H_ok, S_ok = H, S  # last iterate with a finite objective
        try:
            eta_S = step_size_S(H)
            if np.isfinite(eta_S):
                HtH, HtY = H.T @ H, H.T @ Y
                fS = lambda Z: float(np.sum((Y - H @ Z) ** 2))
                S, info_S = nesterov_loop(
                    S, lambda Z: 2.0 * (HtH @ Z - HtY), proj_S, eta_S, cfg.inner_iters_S,
                    f=fS if backtrack else None, backtracking=backtrack,
                    shrink=cfg.shrink, max_tries=cfg.max_tries, momentum=mom_S)
                if cfg.carry_momentum:
                    mom_S = info_S.momentum

            SSt, YSt = S @ S.T, Y @ S.T

            # same arithmetic as objective.evaluate, so accepted values match the trace bitwise
            def fH(Hn):
                R = Y - Hn @ S
                G = (Hn.T @ Hn + Psi) / beta
                try:
                    ld = 2.0 * np.sum(np.log(np.diag(la.cholesky(G, lower=True))))
                except la.LinAlgError:
                    return np.inf
                return float(np.sum(R * R) + lam * ld)

            def gH(Hn):
                A = Hn.T @ Hn + Psi
                return 2.0 * (Hn @ SSt - YSt) + 2.0 * lam * la.cho_solve(
                    (cholesky_spd(A, "H^T H + Psi"), True), Hn.T).T

            if backtrack:
                # optimistic start: data curvature plus the log-det curvature
                # 2 lam / lambda_max(H^T H + Psi) seen along H itself
                L_ld = 2.0 * lam / np.linalg.eigvalsh(H.T @ H + Psi)[-1]
                eta_H = 1.0 / (2.0 * np.linalg.norm(SSt, 2) + L_ld)
            else:
                eta_H = 1.0 / _lipschitz_H(S, Psi, lam)
            H, info_H = nesterov_loop(
                H, gH, None, eta_H, cfg.inner_iters_H,
                f=fH if backtrack else None, backtracking=backtrack,
                shrink=cfg.shrink, max_tries=cfg.max_tries, momentum=mom_H)
            if cfg.carry_momentum:
                mom_H = info_H.momentum
        except NumericalError as exc:
            exc.diagnostics["H"] = H_ok
            exc.diagnostics["S"] = S_ok
            exc.diagnostics["outer_iter"] = k
            raise

        J_new = evaluate(params, Y, H, S)
        if not np.isfinite(J_new):
            raise NumericalError("objective became non-finite", H=H_ok, S=S_ok, outer_iter=k)
        if beta_x > 0:
            # sweep-level extrapolation, kept only when it lowers J
            H_e = H + beta_x * (H - H_last)
            S_e = proj_S(S + beta_x * (S - S_last))
            try:
                J_e = evaluate(params, Y, H_e, S_e)
            except NumericalError:
                J_e = np.inf
            H_last, S_last = H, S
            if J_e < J_new:
                H, S, J_new = H_e, S_e, J_e
                beta_x = min(beta_cap, beta_x * 1.05)
                beta_cap = min(1.0, beta_cap * 1.01)
            else:
                beta_cap = beta_x
                beta_x = beta_x / 1.5
        trace.append(J_new)
        change = abs(J_cur - J_new)
        J_cur = J_new
        # J can sit near zero (log-det ~ 0, tiny residual); lam keeps the scale honest
        if change <= tol * (abs(J_new) + lam):
            converged = True
            break
    return H, S, trace, converged, k


def continuation_schedule(lam, factor, decay):
    """Decreasing regularisation weights ending exactly at ``lam``."""
    lams = []
    cur = lam * factor
    while cur > lam * (1 + 1e-12):
        lams.append(cur)
        cur *= decay
    return lams + [lam]


def fit(Y, domain, params, cfg=None):
    """Minimise J(H, S) over H and columns of S in ``domain``.

    Unless ``cfg.continuation_factor`` is 0, the weight of the log-det term
    starts at ``continuation_factor * ||Y||_F^2 / N`` (when that exceeds the
    target) and is halved, by default, stage by stage; each warm-up stage
    starts where the previous one stopped.  Starting with a heavy log-det
    weight pulls the SVD start towards a well-spread basis, which the
    target weight alone moves along only very slowly.  Only the last stage, run
    with the requested weight, is reported in ``objective_trace``.
    """
    cfg = cfg or SolverConfig()
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("Y must be a matrix")
    M, N = Y.shape
    r = domain.dim
    if r > min(M, N):
        raise ValueError(f"need r <= min(M, N), got r={r} for Y of shape {Y.shape}")
    if params.M != M or params.r != r:
        raise ValueError("objective parameters do not match the data dimensions")
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite entries")

    with np.errstate(over="ignore", invalid="ignore"):
        energy = np.sum(Y * Y)
    if not np.isfinite(energy):
        raise NumericalError("squared norm of Y overflows", H=None, S=None)
    rng = np.random.default_rng(cfg.seed)
    H, S = initialize(Y, domain, cfg, rng)

    warmup_iters = 0
    lam_start = max(params.lam, cfg.continuation_factor * energy / N)
    lams = continuation_schedule(params.lam, lam_start / params.lam, cfg.continuation_decay)
    for lam_k in lams[:-1]:
        stage = replace(params, lam_override=lam_k)
        H, S, _, _, k = _sweeps(Y, domain, stage, cfg, H, S,
                                cfg.warmup_iters_per_stage, cfg.warmup_tol)
        warmup_iters += k

    J_init = evaluate(params, Y, H, S)
    if not np.isfinite(J_init):
        raise NumericalError("objective is not finite at the starting point", H=H, S=S)
    H, S, trace, converged, k = _sweeps(Y, domain, params, cfg, H, S,
                                        cfg.max_outer_iters, cfg.rel_obj_tol)
    log.debug("fit finished after %d + %d outer iterations (converged=%s, J=%.6g)",
              warmup_iters, k, converged, trace[-1])
    pg_S, g_H = stationarity(params, Y, H, S, domain)
    return FitResult(H_hat=H, S_hat=S, objective_trace=trace, converged=converged,
                     outer_iters_used=k, objective_init=J_init, warmup_iters=warmup_iters,
                     stationarity_S=float(pg_S), stationarity_H=float(g_H))
