"""Double-loop variational bounding for the sparse linear model.

Outer loop: marginal variances ``z = diag(G A^{-1} G^T)`` at the current
``gamma`` (Monte-Carlo, Lanczos, or dense). Inner loop: minimise the
smoothed MAP objective

    phi(x; z) = ||y - H x||^2 / sigma2 - 2 sum_k log t_k(sqrt(s_k^2 + z_k)),   s = G x

by L-BFGS, then read off ``1/gamma_k = -2 d log t_k(sqrt(v)) / dv`` at
``v = s_k^2 + z_k``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import streams
from .gmrf import (
    DENSE_MAX_DIM,
    HighVarianceWarning,
    SolverConfig,
    assemble_system,
    clip_variances,
    exact_logdet_dense,
    exact_variances_dense,
    mc_logdet,
    mc_variances,
    posterior_mean,
)
from .potentials import gamma_update, h_dual
from .solvers import lanczos_variance, lm_quasi_newton_minimize

logger = logging.getLogger(__name__)

VARIANCE_MODES = ("mc", "lanczos", "exact")


class VbDivergenceError(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class VbConfig:
    outer_iters: int = 6
    n_samples: int = 20
    inner_grad_tol: float = 1e-5
    inner_max_iter: int = 1000
    variance_mode: str = "mc"
    solver: SolverConfig = field(default_factory=SolverConfig.fixed)
    mean_solver: SolverConfig = field(default_factory=lambda: SolverConfig.tolerance(1e-9, 3000))
    lanczos_iters: int | None = None
    seed: int = 0
    gamma_clamp: tuple = (1e-8, 1e8)
    z_floor: float = 1e-10
    track_free_energy: bool = True
    inner_precondition: bool = False
    max_dense: int = DENSE_MAX_DIM
    divergence_rel: float = 0.10

    def __post_init__(self):
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
        if self.outer_iters < 1 or self.n_samples < 1 or self.inner_max_iter < 1:
            raise ValueError("iteration and sample counts must be positive")

    @property
    def lanczos_budget(self):
        # matched to Monte-Carlo cost in operator applications
        if self.lanczos_iters is not None:
            return self.lanczos_iters
        return self.n_samples * self.solver.max_iter


@dataclass
class FreeEnergyTerms:
    logdet: float
    h: float
    R: float

    @property
    def phi(self):
        return self.logdet + self.h + self.R

    def as_dict(self):
        d = asdict(self)
        d["phi"] = self.phi
        return d


@dataclass
class VariationalState:
    gamma: np.ndarray
    z: np.ndarray
    x: np.ndarray
    trace: list = field(default_factory=list)
    outer_iter: int = 0
    inner_iters: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    batch: object = None

    @property
    def phi(self):
        return [t.phi for t in self.trace]


def map_objective(model, x):
    """``||y - H x||^2 / sigma2 - 2 sum log t(G x)``."""
    r = model.H.forward(x) - model.y
    return float(r @ r / model.sigma2 - 2.0 * np.sum(model.potential.log_t(model.G.forward(x))))


def smoothed_objective(model, z):
    """Return ``x -> (value, gradient)`` of the smoothed MAP objective for fixed ``z``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("z must be non-negative")
    pot = model.potential
    s2 = model.sigma2

    def fg(x):
        r = model.H.forward(x) - model.y
        s = model.G.forward(x)
        v = s * s + z
        f = float(r @ r) / s2 + float(np.sum(pot.neg2_log_t_sqrt(v)))
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(v > 0, 2.0 * pot.gamma_inv(np.where(v > 0, v, 1.0)) * s, 0.0)
        g = 2.0 * model.H.adjoint(r) / s2 + model.G.adjoint(w)
        return f, g

    return fg


def _scaled(fg, c):
    def f(x):
        v, g = fg(x)
        return c * v, c * g

    return f


def _h0_from(precond):
    if precond is None:
        return None
    # Hessian of the scaled objective ~ sigma2 * A
    return lambda q: precond.solve(q)


def _gamma_from(model, x, z, clamp):
    s = model.G.forward(x)
    ginv = gamma_update(model.potential, s * s + z)
    return np.clip(1.0 / ginv, *clamp)


def inner_loop(model, z, x0, cfg: VbConfig | None = None, precond=None):
    """Minimise the smoothed objective from ``x0``; return ``(x, gamma, MinimizeResult)``.

    ``cfg.z_floor`` is added to ``z`` so the objective is differentiable.
    The optimiser sees the objective times ``sigma2 / 2`` (data-fit units),
    which is what ``cfg.inner_grad_tol`` refers to; ``res.fun`` is in
    those units too.
    """
    cfg = cfg or VbConfig()
    z_eff = np.asarray(z, float) + cfg.z_floor
    res = lm_quasi_newton_minimize(
        _scaled(smoothed_objective(model, z_eff), 0.5 * model.sigma2), x0, grad_tol=cfg.inner_grad_tol,
        max_iter=cfg.inner_max_iter,
        h0_inverse=_h0_from(precond) if cfg.inner_precondition else None,
    )
    if res.warning:
        logger.info("inner loop: %s", res.warning)
    return res.x, _gamma_from(model, res.x, z_eff, cfg.gamma_clamp), res


def outer_loop_update(system, cfg: VbConfig | None = None, outer_index=0, precond=None):
    """Marginal variances of ``G x`` at the system's ``gamma``. Returns ``(z, batch)``.

    ``batch`` is the Monte-Carlo sample batch (``None`` for other modes).
    """
    cfg = cfg or VbConfig()
    G = system.model.G
    if cfg.variance_mode == "mc":
        z_hat, batch = mc_variances(system, cfg.n_samples, cfg.solver, seed=cfg.seed,
                                    stage=(streams.STAGE_VARIANCE, outer_index), precond=precond)
        return clip_variances(z_hat, system.gamma), batch
    if cfg.variance_mode == "lanczos":
        seed = streams.stage_seed(cfg.seed, streams.STAGE_LANCZOS, outer_index)
        res = lanczos_variance(system.as_operator(), G, cfg.lanczos_budget, seed=seed)
        return res.variances, None
    return exact_variances_dense(system, cfg.max_dense), None


def free_energy(state, system, precond=None, batch=None, logdet=None, x_mean=None,
                mean_cfg: SolverConfig | None = None) -> FreeEnergyTerms:
    """``log|A| + sum_k h_k(gamma_k) + min_x R(x, gamma)`` at the system's ``gamma``.

    ``log|A|`` comes from ``mc_logdet(batch, ...)`` unless ``logdet`` is
    given. The minimiser of ``R`` is the Gaussian mean ``A^{-1} b``, solved
    here unless ``x_mean`` is supplied.
    """
    m = system.model
    if logdet is None:
        if batch is None or precond is None:
            raise ValueError("need a sample batch and a preconditioner, or an explicit logdet")
        logdet = mc_logdet(batch, system, precond)
    if x_mean is None:
        x_mean, _ = posterior_mean(system, mean_cfg, precond=precond)
    r = m.y - m.H.forward(x_mean)
    s = m.G.forward(x_mean)
    R = float(r @ r / m.sigma2 + s @ (system.gamma_inv * s))
    h = float(np.sum(h_dual(m.potential, system.gamma)))
    return FreeEnergyTerms(float(logdet), h, R)


def initial_gamma(model):
    # scale-matched to a unit response; uniform, so the first preconditioner is exact
    return np.full(model.K, 1.0 / float(np.mean(model.potential.gamma_inv(1.0))))


def _record(state, system, cfg, precond, batch, index):
    if cfg.variance_mode == "exact":
        logdet = exact_logdet_dense(system, cfg.max_dense)
    else:
        if batch is None:
            batch = _draw_for_logdet(system, cfg, precond, index)
        logdet = np.nan
        if precond is not None:
            # masked or strongly non-stationary systems give a noisy estimate; note it once per entry
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", HighVarianceWarning)
                logdet = mc_logdet(batch, system, precond)
            if caught:
                state.warnings.append(f"outer {index}: {caught[0].message}")
    terms = free_energy(state, system, precond, batch, logdet=logdet, mean_cfg=cfg.mean_solver)
    state.trace.append(terms)
    logger.info("outer %d: phi=%.6e (logdet=%.6e h=%.6e R=%.6e)", index, terms.phi,
                terms.logdet, terms.h, terms.R)
    return batch


def _draw_for_logdet(system, cfg, precond, index):
    from .gmrf import draw_samples

    return draw_samples(system, max(2, cfg.n_samples), cfg.solver, seed=cfg.seed,
                        stage=(streams.STAGE_VARIANCE, index), precond=precond)


def vb_fit(model, cfg: VbConfig | None = None, init: VariationalState | None = None, callback=None):
    """Run the double loop for ``cfg.outer_iters`` outer iterations.

    With ``track_free_energy`` the trace holds one ``FreeEnergyTerms`` per
    outer iteration (at the ``gamma`` entering it) plus one at the final
    ``gamma``. ``state.batch`` is a sample batch at the final ``gamma`` in
    Monte-Carlo mode.
    """
    cfg = cfg or VbConfig()
    if init is not None:
        gamma, x = init.gamma.copy(), init.x.copy()
    else:
        gamma, x = initial_gamma(model), model.H.adjoint(model.y)
    state = VariationalState(gamma=gamma, z=np.zeros(model.K), x=x)

    for t in range(cfg.outer_iters):
        system = assemble_system(model, state.gamma)
        precond = system.preconditioner(cfg.solver.pooled) if cfg.solver.precondition else None
        z, batch = outer_loop_update(system, cfg, t, precond)
        state.z = z
        if cfg.track_free_energy:
            _record(state, system, cfg, precond, batch, t)
            _check_divergence(state, cfg)
        x, gamma, res = inner_loop(model, z, state.x, cfg, precond)
        state.x, state.gamma = x, gamma
        state.inner_iters.append(res.iterations)
        if res.warning:
            state.warnings.append(f"outer {t}: {res.warning}")
        state.outer_iter = t + 1
        if callback is not None:
            callback(state)

    system = assemble_system(model, state.gamma)
    precond = system.preconditioner(cfg.solver.pooled) if cfg.solver.precondition else None
    batch = None
    if cfg.variance_mode == "mc":
        batch = _draw_for_logdet(system, cfg, precond, cfg.outer_iters)
    if cfg.track_free_energy:
        batch = _record(state, system, cfg, precond, batch, cfg.outer_iters)
        _check_divergence(state, cfg)
    state.batch = batch
    return state


def _check_divergence(state, cfg):
    if cfg.variance_mode != "exact" or len(state.trace) < 2:
        return
    prev, cur = state.trace[-2].phi, state.trace[-1].phi
    if cur - prev > cfg.divergence_rel * abs(prev):
        raise VbDivergenceError(f"free energy rose from {prev:.6e} to {cur:.6e}", state)


def map_estimate(model, cfg: VbConfig | None = None, x0=None, eps=1e-10, continuation=True):
    """MAP estimate by minimising the objective smoothed with a tiny ``z = eps``.

    With ``continuation`` the smoothing is decreased geometrically from 1e-2
    to ``eps``, warm-starting each stage. Tolerances are in the same scaled
    units as :func:`inner_loop`.
    """
    cfg = cfg or VbConfig()
    x = model.H.adjoint(model.y) if x0 is None else np.array(x0, float)
    levels = [eps]
    if continuation:
        levels = [10.0**e for e in range(-2, int(np.floor(np.log10(eps))), -2)] + [eps]
    res = None
    for zl in levels:
        z = np.full(model.K, zl)
        precond = None
        if cfg.inner_precondition:
            try:
                system = assemble_system(model, _gamma_from(model, x, z, cfg.gamma_clamp))
                precond = system.preconditioner()
            except Exception:  # non-stationary operators: fall back to plain L-BFGS
                precond = None
        res = lm_quasi_newton_minimize(_scaled(smoothed_objective(model, z), 0.5 * model.sigma2), x,
                                       grad_tol=cfg.inner_grad_tol,
                                       max_iter=cfg.inner_max_iter, h0_inverse=_h0_from(precond))
        x = res.x
    return x, res
