"""Gaussian variational posterior: system assembly, Perturb-and-MAP sampling,
Monte-Carlo variance / covariance / log-determinant estimation, dense oracles.

The Gaussian approximation has precision ``A = H^T H / sigma2 + G^T diag(1/gamma) G``
and mean ``A^{-1} b`` with ``b = H^T y / sigma2 + G^T beta``.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from . import streams
from .operators import DimensionError, FunctionOperator, LinearOperator
from .solvers import CirculantPreconditioner, DivergenceError, SolveReport, circulant_preconditioner, pcg_solve

logger = logging.getLogger(__name__)

DENSE_MAX_DIM = 5000


class DenseSizeError(DimensionError):
    """A dense oracle was asked for a system above the size guard."""


class HighVarianceWarning(RuntimeWarning):
    pass


@dataclass
class SparseLinearModel:
    """``y = H x + noise``, ``noise ~ N(0, sigma2 I)``, prior ``prod_k t_k((G x)_k)``."""

    H: LinearOperator
    G: LinearOperator
    sigma2: float
    potential: object
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.H.in_dim != self.G.in_dim:
            raise DimensionError(f"H acts on {self.H.in_dim} unknowns but G on {self.G.in_dim}")
        if self.y.size != self.H.out_dim:
            raise DimensionError(f"y has {self.y.size} entries, H has {self.H.out_dim} rows")

    @property
    def N(self):
        return self.H.in_dim

    @property
    def M(self):
        return self.H.out_dim

    @property
    def K(self):
        return self.G.out_dim


@dataclass
class SolverConfig:
    """PCG settings for sampling and mean solves.

    ``tol == 0`` means a fixed budget of ``max_iter`` iterations.
    """

    tol: float = 0.0
    max_iter: int = 20
    precondition: bool = True
    pooled: bool = False
    chunk: int = 64
    jobs: int | None = 1

    @classmethod
    def fixed(cls, iters=20, **kw):
        return cls(tol=0.0, max_iter=iters, **kw)

    @classmethod
    def tolerance(cls, tol=1e-8, max_iter=2000, **kw):
        return cls(tol=tol, max_iter=max_iter, **kw)


class GmrfSystem:
    """Implicit precision ``A`` and right-hand side ``b`` for fixed ``(gamma, beta)``."""

    def __init__(self, model: SparseLinearModel, gamma, beta=None):
        gamma = np.asarray(gamma, dtype=float).ravel()
        if gamma.size != model.K:
            raise DimensionError(f"gamma has {gamma.size} entries, expected {model.K}")
        if np.any(~(gamma > 0)):
            raise ValueError("gamma must be strictly positive")
        self.model = model
        self.gamma = gamma
        self.gamma_inv = 1.0 / gamma
        self.beta = np.zeros(model.K) if beta is None else np.asarray(beta, float).ravel()
        self._precond = {}

    @property
    def N(self):
        return self.model.N

    def apply(self, x):
        m = self.model
        return m.H.adjoint(m.H.forward(x)) / m.sigma2 + m.G.adjoint(self.gamma_inv * m.G.forward(x))

    def as_operator(self) -> LinearOperator:
        return FunctionOperator(self.N, self.N, self.apply, self.apply, grid=self.model.H.grid)

    @property
    def b(self):
        m = self.model
        return m.H.adjoint(m.y) / m.sigma2 + m.G.adjoint(self.beta)

    def preconditioner(self, pooled=False) -> CirculantPreconditioner | None:
        """Circulant preconditioner, or None when the operators are not stationary."""
        if pooled not in self._precond:
            try:
                self._precond[pooled] = circulant_preconditioner(self.model, self.gamma, pooled=pooled)
            except NotImplementedError:
                self._precond[pooled] = None
        return self._precond[pooled]

    def _resolve_precond(self, cfg, precond):
        if precond is not None or not cfg.precondition:
            return precond
        return self.preconditioner(cfg.pooled)


def assemble_system(model, gamma, beta=None) -> GmrfSystem:
    return GmrfSystem(model, gamma, beta)


def posterior_mean(system: GmrfSystem, cfg: SolverConfig | None = None, precond=None, x0=None):
    """Solve ``A x = b``. Returns ``(x, SolveReport)``."""
    cfg = cfg or SolverConfig.tolerance()
    P = system._resolve_precond(cfg, precond)
    return pcg_solve(system.apply, system.b, P, tol=cfg.tol, max_iter=cfg.max_iter, x0=x0)


def perturbed_rhs(system: GmrfSystem, rng: np.random.Generator):
    """``H^T y~ / sigma2 + G^T beta~`` with ``y~ ~ N(0, sigma2 I)``, ``beta~ ~ N(0, diag(1/gamma))``."""
    m = system.model
    y_t = rng.standard_normal(m.M) * np.sqrt(m.sigma2)
    beta_t = rng.standard_normal(m.K) * np.sqrt(system.gamma_inv)
    return m.H.adjoint(y_t) / m.sigma2 + m.G.adjoint(beta_t)


def perturb_and_map_sample(system: GmrfSystem, rng, cfg: SolverConfig | None = None, precond=None):
    """One exact draw from ``N(0, A^{-1})`` (up to PCG accuracy). Returns ``(x, SolveReport)``."""
    cfg = cfg or SolverConfig.fixed()
    P = system._resolve_precond(cfg, precond)
    return pcg_solve(system.apply, perturbed_rhs(system, rng), P, tol=cfg.tol, max_iter=cfg.max_iter)


@dataclass
class SampleBatch:
    """Zero-mean samples ``x~_i ~ N(0, A^{-1})`` with their provenance.

    ``indices`` are the stream indices of the accepted samples (row order of
    ``samples``); rejected indices diverged and were dropped.
    """

    samples: np.ndarray
    indices: np.ndarray
    seed: int
    stage: tuple
    reports: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    unconverged: list = field(default_factory=list)

    @property
    def n_samples(self):
        return len(self.samples)

    @property
    def flagged(self):
        return bool(self.rejected or self.unconverged)


def _solve_chunk(system, idx, seed, stage, cfg, P):
    rhs = np.stack([perturbed_rhs(system, streams.stream(seed, *stage, i)) for i in idx])
    try:
        X, rep = pcg_solve(system.apply, rhs, P, tol=cfg.tol, max_iter=cfg.max_iter)
        ok = np.all(np.isfinite(X), axis=1)
        return X, ok, [rep], rep.final_relres
    except DivergenceError:
        # isolate the offending rows
        X = np.full_like(rhs, np.nan)
        ok = np.zeros(len(idx), bool)
        reps, rel = [], np.full(len(idx), np.inf)
        for j in range(len(idx)):
            try:
                X[j], rep = pcg_solve(system.apply, rhs[j], P, tol=cfg.tol, max_iter=cfg.max_iter)
            except DivergenceError as err:
                logger.warning("sample %d rejected: %s", idx[j], err)
                continue
            ok[j] = np.all(np.isfinite(X[j]))
            reps.append(rep)
            rel[j] = rep.final_relres[0]
        return X, ok, reps, rel


def draw_samples(system: GmrfSystem, n_samples, cfg: SolverConfig | None = None, seed=0,
                 stage=(streams.STAGE_VARIANCE, 0), precond=None, jobs=None) -> SampleBatch:
    """Draw ``n_samples`` Perturb-and-MAP samples, optionally on ``jobs`` threads.

    Sample ``i`` always uses stream ``(seed, *stage, i)`` and rows are solved
    independently, so the batch is identical for any ``jobs`` or chunk size.
    """
    cfg = cfg or SolverConfig.fixed()
    P = system._resolve_precond(cfg, precond)
    stage = tuple(stage)
    chunk = max(1, int(cfg.chunk))
    groups = [np.arange(a, min(a + chunk, n_samples)) for a in range(0, n_samples, chunk)]
    jobs = cfg.jobs if jobs is None else jobs
    if jobs is not None and jobs > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(lambda g: _solve_chunk(system, g, seed, stage, cfg, P), groups))
    else:
        results = [_solve_chunk(system, g, seed, stage, cfg, P) for g in groups]

    samples, indices, reports, rejected, unconverged = [], [], [], [], []
    for g, (X, ok, reps, rel) in zip(groups, results):
        samples.append(X[ok])
        indices.append(g[ok])
        reports.extend(reps)
        rejected.extend(int(i) for i in g[~ok])
        if cfg.tol > 0:
            unconverged.extend(int(i) for i, r, o in zip(g, rel, ok) if o and r > cfg.tol)
    batch = SampleBatch(np.concatenate(samples), np.concatenate(indices), int(seed), stage,
                        reports, rejected, unconverged)
    if rejected:
        logger.warning("%d of %d samples rejected", len(rejected), n_samples)
    return batch


def batch_variances(batch: SampleBatch, G: LinearOperator) -> np.ndarray:
    """``(1/N_s) sum_i (G x~_i)^2`` over the accepted samples."""
    if batch.n_samples == 0:
        raise RuntimeError("no accepted samples in batch")
    return np.mean(G.forward(batch.samples) ** 2, axis=0)


def mc_variances(system: GmrfSystem, n_samples, cfg: SolverConfig | None = None, seed=0,
                 stage=(streams.STAGE_VARIANCE, 0), precond=None, jobs=None):
    """Unbiased sample estimate of ``z = diag(G A^{-1} G^T)``. Returns ``(z_hat, batch)``."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    batch = draw_samples(system, n_samples, cfg, seed, stage, precond, jobs)
    return batch_variances(batch, system.model.G), batch


def clip_variances(z_hat, gamma):
    """``min(z_hat, 1/gamma)`` elementwise: posterior variance never exceeds the prior's."""
    z_hat = np.asarray(z_hat, float)
    gamma = np.asarray(gamma, float)
    if z_hat.shape != gamma.shape:
        raise DimensionError("z_hat and gamma must have the same shape")
    if np.any(gamma <= 0):
        raise ValueError("gamma must be positive")
    return np.minimum(z_hat, 1.0 / gamma)


def mc_covariance_entries(batch: SampleBatch, pairs):
    """Sample covariances ``(1/N_s) sum_i x~_i[a] x~_i[b]`` for the requested ``(a, b)`` pairs."""
    if batch.n_samples == 0:
        raise RuntimeError("empty batch")
    pairs = np.atleast_2d(np.asarray(pairs, dtype=int))
    n = batch.samples.shape[1]
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise IndexError(f"pair index out of range [0, {n})")
    X = batch.samples
    return np.mean(X[:, pairs[:, 0]] * X[:, pairs[:, 1]], axis=0)


def mc_logdet(batch: SampleBatch, system: GmrfSystem, precond: CirculantPreconditioner,
              spread_warn=20.0, return_terms=False):
    """Monte-Carlo ``log|A|`` from samples of ``N(0, A^{-1})`` and a reference ``P``.

    Uses ``E[exp(x^T (A - P) x / 2)] = sqrt(|A| / |P|)``:

        log|A| ~ log|P| + 2 * (logsumexp_i(x_i^T (A - P) x_i / 2) - log N_s)

    A ``HighVarianceWarning`` is issued if the exponents spread over more
    than ``spread_warn`` nats.
    """
    X = batch.samples
    if len(X) == 0:
        raise RuntimeError("empty batch")
    e = 0.5 * (np.einsum("ij,ij->i", X, system.apply(X)) - np.einsum("ij,ij->i", X, precond.apply(X)))
    spread = float(e.max() - e.min())
    if spread > spread_warn:
        warnings.warn(f"log-det exponents spread over {spread:.1f} nats; estimate has high variance",
                      HighVarianceWarning, stacklevel=2)
    est = precond.log_det + 2.0 * (logsumexp(e) - np.log(len(X)))
    if return_terms:
        return float(est), e
    return float(est)


def dense_precision(system: GmrfSystem, max_dim=DENSE_MAX_DIM) -> np.ndarray:
    n = system.N
    if n > max_dim:
        raise DenseSizeError(f"dense oracle limited to N <= {max_dim}, got N = {n}")
    A = np.empty((n, n))
    step = max(1, 2_000_000 // n)
    for a in range(0, n, step):
        E = np.zeros((min(step, n - a), n))
        E[np.arange(E.shape[0]), np.arange(a, a + E.shape[0])] = 1.0
        A[a:a + E.shape[0]] = system.apply(E)
    return 0.5 * (A + A.T)


def _cholesky(system, max_dim):
    A = dense_precision(system, max_dim)
    try:
        return linalg.cholesky(A, lower=True)
    except linalg.LinAlgError as err:
        raise linalg.LinAlgError(f"precision matrix is not positive definite: {err}") from err


def exact_variances_dense(system: GmrfSystem, max_dim=DENSE_MAX_DIM, G=None) -> np.ndarray:
    """``diag(G A^{-1} G^T)`` by dense Cholesky; ``z_k = ||L^{-1} g_k||^2``."""
    G = system.model.G if G is None else G
    L = _cholesky(system, max_dim)
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    z = np.zeros(G.out_dim)
    step = max(1, 1_000_000 // G.out_dim)
    # rows of Linv are the columns of L^{-T}; G applied to them gives (L^{-1} G^T)^T blocks
    for a in range(0, Linv.shape[0], step):
        z += np.sum(G.forward(Linv[a:a + step]) ** 2, axis=0)
    return z


def exact_covariance_dense(system: GmrfSystem, max_dim=DENSE_MAX_DIM) -> np.ndarray:
    L = _cholesky(system, max_dim)
    return linalg.cho_solve((L, True), np.eye(L.shape[0]))


def exact_logdet_dense(system: GmrfSystem, max_dim=DENSE_MAX_DIM) -> float:
    L = _cholesky(system, max_dim)
    return float(2.0 * np.sum(np.log(np.diag(L))))
