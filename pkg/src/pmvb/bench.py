"""Desk-scale estimator benchmarks: variance estimators against the dense oracle, CG vs PCG."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .deblur import DeblurProblem, blur_observation, build_tv_model, motion_kernel, synthetic_image
from .gmrf import (
    SolverConfig,
    SparseLinearModel,
    assemble_system,
    exact_variances_dense,
    mc_variances,
    perturbed_rhs,
)
from .operators import conv2_operator, finite_difference_operator
from .potentials import Laplacian
from .solvers import lanczos_variance, pcg_solve
from .varbayes import VbConfig, vb_fit

logger = logging.getLogger(__name__)


def desk_model(rows=48, cols=73, kernel_size=7, boundary="periodic", sigma2=1e-5, tau=15.0, seed=0):
    """Blurred synthetic image of size ``rows x cols`` as a TV deblurring model.

    ``boundary="periodic"`` uses circular blur on the ``rows x cols`` grid
    itself (stationary ``H``); ``"masked"`` uses the extended-domain model
    with ``rows x cols`` unknowns and a smaller observed window.
    """
    k = motion_kernel(kernel_size, angle=30.0)
    if boundary == "periodic":
        x = synthetic_image((rows, cols), seed=seed)
        H = conv2_operator(k, (rows, cols))
        rng = np.random.default_rng(streams.stage_seed(seed, 99))
        y = H.forward(x.ravel()) + np.sqrt(sigma2) * rng.standard_normal(H.out_dim)
        return SparseLinearModel(H, finite_difference_operator((rows, cols)), sigma2, Laplacian(tau), y)
    if boundary == "masked":
        x = synthetic_image((rows, cols), seed=seed)
        y, _ = blur_observation(x, k, sigma2, seed=streams.stage_seed(seed, 99))
        return build_tv_model(DeblurProblem(y, k, tau=tau, sigma2=sigma2))
    raise ValueError(f"unknown boundary {boundary!r}")


def desk_system(rows=48, cols=73, kernel_size=7, boundary="periodic", vb_iters=3, seed=0, uniform=False):
    """GMRF system at the ``gamma`` reached after a few VB outer iterations (heterogeneous)."""
    model = desk_model(rows, cols, kernel_size, boundary, seed=seed)
    if uniform:
        return assemble_system(model, np.full(model.K, 1.0 / model.potential.tau))
    state = vb_fit(model, VbConfig(outer_iters=vb_iters, track_free_energy=False, seed=seed))
    return assemble_system(model, state.gamma)


@dataclass
class VarianceBench:
    z_exact: np.ndarray
    z_mc: np.ndarray
    z_lanczos: np.ndarray
    n_samples: int
    pcg_iters: int
    lanczos_iters: int
    summary: dict = field(default_factory=dict)

    def to_csv(self, path=None):
        lines = ["k,z_exact,z_mc,z_lanczos"]
        lines += [f"{i},{a:.17g},{b:.17g},{c:.17g}"
                  for i, (a, b, c) in enumerate(zip(self.z_exact, self.z_mc, self.z_lanczos))]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def relative_errors(z_est, z_exact):
    return (np.asarray(z_est) - z_exact) / z_exact


def bench_variance(system, n_samples=20, pcg_iters=20, lanczos_iters=None, seed=0, pcg_tol=None,
                   jobs=1, max_dense=None) -> VarianceBench:
    """Exact, Monte-Carlo and Lanczos marginal variances on one system.

    ``lanczos_iters`` defaults to ``n_samples * pcg_iters`` so both
    estimators spend the same number of operator applications.
    """
    kw = {} if max_dense is None else {"max_dim": max_dense}
    t0 = time.perf_counter()
    z = exact_variances_dense(system, **kw)
    t_exact = time.perf_counter() - t0
    cfg = SolverConfig.tolerance(pcg_tol, max_iter=max(pcg_iters, 1)) if pcg_tol else SolverConfig.fixed(pcg_iters)
    t0 = time.perf_counter()
    z_mc, batch = mc_variances(system, n_samples, cfg, seed=seed, jobs=jobs)
    t_mc = time.perf_counter() - t0
    n_l = n_samples * pcg_iters if lanczos_iters is None else int(lanczos_iters)
    n_l = min(n_l, system.N)
    t0 = time.perf_counter()
    lz = lanczos_variance(system.apply, system.model.G, n_l,
                          seed=streams.stage_seed(seed, streams.STAGE_LANCZOS))
    t_lz = time.perf_counter() - t0
    e_mc, e_lz = relative_errors(z_mc, z), relative_errors(lz.variances, z)
    summary = {
        "n": system.N,
        "k": len(z),
        "median_relerr_mc": float(np.median(np.abs(e_mc))),
        "median_relerr_lanczos": float(np.median(np.abs(e_lz))),
        "rms_relerr_mc": float(np.sqrt(np.mean(e_mc**2))),
        "rms_relerr_lanczos": float(np.sqrt(np.mean(e_lz**2))),
        "lanczos_iters": lz.iterations,
        "lanczos_breakdown": lz.breakdown,
        "rejected_samples": len(batch.rejected),
        "seconds_exact": t_exact,
        "seconds_mc": t_mc,
        "seconds_lanczos": t_lz,
    }
    logger.info("variance bench: %s", summary)
    return VarianceBench(z, z_mc, lz.variances, n_samples, pcg_iters, n_l, summary)


@dataclass
class PrecondBench:
    cg: object
    pcg: object
    tol: float

    @staticmethod
    def iterations_to(report, tol):
        hit = np.nonzero(np.asarray(report.relres) <= tol)[0]
        return int(hit[0]) if len(hit) else None

    @property
    def summary(self):
        return {
            "tol": self.tol,
            "cg_iters": self.iterations_to(self.cg, self.tol),
            "pcg_iters": self.iterations_to(self.pcg, self.tol),
            "cg_final_relres": float(self.cg.relres[-1]),
            "pcg_final_relres": float(self.pcg.relres[-1]),
        }


def bench_precond(system, tol=1e-4, max_iter=1000, seed=0, pooled=False) -> PrecondBench:
    """Solve one perturbed (sampling) right-hand side with CG and with circulant PCG."""
    P = system.preconditioner(pooled)
    if P is None:
        raise ValueError("system has no stationary approximation")
    rhs = perturbed_rhs(system, streams.stream(seed, streams.STAGE_VARIANCE, 0))
    _, cg = pcg_solve(system.apply, rhs, None, tol=tol, max_iter=max_iter)
    _, pcg = pcg_solve(system.apply, rhs, P, tol=tol, max_iter=max_iter)
    return PrecondBench(cg, pcg, tol)
