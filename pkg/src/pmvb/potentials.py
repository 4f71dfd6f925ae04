"""Super-Gaussian sparsity potentials and their variational duals.

A potential ``t(s)`` is super-Gaussian when ``-2 log t(sqrt(v))`` is concave
in ``v = s**2``; then

    -2 log t(s) = min_{gamma > 0}  s**2 / gamma + h(gamma)

with ``h(gamma) = sup_s  -s**2 / gamma - 2 log t(s)``. Everything here is
vectorised over responses; parameters may be scalars or per-row arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize


class DualComputationError(RuntimeError):
    """The numeric supremum defining ``h`` did not converge."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


@dataclass(frozen=True)
class Laplacian:
    """``t(s) = exp(-tau |s|)``."""

    tau: float = 15.0

    def __post_init__(self):
        if np.any(np.asarray(self.tau) <= 0):
            raise ValueError("tau must be positive")

    family = "laplacian"

    def log_t(self, s):
        return -self.tau * np.abs(s)

    def neg2_log_t_sqrt(self, v):
        """``-2 log t(sqrt(v))``."""
        return 2.0 * self.tau * np.sqrt(v)

    def gamma_inv(self, v):
        """``-2 d log t(sqrt(v)) / dv``."""
        return self.tau / np.sqrt(v)

    def h(self, gamma):
        return self.tau**2 * np.asarray(gamma, float)


@dataclass(frozen=True)
class StudentT:
    """Unnormalised Student-t: ``t(s) = (1 + s^2 / (nu scale^2))^(-(nu + 1) / 2)``."""

    nu: float = 3.0
    scale: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.nu) <= 0) or np.any(np.asarray(self.scale) <= 0):
            raise ValueError("nu and scale must be positive")

    family = "student"

    @property
    def _c(self):
        return self.nu * self.scale**2

    def log_t(self, s):
        return -0.5 * (self.nu + 1.0) * np.log1p(np.square(s) / self._c)

    def neg2_log_t_sqrt(self, v):
        return (self.nu + 1.0) * np.log1p(np.asarray(v, float) / self._c)

    def gamma_inv(self, v):
        return (self.nu + 1.0) / (self._c + np.asarray(v, float))

    def h(self, gamma):
        return numeric_h(self, gamma)


def make_potential(family="laplacian", tau=15.0, nu=3.0, scale=1.0):
    family = family.lower()
    if family in ("laplacian", "laplace"):
        return Laplacian(tau)
    if family in ("student", "studentt", "student-t"):
        return StudentT(nu, scale)
    raise ValueError(f"unknown potential family {family!r}")


def log_potential(pot, s):
    """Log of the (unnormalised) potential at response ``s``."""
    return pot.log_t(s)


_LOG_GRID = np.linspace(np.log(1e-30), np.log(1e30), 241)


def _sup_one(pot, gamma):
    # -v/gamma - 2 log t(sqrt(v)) is concave in v, hence unimodal in log v
    def obj(u):
        v = np.exp(u)
        return -v / gamma + pot.neg2_log_t_sqrt(v)

    vals = obj(_LOG_GRID)
    i = int(np.argmax(vals))
    boundary = float(pot.neg2_log_t_sqrt(0.0))
    if i == 0:
        return max(boundary, float(vals[0]))
    if i == len(_LOG_GRID) - 1:
        raise DualComputationError("supremum not bracketed on [1e-30, 1e30]",
                                   bracket=(_LOG_GRID[-2], _LOG_GRID[-1]))
    a, b = _LOG_GRID[i - 1], _LOG_GRID[i + 1]
    res = optimize.minimize_scalar(lambda u: -obj(u), bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-10, "maxiter": 500})
    if not res.success:
        raise DualComputationError(f"bounded search failed: {res.message}", bracket=(a, b))
    return max(boundary, -float(res.fun), float(vals[i]))


def numeric_h(pot, gamma):
    """``h(gamma) = sup_s -s^2/gamma - 2 log t(s)`` by guarded 1-D maximisation."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("gamma must be positive")
    out = np.array([_sup_one(pot, g) for g in gamma.ravel()])
    return out.reshape(gamma.shape) if gamma.ndim else float(out[0])


def h_dual(pot, gamma):
    """Dual function ``h``; closed form for the Laplacian (``tau^2 gamma``)."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("gamma must be positive")
    return pot.h(gamma)


def gamma_update(pot, v):
    """Optimal ``1/gamma`` for ``v = s^2 + z``: ``-2 d log t(sqrt(v))/dv``."""
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise ValueError("gamma_update needs v > 0; add a positive z or clamp")
    return pot.gamma_inv(v)
