"""Krylov solvers, the circulant preconditioner, Lanczos variances, and L-BFGS."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .operators import LinearOperator

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Non-finite values showed up inside an iterative solver."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class IndefiniteError(ValueError):
    pass


@dataclass
class SolveReport:
    """Convergence record of one (possibly batched) PCG run.

    ``relres`` holds ``||A x - b|| / ||b||`` per iteration, starting with the
    initial guess at index 0. For batched solves it is the worst row.
    """

    iterations: int = 0
    relres: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    final_relres: np.ndarray | None = None

    def to_csv(self, path=None) -> str:
        lines = ["iter,relres"] + [f"{i},{r:.12e}" for i, r in enumerate(self.relres)]
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _rowdot(a, b):
    return np.einsum("...i,...i->...", a, b)


_RELRES_FLOOR = 1e-30


def pcg_solve(A, b, precond=None, tol=1e-6, max_iter=1000, x0=None, true_residual_every=25):
    """Preconditioned conjugate gradients for SPD ``A``.

    Parameters
    ----------
    A : LinearOperator or callable
        Symmetric positive definite operator (not checked).
    b : ndarray
        Right-hand side, shape ``(n,)`` or ``(m, n)`` for ``m`` independent
        systems solved together. Rows that reach ``tol`` are frozen so each
        row gets the same result it would get when solved alone.
    precond : object with ``solve(r)``, optional
        Applies ``P^{-1}``.
    tol : float
        Relative residual target. ``tol=0`` runs exactly ``max_iter``
        iterations (fixed budget).
    max_iter : int
    x0 : ndarray, optional

    Returns
    -------
    x : ndarray
    report : SolveReport
    """
    t0 = time.perf_counter()
    apply_A = A.forward if isinstance(A, LinearOperator) else A
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    B = b[None, :] if single else b
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(B.shape)
    bnorm = np.linalg.norm(B, axis=-1)
    bnorm_safe = np.where(bnorm > 0, bnorm, 1.0)

    R = B - apply_A(X) if x0 is not None else B.copy()
    Z = precond.solve(R) if precond is not None else R
    Pdir = Z.copy()
    rz = _rowdot(R, Z)
    rel = np.linalg.norm(R, axis=-1) / bnorm_safe
    active = rel > tol if tol > 0 else np.ones(len(B), bool)
    active &= bnorm > 0
    report = SolveReport(relres=[float(rel.max())])

    it = 0
    while it < max_iter and active.any():
        it += 1
        idx = np.flatnonzero(active)
        p = Pdir[idx]
        Ap = apply_A(p)
        pAp = _rowdot(p, Ap)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = rz[idx] / pAp
        if not np.all(np.isfinite(alpha)):
            raise DivergenceError("non-finite step length in PCG", it)
        X[idx] += alpha[:, None] * p
        if it % true_residual_every == 0:
            R[idx] = B[idx] - apply_A(X[idx])
        else:
            R[idx] -= alpha[:, None] * Ap
        r = R[idx]
        if not np.all(np.isfinite(r)):
            raise DivergenceError("non-finite residual in PCG", it)
        rel[idx] = np.linalg.norm(r, axis=-1) / bnorm_safe[idx]
        z = precond.solve(r) if precond is not None else r
        rz_new = _rowdot(r, z)
        beta = rz_new / np.where(rz[idx] != 0, rz[idx], 1.0)
        Pdir[idx] = z + beta[:, None] * p
        rz[idx] = rz_new
        report.relres.append(float(rel.max()))
        # rows solved to roundoff (e.g. P = A) stop before the recurrences underflow to 0/0
        active[idx] = (rel[idx] > max(tol, _RELRES_FLOOR)) & (rz_new > 0)

    report.iterations = it
    report.converged = bool(np.all(rel <= tol)) if tol > 0 else True
    report.final_relres = rel.copy()
    report.wall_time = time.perf_counter() - t0
    return (X[0] if single else X), report


class CirculantPreconditioner:
    """Stationary (circulant) approximation ``P`` of ``A = s^-2 H^T H + G^T diag(1/g) G``.

    ``P`` is the projection of ``A`` onto block-circulant matrices in the
    Frobenius norm, so it is diagonal in the DFT basis of the image grid.

    Attributes
    ----------
    eigenvalues : ndarray
        Fourier-domain eigenvalues of ``P`` on the full grid.
    gamma_inv_bar : float
        Mean of ``1/gamma``.
    log_det : float
    """

    def __init__(self, eigenvalues, gamma_inv_bar=float("nan")):
        eig = np.real(np.asarray(eigenvalues))
        if np.min(eig) <= 1e-15:
            raise IndefiniteError(f"preconditioner eigenvalue {np.min(eig):.3e} <= 1e-15")
        self.grid = eig.shape
        self.eigenvalues = eig
        self.gamma_inv_bar = gamma_inv_bar
        self.log_det = float(np.sum(np.log(eig)))
        self._axes = tuple(range(-eig.ndim, 0))
        self._half = eig[..., : eig.shape[-1] // 2 + 1]
        self.dim = eig.size

    def _apply(self, x, symbol):
        batch = x.shape[:-1]
        xs = x.reshape(batch + self.grid)
        out = sfft.irfftn(sfft.rfftn(xs, axes=self._axes) * symbol, s=self.grid, axes=self._axes)
        return out.reshape(batch + (self.dim,))

    def solve(self, r):
        """Apply ``P^{-1}``."""
        return self._apply(np.asarray(r, float), 1.0 / self._half)

    def apply(self, x):
        """Apply ``P``."""
        return self._apply(np.asarray(x, float), self._half)


def circulant_preconditioner(model, gamma, pooled=False) -> CirculantPreconditioner:
    """Build the circulant preconditioner for ``model`` at variational parameters ``gamma``.

    With ``pooled=False`` each stationary block of ``G`` is weighted by the
    mean of ``1/gamma`` over its own rows, which is the exact Frobenius
    projection. ``pooled=True`` uses one global mean for all rows.
    """
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ValueError("gamma must be strictly positive")
    ginv = 1.0 / gamma
    gbar = float(np.mean(ginv))
    weights = np.full_like(ginv, gbar) if pooled else ginv
    eig = model.H.gram_symbol() / model.sigma2 + model.G.gram_symbol(weights)
    return CirculantPreconditioner(eig, gbar)


@dataclass
class LanczosResult:
    variances: np.ndarray
    iterations: int
    breakdown: bool
    history: list = field(default_factory=list)


def lanczos_variance(A, G, n_iter, seed=0, breakdown_tol=1e-13, record_every=0):
    """Lanczos estimate of ``diag(G A^{-1} G^T)`` with full reorthogonalization.

    Builds ``A^{-1} ~ Q T^{-1} Q^T`` and accumulates it through the
    ``T = L D L^T`` factorization, so each iteration adds a non-negative
    term and estimates never decrease. Start vector is i.i.d. Gaussian.

    ``record_every > 0`` stores a copy of the running estimate every that
    many iterations in ``history``.
    """
    apply_A = A.forward if isinstance(A, LinearOperator) else A
    n = A.in_dim if isinstance(A, LinearOperator) else G.in_dim
    n_iter = int(min(n_iter, n))
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)

    Q = np.empty((n_iter, n))
    z = np.zeros(G.out_dim)
    history = []
    w_prev = None
    d_prev = None
    beta_prev = 0.0
    q_prev = np.zeros(n)
    breakdown = False
    done = 0
    for j in range(n_iter):
        Q[j] = q
        u = apply_A(q)
        alpha = float(q @ u)
        # LDL^T of the tridiagonal: d_j = alpha_j - beta_{j-1}^2 / d_{j-1}
        if j == 0:
            d = alpha
            w = q.copy()
        else:
            l_prev = beta_prev / d_prev
            d = alpha - beta_prev * l_prev
            w = q - l_prev * w_prev
        if d <= 0:
            logger.warning("Lanczos pivot %.3e <= 0 at step %d; stopping", d, j)
            breakdown = True
            break
        z += G.forward(w) ** 2 / d
        done = j + 1
        if record_every and done % record_every == 0:
            history.append((done, z.copy()))
        if j == n_iter - 1:
            break
        r = u - alpha * q - beta_prev * q_prev
        r -= Q[: j + 1].T @ (Q[: j + 1] @ r)
        r -= Q[: j + 1].T @ (Q[: j + 1] @ r)
        beta = float(np.linalg.norm(r))
        if beta < breakdown_tol * max(1.0, abs(alpha)):
            breakdown = True
            break
        q_prev, q = q, r / beta
        w_prev, d_prev, beta_prev = w, d, beta
    return LanczosResult(z, done, breakdown, history)


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    n_evals: int
    trace: list
    converged: bool
    warning: str | None = None


def _wolfe_search(fg, x, f0, g0, d, step=1.0, c1=1e-4, c2=0.9, max_trials=30):
    """Bracket-and-zoom line search for the strong Wolfe conditions.

    Returns ``(t, f, g, n_evals)``; ``t`` is None if no step satisfying
    sufficient decrease was found within ``max_trials`` evaluations.
    """
    dg0 = float(g0 @ d)
    lo, f_lo, dg_lo = 0.0, f0, dg0
    hi, f_hi, dg_hi = np.inf, np.inf, np.nan
    best = (None, f0, g0)
    t = step
    for trial in range(1, max_trials + 1):
        f, g = fg(x + t * d)
        dg = float(g @ d) if np.isfinite(f) else np.nan
        armijo = np.isfinite(f) and f <= f0 + c1 * t * dg0
        if armijo and f < best[1]:
            best = (t, f, g)
        if not armijo or f >= f_lo:
            hi, f_hi, dg_hi = t, f, dg
        elif abs(dg) <= -c2 * dg0:
            return t, f, g, trial
        else:
            if dg * (hi - lo) >= 0 if np.isfinite(hi) else dg >= 0:
                hi, f_hi, dg_hi = lo, f_lo, dg_lo
            lo, f_lo, dg_lo = t, f, dg
        if not np.isfinite(hi):
            t = 2.0 * t
            continue
        a, b = min(lo, hi), max(lo, hi)
        if b - a <= 1e-16 * max(1.0, b):
            break
        t = 0.5 * (a + b)
        if np.isfinite(dg_hi) and dg_lo != dg_hi and dg_lo * dg_hi < 0:
            t_sec = lo - dg_lo * (hi - lo) / (dg_hi - dg_lo)
            if a + 0.1 * (b - a) < t_sec < b - 0.1 * (b - a):
                t = t_sec
    if best[0] is not None:
        return best[0], best[1], best[2], trial
    return None, best[1], best[2], trial


def lm_quasi_newton_minimize(f_and_grad, x0, grad_tol=1e-5, max_iter=500, memory=10,
                             h0_inverse=None, callback=None):
    """Limited-memory BFGS with a strong Wolfe line search.

    Parameters
    ----------
    f_and_grad : callable
        ``x -> (f, grad)``.
    x0 : ndarray
    grad_tol : float
        Stop when ``max|grad| <= grad_tol``.
    max_iter : int
    memory : int
        Number of stored correction pairs.
    h0_inverse : callable, optional
        Applies an SPD approximation of the inverse Hessian; used as the
        initial matrix of the two-loop recursion (scaled each iteration).
    callback : callable, optional
        Called as ``callback(k, x, f)`` after every accepted step.

    Returns
    -------
    MinimizeResult
        ``warning`` is set when the line search fails; ``x`` is then the
        best iterate seen.
    """
    x = np.array(x0, dtype=float)
    f, g = f_and_grad(x)
    n_evals = 1
    trace = [float(f)]
    S, Y, rho = [], [], []
    warning = None
    k = 0
    converged = float(np.max(np.abs(g))) <= grad_tol
    while not converged and k < max_iter:
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if h0_inverse is not None:
            hq = h0_inverse(q)
            if S:
                hy = h0_inverse(Y[-1])
                hq *= (S[-1] @ Y[-1]) / (Y[-1] @ hy)
        elif S:
            hq = q * (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            hq = q / max(1.0, float(np.linalg.norm(g)))
        for s, y, r, a in zip(S, Y, rho, reversed(alphas)):
            b = r * (y @ hq)
            hq += (a - b) * s
        d = -hq
        if g @ d >= 0:
            # lost descent; restart from steepest descent
            S, Y, rho = [], [], []
            d = -g / max(1.0, float(np.linalg.norm(g)))
        t, f_new, g_new, ne = _wolfe_search(f_and_grad, x, f, g, d)
        n_evals += ne
        if t is None:
            if S:
                # retry once from steepest descent before giving up
                S, Y, rho = [], [], []
                continue
            warning = "line search failed to find an acceptable step"
            logger.debug("L-BFGS: %s at iteration %d", warning, k)
            break
        s = t * d
        y = g_new - g
        x = x + s
        f, g = f_new, g_new
        k += 1
        trace.append(float(f))
        if callback is not None:
            callback(k, x, f)
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            S.append(s)
            Y.append(y)
            rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0), Y.pop(0), rho.pop(0)
        converged = float(np.max(np.abs(g))) <= grad_tol
    return MinimizeResult(x, float(f), g, k, n_evals, trace, converged, warning)
