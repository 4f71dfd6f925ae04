"""Image deconvolution with a TV prior: non-blind posterior mean/stdev and EM blind deblurring.

The latent image lives on an extended grid, ``observed + kernel - 1`` per
axis, with the observed pixels in its centre. The blur is periodic on the
extended grid and the likelihood only covers observed pixels, so the padding
absorbs the wrap-around.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import linalg, optimize

from . import streams
from .gmrf import SparseLinearModel, assemble_system, draw_samples, exact_covariance_dense, mc_covariance_entries
from .operators import (
    ComposedOperator,
    DimensionError,
    SelectionOperator,
    check_kernel,
    conv2_operator,
    finite_difference_operator,
)
from .potentials import Laplacian
from .varbayes import VbConfig, vb_fit

logger = logging.getLogger(__name__)


@dataclass
class DeblurProblem:
    """Observed image, kernel (or its support for blind runs) and model constants.

    ``crop`` is an optional window (tuple of slices, relative to the
    observed image) used for PSNR scoring. ``potential`` overrides the
    default Laplacian with parameter ``tau``.
    """

    y: np.ndarray
    kernel: np.ndarray | None = None
    kernel_shape: tuple | None = None
    tau: float = 15.0
    sigma2: float = 1e-5
    lambda1: float = 1e-3
    crop: tuple | None = None
    potential: object | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2:
            raise DimensionError("observed image must be 2-D")
        if self.kernel is not None:
            self.kernel = check_kernel(self.kernel)
            if self.kernel.ndim != 2:
                raise DimensionError("kernel must be 2-D")
            if self.kernel_shape is None:
                self.kernel_shape = self.kernel.shape
        if self.kernel_shape is None:
            raise ValueError("need a kernel or a kernel_shape")
        self.kernel_shape = tuple(int(s) for s in self.kernel_shape)
        if any(s % 2 == 0 for s in self.kernel_shape):
            raise DimensionError("kernel sides must be odd")
        if self.kernel is not None and self.kernel.shape != self.kernel_shape:
            raise DimensionError(f"kernel {self.kernel.shape} does not match support {self.kernel_shape}")
        if isinstance(self.crop, (int, np.integer)):
            self.crop = tuple(slice(int(self.crop), n - int(self.crop)) for n in self.y.shape)
        if self.crop is not None:
            probe = np.zeros(self.y.shape)[self.crop]
            if probe.size == 0:
                raise DimensionError("crop window is empty or outside the observed image")

    @property
    def margin(self):
        return tuple(s // 2 for s in self.kernel_shape)

    @property
    def ext_dims(self):
        return tuple(n + s - 1 for n, s in zip(self.y.shape, self.kernel_shape))

    @property
    def window(self):
        return tuple(slice(m, m + n) for m, n in zip(self.margin, self.y.shape))

    def crop_ext(self, x_ext):
        """Observed-window part of an extended-domain image."""
        return np.asarray(x_ext).reshape(self.ext_dims)[self.window]

    def embed(self, img):
        """Observed-size image placed in the centre of a zero extended grid."""
        out = np.zeros(self.ext_dims)
        out[self.window] = img
        return out


def build_tv_model(problem: DeblurProblem, kernel=None) -> SparseLinearModel:
    """Masked periodic blur ``H``, periodic finite differences ``G``, Laplacian potentials by default."""
    k = problem.kernel if kernel is None else check_kernel(kernel)
    if k is None:
        raise ValueError("no kernel given")
    if k.shape != problem.kernel_shape:
        raise DimensionError(f"kernel {k.shape} does not match support {problem.kernel_shape}")
    dims = problem.ext_dims
    H = ComposedOperator(SelectionOperator(dims, problem.window), conv2_operator(k, dims))
    G = finite_difference_operator(dims)
    pot = problem.potential if problem.potential is not None else Laplacian(problem.tau)
    return SparseLinearModel(H, G, problem.sigma2, pot, problem.y.ravel())


@dataclass
class NonblindResult:
    mean: np.ndarray
    stdev: np.ndarray
    state: object
    mean_ext: np.ndarray
    batch: object = None


def pixel_stdev(batch, n_pixels):
    idx = np.arange(n_pixels)
    return np.sqrt(mc_covariance_entries(batch, np.stack([idx, idx], axis=1)))


def deblur_nonblind(problem: DeblurProblem, cfg: VbConfig | None = None, init=None) -> NonblindResult:
    """Variational posterior mean and per-pixel standard deviation, cropped to the observed window."""
    cfg = cfg or VbConfig()
    model = build_tv_model(problem)
    state = vb_fit(model, cfg, init=init)
    batch = state.batch
    if batch is None:
        system = assemble_system(model, state.gamma)
        batch = draw_samples(system, max(2, cfg.n_samples), cfg.solver, seed=cfg.seed,
                             stage=(streams.STAGE_STDEV, 0))
    stdev = pixel_stdev(batch, model.N)
    return NonblindResult(problem.crop_ext(state.x), problem.crop_ext(stdev), state,
                          state.x.reshape(problem.ext_dims), batch)


def _tap_offsets(kernel_shape):
    grids = np.meshgrid(*[np.arange(s) - s // 2 for s in kernel_shape], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def kernel_statistics(x_mean, samples, y_obs, problem: DeblurProblem, kernel_shape=None, cov=None):
    """Second-order statistics of the expected data misfit as a function of the kernel.

    For ``y_p ~ sum_a k_a x_{p-a}`` over observed pixels ``p``:

    ``R[a, b] = sum_p E[x_{p-a} x_{p-b}]`` with ``E[x_u x_v] = xh_u xh_v + mean_i xs_i[u] xs_i[v]``
    and ``r[a] = sum_p y_p xh_{p-a}``. Everything is computed by circular
    correlations on the extended grid. A dense posterior covariance ``cov``
    (tiny problems only) replaces the sample average by its exact value.
    """
    kernel_shape = tuple(kernel_shape or problem.kernel_shape)
    dims = problem.ext_dims
    axes = (-2, -1)
    offs = _tap_offsets(kernel_shape)
    mask = problem.embed(np.ones(problem.y.shape))
    Y = problem.embed(np.asarray(y_obs).reshape(problem.y.shape))

    xh = np.asarray(x_mean, float).reshape(dims)
    S = np.zeros((0,) + dims) if samples is None or len(samples) == 0 else np.asarray(samples).reshape((-1,) + dims)
    V = np.concatenate([xh[None], S], axis=0)
    wts = np.concatenate([[1.0], np.full(len(S), 1.0 / max(len(S), 1))])
    FV = sfft.rfftn(V, axes=axes)

    # r[a] = sum_p Y[p] xh[p - a]
    c = sfft.irfftn(sfft.rfftn(Y) * np.conj(FV[0]), s=dims)
    r = c[offs[:, 0] % dims[0], offs[:, 1] % dims[1]]

    T = len(offs)
    R = np.zeros((T, T))
    for ia, a in enumerate(offs):
        # u_a[q] = m[q + a] v[q];  R[a, b] = sum_q u_a[q] v[q + a - b]
        u = np.roll(mask, (-a[0], -a[1]), axis=(0, 1))[None] * V
        ca = sfft.irfftn(FV * np.conj(sfft.rfftn(u, axes=axes)), s=dims, axes=axes)
        ca = np.tensordot(wts, ca, axes=1)
        d = a[None, :] - offs
        R[ia] = ca[d[:, 0] % dims[0], d[:, 1] % dims[1]]
    if cov is not None:
        R += _covariance_term(np.asarray(cov, float), offs, mask, dims)
    return 0.5 * (R + R.T), r


def _covariance_term(C, offs, mask, dims):
    pts = np.argwhere(mask > 0)
    lin = [np.ravel_multi_index(tuple(((pts - a) % dims).T), dims) for a in offs]
    T = len(offs)
    out = np.empty((T, T))
    for i in range(T):
        for j in range(T):
            out[i, j] = C[lin[i], lin[j]].sum()
    return out


def kernel_objective(k, R, r, lambda1=0.0):
    k = np.asarray(k, float).ravel()
    return float(0.5 * k @ R @ k - r @ k + lambda1 * np.abs(k).sum())


@dataclass
class MStepResult:
    kernel: np.ndarray
    objective: float
    objective_unnormalized: float
    objective_previous: float | None
    floored: bool
    R: np.ndarray = field(repr=False, default=None)
    r: np.ndarray = field(repr=False, default=None)


def solve_kernel_qp(R, r, lambda1=0.0, eig_floor=1e-12):
    """``argmin_{k >= 0} k^T R k / 2 - r^T k + lambda1 sum(k)`` via NNLS on a Cholesky factor.

    Returns ``(k, floored)``; ``floored`` is True when eigenvalues of ``R``
    had to be lifted to keep it positive definite.
    """
    w, U = linalg.eigh(R)
    lo = eig_floor * max(w.max(), 1e-300)
    floored = bool(w.min() < -1e-10 * max(abs(w.max()), 1e-300))
    Rf = (U * np.maximum(w, lo)) @ U.T
    Rf = 0.5 * (Rf + Rf.T)
    c = np.asarray(r, float) - lambda1
    L = linalg.cholesky(Rf, lower=True)
    k, _ = optimize.nnls(L.T, linalg.solve_triangular(L, c, lower=True), maxiter=50 * len(c))
    return k, floored, Rf


def m_step_kernel(batch_samples, x_mean, y_obs, problem: DeblurProblem, kernel_shape=None,
                  lambda1=None, k_prev=None, cov=None) -> MStepResult:
    """Kernel update minimising the expected misfit plus an L1 penalty.

    Solves the QP with ``k >= 0`` (where the L1 norm is ``sum(k)``), then
    rescales onto the simplex ``sum(k) = 1``; the image absorbs the scale at
    the next E-step. If every tap is zero the tap with the largest
    correlation is kept.
    """
    kernel_shape = tuple(kernel_shape or problem.kernel_shape)
    lambda1 = problem.lambda1 if lambda1 is None else lambda1
    R, r = kernel_statistics(x_mean, batch_samples, y_obs, problem, kernel_shape, cov=cov)
    k, floored, Rf = solve_kernel_qp(R, r, lambda1)
    obj_raw = kernel_objective(k, R, r, lambda1)
    if k.sum() <= 0:
        k = np.zeros_like(r)
        k[int(np.argmax(r))] = 1.0
    k = k / k.sum()
    obj_prev = None if k_prev is None else kernel_objective(k_prev, R, r, lambda1)
    return MStepResult(k.reshape(kernel_shape), kernel_objective(k, R, r, lambda1), obj_raw,
                       obj_prev, floored, R, r)


@dataclass
class EmConfig:
    em_iters: int = 10
    mstep_samples: int = 2
    lambda1: float | None = None
    vb: VbConfig = field(default_factory=VbConfig)
    warm_start: bool = True
    # tiny problems only: dense posterior covariance in place of M-step samples
    exact_mstep: bool = False


@dataclass
class KernelEmTrace:
    kernels: list = field(default_factory=list)
    mstep: list = field(default_factory=list)
    phi: list = field(default_factory=list)


@dataclass
class BlindResult:
    kernel: np.ndarray
    mean: np.ndarray
    trace: KernelEmTrace
    state: object


def em_blind_deblur(problem: DeblurProblem, k0, cfg: EmConfig | None = None, callback=None) -> BlindResult:
    """Alternate variational inference at a fixed kernel (E-step) with the kernel QP (M-step)."""
    cfg = cfg or EmConfig()
    k = check_kernel(k0)
    if k.shape != problem.kernel_shape:
        raise DimensionError(f"initial kernel {k.shape} does not match support {problem.kernel_shape}")
    if np.any(k < 0) or not np.isclose(k.sum(), 1.0):
        raise ValueError("initial kernel must be non-negative and sum to one")
    trace = KernelEmTrace(kernels=[k.copy()])
    state = None
    for t in range(cfg.em_iters):
        model = build_tv_model(problem, k)
        state = vb_fit(model, cfg.vb, init=state if cfg.warm_start else None)
        trace.phi.append(state.phi[-1] if state.trace else float("nan"))
        system = assemble_system(model, state.gamma)
        samples = cov = None
        if cfg.exact_mstep:
            cov = exact_covariance_dense(system, cfg.vb.max_dense)
        elif cfg.mstep_samples > 0:
            batch = draw_samples(system, cfg.mstep_samples, cfg.vb.solver, seed=cfg.vb.seed,
                                 stage=(streams.STAGE_MSTEP, t))
            samples = batch.samples
        res = m_step_kernel(samples, state.x, problem.y, problem, lambda1=cfg.lambda1, k_prev=k, cov=cov)
        k = res.kernel
        trace.kernels.append(k.copy())
        trace.mstep.append(res)
        logger.info("EM %d: M-step objective %.6e (previous kernel %.6e)", t, res.objective,
                    res.objective_previous)
        if callback is not None:
            callback(t, k, state)
    model = build_tv_model(problem, k)
    state = vb_fit(model, cfg.vb, init=state if cfg.warm_start else None)
    return BlindResult(k, problem.crop_ext(state.x), trace, state)


def psnr(x, reference, crop=None, peak=1.0):
    """``10 log10(peak^2 / MSE)`` over ``crop`` (slices, or an int margin). ``inf`` when identical."""
    x = np.asarray(x, float)
    ref = np.asarray(reference, float)
    if crop is not None:
        if isinstance(crop, (int, np.integer)):
            crop = tuple(slice(crop, s - crop) for s in ref.shape)
        x, ref = x[crop], ref[crop]
    if x.shape != ref.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def kernel_ncc(k, k_ref, max_shift=None):
    """Normalised cross-correlation of two kernels, maximised over integer shifts.

    Kernels are zero-padded to a common support; ``max_shift`` defaults to
    half the reference support (shifts of the kernel trade off against
    shifts of the image and are not identifiable).
    """
    k = np.asarray(k, float)
    k_ref = np.asarray(k_ref, float)
    if max_shift is None:
        max_shift = max(k_ref.shape) // 2
    shape = tuple(max(a, b) + 2 * max_shift for a, b in zip(k.shape, k_ref.shape))

    def pad(a):
        out = np.zeros(shape)
        o = tuple((s - n) // 2 for s, n in zip(shape, a.shape))
        out[o[0]:o[0] + a.shape[0], o[1]:o[1] + a.shape[1]] = a
        return out

    a, b = pad(k), pad(k_ref)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    best = -1.0
    for di in range(-max_shift, max_shift + 1):
        for dj in range(-max_shift, max_shift + 1):
            best = max(best, float(np.sum(np.roll(a, (di, dj), axis=(0, 1)) * b) / (na * nb)))
    return best


# synthetic test data


def gaussian_kernel(size=5, sigma=1.0):
    ax = np.arange(size) - size // 2
    g = np.exp(-0.5 * (ax[:, None] ** 2 + ax[None, :] ** 2) / sigma**2)
    return g / g.sum()


def motion_kernel(size=9, length=None, angle=30.0, samples=200):
    """Linear motion blur of ``length`` pixels at ``angle`` degrees, anti-aliased."""
    length = size - 1 if length is None else length
    k = np.zeros((size, size))
    c = size // 2
    t = np.linspace(-0.5, 0.5, samples) * length
    th = np.deg2rad(angle)
    yy, xx = c - t * np.sin(th), c + t * np.cos(th)
    for py, px in zip(yy, xx):
        iy, ix = int(np.floor(py)), int(np.floor(px))
        fy, fx = py - iy, px - ix
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= iy + dy < size and 0 <= ix + dx < size:
                    k[iy + dy, ix + dx] += wy * wx
    return k / k.sum()


def synthetic_image(shape, seed=0, n_shapes=12):
    """Piecewise-smooth test image in [0, 1]: rectangles and discs on a gentle ramp."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    img = 0.3 + 0.2 * (xx / max(w - 1, 1)) + 0.1 * (yy / max(h - 1, 1))
    for _ in range(n_shapes):
        val = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            hh, ww = rng.integers(h // 8 + 1, h // 3 + 2), rng.integers(w // 8 + 1, w // 3 + 2)
            img[y0:y0 + hh, x0:x0 + ww] = val
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(min(h, w) / 10, min(h, w) / 4)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 < rad**2] = val
    return np.clip(img, 0.0, 1.0)


def standard_test_image(size=128, margin=0):
    """The scikit-image 'camera' photograph resized to ``size + 2 * margin``."""
    from skimage import data, transform

    img = data.camera().astype(float) / 255.0
    n = size + 2 * margin
    return np.clip(transform.resize(img, (n, n), anti_aliasing=True), 0.0, 1.0)


def blur_observation(sharp_ext, kernel, sigma2=1e-5, seed=0):
    """Valid-region blur of an extended sharp image plus Gaussian noise.

    ``sharp_ext`` must be ``observed + kernel - 1`` on each side; returns
    ``(y, sharp_observed_window)``.
    """
    k = check_kernel(kernel)
    sharp_ext = np.asarray(sharp_ext, float)
    obs = tuple(n - s + 1 for n, s in zip(sharp_ext.shape, k.shape))
    prob = DeblurProblem(np.zeros(obs), k)
    H = ComposedOperator(SelectionOperator(prob.ext_dims, prob.window), conv2_operator(k, prob.ext_dims))
    rng = np.random.default_rng(seed)
    y = H.forward(sharp_ext.ravel()) + rng.standard_normal(H.out_dim) * np.sqrt(sigma2)
    return y.reshape(obs), prob.crop_ext(sharp_ext)
