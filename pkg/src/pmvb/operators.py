"""Matrix-free linear operators.

Every operator maps flattened (row-major) vectors of length ``in_dim`` to
vectors of length ``out_dim``. Leading axes are treated as a batch, so
``op.forward(X)`` with ``X.shape == (m, in_dim)`` applies the operator to each
row of ``X``.

Image-domain operators use periodic boundaries on a fixed grid. Those whose
normal matrix is circulant can report the Fourier symbol of the
Frobenius-nearest circulant approximation of ``op.T @ diag(w) @ op`` through
:meth:`LinearOperator.gram_symbol`; the circulant preconditioner is built on
top of that.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft


class DimensionError(ValueError):
    """Raised when operator shapes or grids are inconsistent."""


class LinearOperator:
    """Base class: a linear map with forward and adjoint application."""

    def __init__(self, in_dim: int, out_dim: int, grid: tuple[int, ...] | None = None):
        if in_dim <= 0 or out_dim <= 0:
            raise DimensionError(f"dimensions must be positive, got {in_dim}, {out_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        # image grid of the input space, when the operator lives on one
        self.grid = tuple(grid) if grid is not None else None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    def forward(self, x):
        x = self._check(x, self.in_dim)
        return self._forward(x)

    def adjoint(self, y):
        y = self._check(y, self.out_dim)
        return self._adjoint(y)

    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def __matmul__(self, x):
        return self.forward(x)

    @property
    def T(self) -> "LinearOperator":
        return _Adjoint(self)

    def gram_symbol(self, weights=None) -> np.ndarray:
        """Fourier symbol of the circulant projection of ``op.T diag(w) op``.

        Returns a real array over the full DFT grid of ``self.grid``. The
        default (``weights=None``) uses unit weights.
        """
        raise NotImplementedError(f"{type(self).__name__} has no stationary Gram symbol")

    @staticmethod
    def _check(x, n):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != n:
            raise DimensionError(f"expected trailing dimension {n}, got shape {x.shape}")
        return x

    def __repr__(self):
        return f"{type(self).__name__}(out_dim={self.out_dim}, in_dim={self.in_dim})"


class _Adjoint(LinearOperator):
    def __init__(self, op: LinearOperator):
        super().__init__(op.out_dim, op.in_dim)
        self.op = op

    def _forward(self, x):
        return self.op._adjoint(x)

    def _adjoint(self, y):
        return self.op._forward(y)

    @property
    def T(self):
        return self.op


class FunctionOperator(LinearOperator):
    """Wrap a pair of callables as an operator."""

    def __init__(self, in_dim, out_dim, forward, adjoint=None, grid=None):
        super().__init__(in_dim, out_dim, grid)
        self._fwd = forward
        self._adj = adjoint

    def _forward(self, x):
        return self._fwd(x)

    def _adjoint(self, y):
        if self._adj is None:
            raise NotImplementedError("adjoint not provided")
        return self._adj(y)


class IdentityOperator(LinearOperator):
    def __init__(self, n: int | tuple[int, ...]):
        grid = (n,) if np.isscalar(n) else tuple(n)
        size = int(np.prod(grid))
        super().__init__(size, size, grid)

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()

    def gram_symbol(self, weights=None):
        w = 1.0 if weights is None else float(np.mean(weights))
        return np.full(self.grid, w)


class ScaledOperator(LinearOperator):
    """``c * op``; holds a reference to ``op``."""

    def __init__(self, op: LinearOperator, c: float):
        super().__init__(op.in_dim, op.out_dim, op.grid)
        self.op = op
        self.c = float(c)

    def _forward(self, x):
        return self.c * self.op._forward(x)

    def _adjoint(self, y):
        return self.c * self.op._adjoint(y)

    def gram_symbol(self, weights=None):
        return self.c**2 * self.op.gram_symbol(weights)


class ComposedOperator(LinearOperator):
    """``outer @ inner``."""

    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        if outer.in_dim != inner.out_dim:
            raise DimensionError(
                f"cannot compose {outer.in_dim}-input with {inner.out_dim}-output operator"
            )
        super().__init__(inner.in_dim, outer.out_dim, inner.grid)
        self.outer = outer
        self.inner = inner

    def _forward(self, x):
        return self.outer._forward(self.inner._forward(x))

    def _adjoint(self, y):
        return self.inner._adjoint(self.outer._adjoint(y))

    def gram_symbol(self, weights=None):
        # S^T diag(w) S = diag(S^T w) for a row selection S
        if not isinstance(self.outer, SelectionOperator):
            raise NotImplementedError("Gram symbol needs a selection as the outer factor")
        w = np.ones(self.outer.out_dim) if weights is None else np.asarray(weights, float)
        return self.inner.gram_symbol(self.outer.adjoint(w))


class StackOperator(LinearOperator):
    """Vertical stack ``[op_1; op_2; ...]`` of operators sharing an input space."""

    def __init__(self, ops):
        ops = list(ops)
        if not ops:
            raise DimensionError("empty stack")
        n = ops[0].in_dim
        if any(op.in_dim != n for op in ops):
            raise DimensionError("stacked operators must share in_dim")
        super().__init__(n, sum(op.out_dim for op in ops), ops[0].grid)
        self.ops = tuple(ops)
        self._offsets = np.cumsum([0] + [op.out_dim for op in ops])

    def _forward(self, x):
        return np.concatenate([op._forward(x) for op in self.ops], axis=-1)

    def _adjoint(self, y):
        out = None
        for op, a, b in zip(self.ops, self._offsets[:-1], self._offsets[1:]):
            part = op._adjoint(y[..., a:b])
            out = part if out is None else out + part
        return out

    def gram_symbol(self, weights=None):
        total = 0.0
        for op, a, b in zip(self.ops, self._offsets[:-1], self._offsets[1:]):
            total = total + op.gram_symbol(None if weights is None else np.asarray(weights)[a:b])
        return total


class SelectionOperator(LinearOperator):
    """Restriction of a grid to a rectangular window (row-major order kept)."""

    def __init__(self, grid: tuple[int, ...], window: tuple[slice, ...]):
        grid = tuple(int(g) for g in grid)
        if len(window) != len(grid):
            raise DimensionError("window rank does not match grid rank")
        idx = np.arange(int(np.prod(grid))).reshape(grid)[tuple(window)]
        if idx.size == 0:
            raise DimensionError("empty selection window")
        super().__init__(int(np.prod(grid)), idx.size, grid)
        self.window = tuple(window)
        self.window_shape = idx.shape
        self.indices = idx.ravel()

    def _forward(self, x):
        return x[..., self.indices]

    def _adjoint(self, y):
        out = np.zeros(y.shape[:-1] + (self.in_dim,))
        out[..., self.indices] = y
        return out


class _CirculantOperator(LinearOperator):
    """Periodic convolution on ``grid`` defined by its first column."""

    def __init__(self, grid, impulse):
        grid = tuple(int(g) for g in grid)
        n = int(np.prod(grid))
        super().__init__(n, n, grid)
        self._axes = tuple(range(-len(grid), 0))
        full = sfft.fftn(np.asarray(impulse, float).reshape(grid))
        self._symbol_full = full
        self._symbol = sfft.rfftn(np.asarray(impulse, float).reshape(grid))

    def _apply(self, x, symbol):
        batch = x.shape[:-1]
        xs = x.reshape(batch + self.grid)
        out = sfft.irfftn(sfft.rfftn(xs, axes=self._axes) * symbol, s=self.grid, axes=self._axes)
        return out.reshape(batch + (self.in_dim,))

    def _forward(self, x):
        return self._apply(x, self._symbol)

    def _adjoint(self, y):
        return self._apply(y, np.conj(self._symbol))

    def gram_symbol(self, weights=None):
        w = 1.0 if weights is None else float(np.mean(weights))
        return w * np.abs(self._symbol_full) ** 2


def check_kernel(kernel, grid=None) -> np.ndarray:
    """Validate a blur kernel: odd side lengths, finite taps, fits in ``grid``."""
    k = np.asarray(kernel, dtype=float)
    if k.ndim == 0:
        raise DimensionError("kernel must be at least 1-D")
    if any(s % 2 == 0 for s in k.shape):
        raise DimensionError(f"kernel side lengths must be odd, got {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ValueError("kernel has non-finite taps")
    if grid is not None:
        if len(grid) != k.ndim:
            raise DimensionError(f"kernel rank {k.ndim} does not match grid {grid}")
        if any(ks > g for ks, g in zip(k.shape, grid)):
            raise DimensionError(f"kernel {k.shape} larger than domain {tuple(grid)}")
    return k


def kernel_impulse(kernel, grid) -> np.ndarray:
    """Embed a centred kernel in ``grid`` with its centre tap at the origin."""
    k = check_kernel(kernel, grid)
    pad = np.zeros(grid)
    pad[tuple(slice(0, s) for s in k.shape)] = k
    return np.roll(pad, [-(s // 2) for s in k.shape], axis=tuple(range(k.ndim)))


def conv2_operator(kernel, dims) -> LinearOperator:
    """Periodic convolution ``y[p] = sum_a k[a] x[p - a]`` on a grid of shape ``dims``.

    The kernel is centred (odd sizes); offsets ``a`` run from ``-(size//2)``
    to ``size//2`` on each axis. The adjoint is correlation with the kernel,
    i.e. convolution with the flipped kernel. Works for any grid rank.
    """
    dims = tuple(int(d) for d in dims)
    op = _CirculantOperator(dims, kernel_impulse(kernel, dims))
    op.kernel = np.asarray(kernel, float).copy()
    return op


class FiniteDifferenceOperator(LinearOperator):
    """Forward differences ``x[p + e_axis] - x[p]`` along every grid axis, periodic.

    Output is the per-axis responses stacked axis by axis (for an image:
    horizontal block first, then vertical), so ``out_dim = ndim * N``.
    """

    def __init__(self, dims):
        dims = tuple(int(d) for d in dims)
        if any(d < 2 for d in dims):
            raise DimensionError(f"finite differences need every side >= 2, got {dims}")
        n = int(np.prod(dims))
        super().__init__(n, len(dims) * n, dims)
        # horizontal (last axis) first
        self._axes = tuple(range(len(dims) - 1, -1, -1))
        self.blocks = []
        for ax in self._axes:
            imp = np.zeros(dims)
            imp[(0,) * len(dims)] = -1.0
            idx = [0] * len(dims)
            idx[ax] = dims[ax] - 1
            imp[tuple(idx)] = 1.0
            self.blocks.append(_CirculantOperator(dims, imp))

    def _forward(self, x):
        batch = x.shape[:-1]
        xs = x.reshape(batch + self.grid)
        nb = len(batch)
        parts = [(np.roll(xs, -1, axis=nb + ax) - xs).reshape(batch + (self.in_dim,)) for ax in self._axes]
        return np.concatenate(parts, axis=-1)

    def _adjoint(self, y):
        batch = y.shape[:-1]
        nb = len(batch)
        out = np.zeros(batch + self.grid)
        for i, ax in enumerate(self._axes):
            u = y[..., i * self.in_dim:(i + 1) * self.in_dim].reshape(batch + self.grid)
            out += np.roll(u, 1, axis=nb + ax) - u
        return out.reshape(batch + (self.in_dim,))

    def gram_symbol(self, weights=None):
        total = 0.0
        for i, blk in enumerate(self.blocks):
            w = None if weights is None else np.asarray(weights)[i * self.in_dim:(i + 1) * self.in_dim]
            total = total + blk.gram_symbol(w)
        return total


def finite_difference_operator(dims) -> FiniteDifferenceOperator:
    return FiniteDifferenceOperator(dims)


def materialize_dense(op: LinearOperator, max_entries: float = 4e6) -> np.ndarray:
    """Dense matrix of ``op``; column j is ``op`` applied to the j-th basis vector."""
    if op.in_dim * op.out_dim > max_entries:
        raise DimensionError(
            f"refusing to materialize {op.out_dim}x{op.in_dim} operator (> {max_entries:g} entries)"
        )
    return op.forward(np.eye(op.in_dim)).T.copy()
