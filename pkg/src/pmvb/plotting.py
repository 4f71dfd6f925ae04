"""Figures written next to the CSV reports.

Uses ``matplotlib.figure.Figure`` directly (no pyplot state), so it is safe
in headless runs and from threads.
"""

from __future__ import annotations

import logging

import numpy as np
from matplotlib.figure import Figure

logger = logging.getLogger(__name__)


def _save(fig, path):
    fig.savefig(path, dpi=110, bbox_inches="tight")
    logger.info("wrote figure %s", path)
    return path


def variance_scatter(path, z_exact, estimates: dict):
    """Exact vs estimated marginal variances on log-log axes, one marker set per method."""
    fig = Figure(figsize=(5.0, 5.0))
    ax = fig.add_subplot()
    z_exact = np.asarray(z_exact)
    lo, hi = float(z_exact.min()), float(z_exact.max())
    for name, z in estimates.items():
        z = np.asarray(z)
        ok = z > 0
        ax.loglog(z_exact[ok], z[ok], ".", ms=2, alpha=0.5, label=name)
        lo = min(lo, float(z[ok].min())) if ok.any() else lo
    ax.loglog([lo, hi], [lo, hi], "k-", lw=0.8)
    ax.set_xlabel("exact variance")
    ax.set_ylabel("estimated variance")
    ax.legend(loc="upper left")
    return _save(fig, path)


def residual_curves(path, curves: dict, tol=None):
    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot()
    for name, relres in curves.items():
        ax.semilogy(np.arange(len(relres)), relres, label=name)
    if tol is not None:
        ax.axhline(tol, color="k", ls=":", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual")
    ax.legend()
    return _save(fig, path)


def image_panel(path, images: dict, cmap="gray"):
    n = len(images)
    fig = Figure(figsize=(3.2 * n, 3.4))
    for i, (name, img) in enumerate(images.items()):
        ax = fig.add_subplot(1, n, i + 1)
        im = ax.imshow(img, cmap=cmap, interpolation="nearest")
        ax.set_title(name)
        ax.set_axis_off()
        if name.startswith("stdev"):
            fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def kernel_strip(path, kernels, labels=None):
    n = len(kernels)
    fig = Figure(figsize=(1.6 * n, 1.9))
    for i, k in enumerate(kernels):
        ax = fig.add_subplot(1, n, i + 1)
        ax.imshow(k, cmap="gray", interpolation="nearest")
        ax.set_axis_off()
        if labels is not None:
            ax.set_title(labels[i], fontsize=8)
    return _save(fig, path)


def free_energy_trace(path, phi):
    fig = Figure(figsize=(5.0, 3.5))
    ax = fig.add_subplot()
    ax.plot(np.arange(len(phi)), phi, "o-")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("free energy")
    return _save(fig, path)
