"""Training losses and image quality metrics.

The total training objective is the mean squared reconstruction error plus a
total-variation smoothness term (evaluated on a stochastic subset of voxels,
with per-axis resolution normalization relative to 256), and optionally a
Cauchy sparsity penalty on sample opacities and a beta-distribution prior on
per-ray foreground transmittance.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from . import _kernels
from .grid import GradientBuffer, SparseGrid

TV_EPS = 1e-6
BETA_EPS = 1e-6


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over rays of the squared L2 color error.

    Returns (loss, dL/dpred) with gradient 2 (pred - target) / n_rays.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction / target shape mismatch")
    if pred.size == 0:
        raise ValueError("empty batch")
    n = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def sample_tv_cells(grid: SparseGrid, fraction: float, rng) -> np.ndarray:
    """A random contiguous run of lattice cells (in pointer-lattice raster
    order, wrapping), covering `fraction` of all cells."""
    n_cells = int(np.prod(grid.dims))
    count = max(1, int(round(fraction * n_cells)))
    start = int(rng.integers(0, n_cells))
    return ((start + np.arange(count)) % n_cells).astype(np.int64)


def tv_loss(grid: SparseGrid, cells: np.ndarray,
            lam_sigma: float, lam_sh: float,
            grads: GradientBuffer | None = None,
            eps: float = TV_EPS, wrap: tuple[bool, bool, bool] = (False, False, False)):
    """Total variation at the given lattice cells (flat ids, raster order).

    Per cell and value channel, sqrt of the squared +1 neighbor differences
    along x/y/z (each divided by 256/D_axis) is averaged over the cells.
    Opacity reads missing neighbors as 0; SH channels read them as equal.
    Returns (lam_sigma * tv_sigma, lam_sh * tv_sh); gradients, scaled the same
    way, are scattered into `grads` when given.
    """
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    if cells.size == 0:
        return 0.0, 0.0
    n = cells.size
    dims = grid.dims
    if grads is None:
        buf = GradientBuffer(grid.n_rows)
    else:
        buf = grads
    sig_sum, sh_sum = _kernels.tv_grid(
        grid.links, grid.table, cells,
        dims[0] / 256.0, dims[1] / 256.0, dims[2] / 256.0, eps,
        lam_sigma / n, lam_sh / n, wrap[0], wrap[1], wrap[2],
        buf.data, buf.touched_mask, buf.touched_ids, buf._count,
        grads is not None)
    return lam_sigma * sig_sum / n, lam_sh * sh_sum / n


def cauchy_sparsity_loss(sigmas: np.ndarray, lam: float):
    """Sparsity prior lam * sum log(1 + 2 sigma^2) over sample opacities.

    Returns (loss, dL/dsigma = lam * 4 sigma / (1 + 2 sigma^2)).
    """
    s = np.asarray(sigmas, dtype=np.float64)
    loss = lam * float(np.sum(np.log1p(2.0 * s * s)))
    grad = lam * 4.0 * s / (1.0 + 2.0 * s * s)
    return loss, grad


def beta_loss(trans_fg: np.ndarray, lam: float, eps: float = BETA_EPS):
    """Bimodal prior lam * sum(log T + log(1 - T)) on foreground transmittance.

    T is clamped to [eps, 1 - eps]; minimizing pushes T toward 0 or 1.
    Returns (loss, dL/dT); the gradient is zero where the clamp is active.
    """
    t = np.asarray(trans_fg, dtype=np.float64)
    tc = np.clip(t, eps, 1.0 - eps)
    loss = lam * float(np.sum(np.log(tc) + np.log1p(-tc)))
    grad = lam * (1.0 / tc - 1.0 / (1.0 - tc))
    grad[(t < eps) | (t > 1.0 - eps)] = 0.0
    return loss, grad


# ---------------------------------------------------------------------------
# Image metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; inf if equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimension mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(radius: int = 5, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
    over color channels; statistics are taken over the valid interior."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimension mismatch")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    radius = 5
    win = _gaussian_window(radius)
    if a.shape[0] <= 2 * radius or a.shape[1] <= 2 * radius:
        raise ValueError("image smaller than the SSIM window")
    c1 = k1 * k1
    c2 = k2 * k2

    def filt(img):
        out = correlate1d(img, win, axis=0, mode="constant")
        out = correlate1d(out, win, axis=1, mode="constant")
        return out[radius:-radius, radius:-radius]

    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        mx = filt(x)
        my = filt(y)
        mxx = filt(x * x)
        myy = filt(y * y)
        mxy = filt(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
