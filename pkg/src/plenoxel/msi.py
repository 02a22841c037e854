"""Multi-sphere-image background for unbounded 360 scenes.

Concentric equirectangular layers carry (sigma, rgb) texels -- colors are
plain DC values, no higher SH bands. Layer radii are placed linearly in
inverse radius from 1 to infinity (the scene is pre-scaled so the foreground
sits inside the unit sphere). Interpolation is trilinear over
(inverse-radius layer coordinate, theta, phi), phi wrapping at the seam and
theta clamped half a texel from the poles. Rendering samples the layers once
per sphere crossing beyond the foreground exit and composites the final
residual over black.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grid import GradientBuffer, SparseGrid


@dataclass
class MsiBackground:
    data: np.ndarray                  # (layers, H, W, 4): sigma, r, g, b
    radii: np.ndarray = field(default=None)  # (layers,), increasing, last inf

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] != 4:
            raise ValueError("background data must be (layers, H, W, 4)")
        if self.radii is None:
            self.radii = layer_radii(self.n_layers)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if self.radii.shape != (self.n_layers,):
            raise ValueError("one radius per layer required")
        if np.any(np.diff(self.radii) <= 0):
            raise ValueError("layer radii must be strictly increasing")

    @classmethod
    def create(cls, n_layers: int = 64, height: int = 1024,
               width: int = 2048) -> "MsiBackground":
        return cls(data=np.zeros((n_layers, height, width, 4)))

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "MsiBackground":
        return MsiBackground(self.data.copy(), self.radii.copy())


def layer_radii(n_layers: int) -> np.ndarray:
    """Radii whose inverses run linearly from 1 down to 0 (radius inf)."""
    inv = np.linspace(1.0, 0.0, n_layers)
    with np.errstate(divide="ignore"):
        return 1.0 / inv


def _angular_coords(bg: MsiBackground, pts: np.ndarray):
    """Continuous (phi texel, theta texel) coordinates, phi unwrapped."""
    r = np.linalg.norm(pts, axis=-1)
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    theta = np.arccos(np.clip(pts[:, 2] / r, -1.0, 1.0))
    u = (phi + np.pi) / (2.0 * np.pi) * bg.width - 0.5
    u = u - np.floor(u / bg.width) * bg.width
    v = np.clip(theta / np.pi * bg.height - 0.5, 0.0, bg.height - 1.0)
    return r, u, v


def sample_background(bg: MsiBackground, pts: np.ndarray):
    """Trilinearly interpolated (sigma, rgb) at exterior points (|p| >= 1).

    The radial coordinate is the layer index in inverse radius; phi wraps
    periodically. Opacity and color are clamped at zero after interpolation.
    """
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    r, u, v = _angular_coords(bg, pts)
    if np.any(r < 1.0 - 1e-9):
        raise ValueError("background sample inside the unit sphere")
    lcoord = np.clip((1.0 - 1.0 / r) * (bg.n_layers - 1), 0.0, bg.n_layers - 1)
    l0 = np.minimum(np.floor(lcoord).astype(np.int64), bg.n_layers - 2)
    fl = lcoord - l0
    i0 = np.minimum(np.floor(u).astype(np.int64), bg.width - 1)
    fu = u - i0
    i1 = (i0 + 1) % bg.width
    j0 = np.minimum(np.floor(v).astype(np.int64), bg.height - 2)
    fv = v - j0
    out = np.zeros((len(pts), 4))
    for dl, wl in ((0, 1.0 - fl), (1, fl)):
        for jj, wv in ((j0, 1.0 - fv), (j0 + 1, fv)):
            for ii, wu in ((i0, 1.0 - fu), (i1, fu)):
                out += (wl * wv * wu)[:, None] * bg.data[l0 + dl, jj, ii]
    out = np.maximum(out, 0.0)
    if single:
        return float(out[0, 0]), out[0, 1:]
    return out[:, 0], out[:, 1:]


class BgGradientBuffer:
    """Touched-texel gradient accumulator over the flattened layer lattice."""

    def __init__(self, bg: MsiBackground):
        n = bg.n_layers * bg.height * bg.width
        self.data = np.zeros((n, 4), dtype=np.float64)
        self.touched_mask = np.zeros(n, dtype=np.uint8)
        self.touched_ids = np.zeros(max(n, 1), dtype=np.int64)
        self._count = np.zeros(1, dtype=np.int64)

    @property
    def n_touched(self) -> int:
        return int(self._count[0])

    def clear(self) -> None:
        _kernels.clear_grad(self.data, self.touched_mask,
                            self.touched_ids, self._count)


def render_rays_with_background(grid: SparseGrid, bg: MsiBackground,
                                origins: np.ndarray, dirs: np.ndarray,
                                opts=None,
                                gt_rgb: np.ndarray | None = None,
                                grads: GradientBuffer | None = None,
                                bg_grads: BgGradientBuffer | None = None,
                                n_total: int = 1,
                                lam_cauchy: float = 0.0,
                                lam_beta: float = 0.0,
                                beta_eps: float = 1e-6):
    """Composite foreground grid and sphere layers along world rays.

    Forward-only when `grads` is None. With ground truth and gradient buffers
    given, performs the fused MSE backward pass (upstream 2 (C - gt) /
    n_total) including the Cauchy and beta regularizer gradients.

    Returns (rgb, trans_fg, trans_final, mse_sum, cauchy_raw, beta_raw).
    """
    from .render import RenderOptions, _max_samples, _step_size

    opts = opts or RenderOptions(background=(0.0, 0.0, 0.0))
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    n = origins.shape[0]
    with_grad = grads is not None
    if with_grad and (gt_rgb is None or bg_grads is None):
        raise ValueError("backward pass needs ground truth and both buffers")
    if gt_rgb is None:
        gt_rgb = np.zeros((n, 3))
    gt_rgb = np.ascontiguousarray(gt_rgb, dtype=np.float64)
    if not with_grad:
        grads = GradientBuffer(0)
        bg_grads = BgGradientBuffer(MsiBackground.create(2, 2, 2))
    step = _step_size(grid, opts.step_frac)
    nmax = _max_samples(grid, step) + bg.n_layers + 2
    out_rgb = np.empty((n, 3))
    out_tfg = np.empty(n)
    out_trans = np.empty(n)
    dmax = np.array(grid.dims, dtype=np.float64) - 1.0
    mse_sum, cauchy_raw, beta_raw = _kernels.render_backward_360(
        grid.links, grid.table, grid.aabb_min, grid.aabb_max,
        grid.lattice_scale, dmax, step,
        bg.data, bg.radii,
        origins, dirs, opts.stop_thresh, opts.interp == "nearest",
        gt_rgb, True, 2.0 / max(n_total, 1),
        lam_cauchy, lam_beta, beta_eps,
        grads.data, grads.touched_mask, grads.touched_ids, grads._count,
        bg_grads.data, bg_grads.touched_mask, bg_grads.touched_ids,
        bg_grads._count,
        out_rgb, out_tfg, out_trans,
        np.empty(nmax), np.empty(nmax), np.empty(nmax), np.empty(nmax),
        np.empty(nmax), np.empty((nmax, 3)), np.empty(nmax, np.int64),
        with_grad)
    return out_rgb, out_tfg, out_trans, mse_sum, cauchy_raw, beta_raw


def sample_bg_tv_cells(bg: MsiBackground, fraction: float, rng) -> np.ndarray:
    n_cells = bg.n_layers * bg.height * bg.width
    count = max(1, int(round(fraction * n_cells)))
    start = int(rng.integers(0, n_cells))
    return ((start + np.arange(count)) % n_cells).astype(np.int64)


def bg_tv_loss(bg: MsiBackground, cells: np.ndarray,
               lam_sigma: float, lam_rgb: float,
               bg_grads: BgGradientBuffer | None = None,
               eps: float = 1e-6):
    """TV over the background lattice axes (layer, theta, phi); phi wraps
    around the equirectangular seam. Returns the lambda-scaled
    (tv_sigma, tv_rgb) means over the sampled cells."""
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    if cells.size == 0:
        return 0.0, 0.0
    n = cells.size
    buf = bg_grads if bg_grads is not None else BgGradientBuffer(bg)
    sig_sum, rgb_sum = _kernels.tv_bg(
        bg.data, cells, eps, lam_sigma / n, lam_rgb / n,
        buf.data, buf.touched_mask, buf.touched_ids, buf._count,
        bg_grads is not None)
    return lam_sigma * sig_sum / n, lam_rgb * rgb_sum / n
