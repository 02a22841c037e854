"""Differentiable volume rendering along rays through a sparse voxel grid.

Two compositing formulas are supported:
  * "relative" (default): T_i = exp(-sum_{j<i} sigma_j delta_j); each sample
    absorbs a fraction of the light that actually reaches it.
  * "absolute": alpha_i = 1 - exp(-sigma_i delta_i) is accumulated directly
    and the running transmittance is clipped at zero, so a sample's
    contribution ignores how much light preceding samples removed.

The forward color is C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i plus the
residual transmittance times the background color. The backward pass is
analytic (a single reverse sweep per ray) rather than autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grid import GradientBuffer, SparseGrid
from .sh import eval_sh_basis, normalize_dirs


@dataclass
class RenderOptions:
    step_frac: float = 0.5          # sample spacing as a fraction of a voxel edge
    stop_thresh: float = 1e-4       # early termination once T drops below this
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    interp: str = "trilinear"       # or "nearest"
    formula: str = "relative"       # or "absolute"
    jitter: float = 0.0             # per-ray start offset in [0, jitter) * spacing

    def __post_init__(self):
        if self.step_frac <= 0:
            raise ValueError("step_frac must be positive")
        if self.interp not in ("trilinear", "nearest"):
            raise ValueError(f"unknown interpolation mode {self.interp!r}")
        if self.formula not in ("relative", "absolute"):
            raise ValueError(f"unknown rendering formula {self.formula!r}")


@dataclass
class SamplePoint:
    position: np.ndarray
    delta: float
    sigma: float
    rgb: np.ndarray
    trans: float
    weight: float


@dataclass
class RenderResult:
    rgb: np.ndarray
    trans: float
    weight_sum: float
    samples: list[SamplePoint] = field(default_factory=list)


def _step_size(grid: SparseGrid, step_frac: float) -> float:
    return step_frac * float(np.min(grid.voxel_size))


def _max_samples(grid: SparseGrid, step: float) -> int:
    diag = float(np.linalg.norm(grid.extent))
    return int(math.ceil(diag / step)) + 4


def march(grid: SparseGrid, origin: np.ndarray, direction: np.ndarray,
          step_frac: float = 0.5):
    """Uniform samples along the ray's chord through the grid AABB.

    Returns (ts, deltas): sample parameters and interval lengths. Spacing is
    step_frac * (smallest voxel edge); the last interval is shortened so the
    deltas sum exactly to the chord length. A miss returns empty arrays.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    t0, t1 = _kernels._ray_aabb(
        origin[0], origin[1], origin[2],
        direction[0], direction[1], direction[2],
        grid.aabb_min[0], grid.aabb_min[1], grid.aabb_min[2],
        grid.aabb_max[0], grid.aabb_max[1], grid.aabb_max[2])
    length = t1 - t0
    if length <= 0.0:
        return np.empty(0), np.empty(0)
    step = _step_size(grid, step_frac)
    n = max(1, int(math.ceil(length / step - 1e-9)))
    ts = t0 + np.arange(n) * step
    deltas = np.full(n, step)
    deltas[-1] = length - step * (n - 1)
    return ts, deltas


def _as_batch(origins, dirs):
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    if origins.shape != dirs.shape or origins.shape[1] != 3:
        raise ValueError("origins and directions must both be (N, 3)")
    return origins, dirs


def _jitter_offsets(n: int, jitter: float, rng) -> np.ndarray:
    if jitter <= 0.0:
        return np.zeros(n)
    if rng is None:
        rng = np.random.default_rng()
    return rng.random(n) * jitter


def render_rays(grid: SparseGrid, origins: np.ndarray, dirs: np.ndarray,
                opts: RenderOptions | None = None,
                viewdirs: np.ndarray | None = None, rng=None):
    """Batch forward render: returns (rgb (N,3), trans (N,), weight_sum (N,)).

    `viewdirs` supplies the SH evaluation direction when it differs from the
    marching direction (NDC rays); defaults to the normalized march direction.
    """
    opts = opts or RenderOptions()
    origins, dirs = _as_batch(origins, dirs)
    if viewdirs is None:
        viewdirs = normalize_dirs(dirs)
    else:
        viewdirs = np.ascontiguousarray(np.atleast_2d(viewdirs), dtype=np.float64)
    n = origins.shape[0]
    out_rgb = np.empty((n, 3))
    out_trans = np.empty(n)
    out_wsum = np.empty(n)
    dmax = np.array(grid.dims, dtype=np.float64) - 1.0
    _kernels.render_forward(
        grid.links, grid.table, grid.aabb_min, grid.aabb_max,
        grid.lattice_scale, dmax, _step_size(grid, opts.step_frac),
        origins, dirs, viewdirs, np.asarray(opts.background, dtype=np.float64),
        opts.stop_thresh, opts.interp == "nearest", opts.formula == "absolute",
        _jitter_offsets(n, opts.jitter, rng),
        out_rgb, out_trans, out_wsum)
    return out_rgb, out_trans, out_wsum


def render_ray(grid: SparseGrid, origin: np.ndarray, direction: np.ndarray,
               opts: RenderOptions | None = None,
               viewdir: np.ndarray | None = None,
               record: bool = False) -> RenderResult:
    """Render a single ray. With record=True the per-sample terms are
    computed by a plain-numpy reference path and returned alongside."""
    opts = opts or RenderOptions()
    if record:
        return _render_ray_reference(grid, origin, direction, opts, viewdir)
    vd = None if viewdir is None else np.atleast_2d(viewdir)
    rgb, trans, wsum = render_rays(grid, origin, direction, opts, vd)
    return RenderResult(rgb=rgb[0], trans=float(trans[0]),
                        weight_sum=float(wsum[0]))


def _render_ray_reference(grid, origin, direction, opts, viewdir) -> RenderResult:
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    vd = direction if viewdir is None else np.asarray(viewdir, dtype=np.float64)
    vd = normalize_dirs(vd)
    basis = eval_sh_basis(vd)
    bg = np.asarray(opts.background, dtype=np.float64)
    ts, deltas = march(grid, origin, direction, opts.step_frac)
    rgb = np.zeros(3)
    T = 1.0
    asum = 0.0
    wsum = 0.0
    samples: list[SamplePoint] = []
    for t, dlt in zip(ts, deltas):
        pos = origin + t * direction
        rows, ws = grid._stencil(pos[None, :], opts.interp)
        if not np.any(rows >= 0):
            continue
        sig = float(np.einsum(
            "nq,nq->n", ws,
            np.where(rows >= 0, grid.table[np.maximum(rows, 0), 0], 0.0))[0])
        if sig <= 0.0:
            continue
        att = math.exp(-sig * dlt)
        if opts.formula == "absolute":
            t_next = max(0.0, 1.0 - (asum + (1.0 - att)))
            w = T - t_next
            asum += 1.0 - att
        else:
            t_next = T * att
            w = T - t_next
        coeffs = np.einsum(
            "nq,nqc->nc", ws,
            np.where(rows[..., None] >= 0,
                     grid.table[np.maximum(rows, 0), 1:], 0.0))[0]
        color = np.maximum(basis @ coeffs.reshape(3, 9).T, 0.0)
        rgb += w * color
        wsum += w
        samples.append(SamplePoint(position=pos, delta=float(dlt),
                                   sigma=sig, rgb=color, trans=T, weight=w))
        T = t_next
        if T < opts.stop_thresh:
            break
    rgb = rgb + T * bg
    return RenderResult(rgb=rgb, trans=T, weight_sum=wsum, samples=samples)


def render_rays_backward(grid: SparseGrid, origins: np.ndarray, dirs: np.ndarray,
                         upstream: np.ndarray, grads: GradientBuffer,
                         opts: RenderOptions | None = None,
                         viewdirs: np.ndarray | None = None,
                         lam_cauchy: float = 0.0, rng=None):
    """Scatter analytic gradients of the rendered colors into `grads`.

    `upstream` is dL/dC per ray (N, 3). When lam_cauchy > 0, the per-sample
    Cauchy sparsity gradient is folded in and the raw sum of
    log(1 + 2 sigma^2) over samples is returned.
    """
    opts = opts or RenderOptions()
    origins, dirs = _as_batch(origins, dirs)
    upstream = np.ascontiguousarray(np.atleast_2d(upstream), dtype=np.float64)
    if viewdirs is None:
        viewdirs = normalize_dirs(dirs)
    else:
        viewdirs = np.ascontiguousarray(np.atleast_2d(viewdirs), dtype=np.float64)
    n = origins.shape[0]
    step = _step_size(grid, opts.step_frac)
    nmax = _max_samples(grid, step)
    out_rgb = np.empty((n, 3))
    dmax = np.array(grid.dims, dtype=np.float64) - 1.0
    mse_sum, cauchy_raw = _kernels.render_backward(
        grid.links, grid.table, grid.aabb_min, grid.aabb_max,
        grid.lattice_scale, dmax, step,
        origins, dirs, viewdirs, np.asarray(opts.background, dtype=np.float64),
        opts.stop_thresh, opts.interp == "nearest", opts.formula == "absolute",
        _jitter_offsets(n, opts.jitter, rng),
        upstream, False, 0.0, lam_cauchy,
        grads.data, grads.touched_mask, grads.touched_ids, grads._count,
        out_rgb,
        np.empty(nmax), np.empty(nmax), np.empty(nmax), np.empty(nmax),
        np.empty(nmax), np.empty((nmax, 3)))
    return out_rgb, cauchy_raw


def render_ray_backward(grid: SparseGrid, origin: np.ndarray, direction: np.ndarray,
                        upstream: np.ndarray,
                        opts: RenderOptions | None = None,
                        viewdir: np.ndarray | None = None) -> GradientBuffer:
    """Gradient of one rendered ray w.r.t. every stored grid value."""
    grads = GradientBuffer(grid.n_rows)
    vd = None if viewdir is None else np.atleast_2d(viewdir)
    render_rays_backward(grid, origin, direction, upstream, grads, opts, vd)
    return grads


def fused_mse_backward(grid: SparseGrid, origins, dirs, viewdirs, gt_rgb,
                       grads: GradientBuffer, opts: RenderOptions,
                       n_total: int, lam_cauchy: float = 0.0, rng=None):
    """Training-path fusion: forward render, mean-squared-error upstream
    2 (C - gt) / n_total, and the reverse gradient sweep in one kernel call.

    Returns (rendered rgb, mse contribution sum, raw cauchy sum).
    """
    origins, dirs = _as_batch(origins, dirs)
    gt_rgb = np.ascontiguousarray(gt_rgb, dtype=np.float64)
    n = origins.shape[0]
    step = _step_size(grid, opts.step_frac)
    nmax = _max_samples(grid, step)
    out_rgb = np.empty((n, 3))
    dmax = np.array(grid.dims, dtype=np.float64) - 1.0
    mse_sum, cauchy_raw = _kernels.render_backward(
        grid.links, grid.table, grid.aabb_min, grid.aabb_max,
        grid.lattice_scale, dmax, step,
        origins, dirs, viewdirs, np.asarray(opts.background, dtype=np.float64),
        opts.stop_thresh, opts.interp == "nearest", opts.formula == "absolute",
        _jitter_offsets(n, opts.jitter, rng),
        gt_rgb, True, 2.0 / n_total, lam_cauchy,
        grads.data, grads.touched_mask, grads.touched_ids, grads._count,
        out_rgb,
        np.empty(nmax), np.empty(nmax), np.empty(nmax), np.empty(nmax),
        np.empty(nmax), np.empty((nmax, 3)))
    return out_rgb, mse_sum, cauchy_raw


def render_image(grid: SparseGrid, camera, opts: RenderOptions | None = None,
                 chunk: int = 65536) -> np.ndarray:
    """Render a full camera view to an (H, W, 3) float image."""
    from .camera import generate_rays  # local import to avoid a cycle

    opts = opts or RenderOptions()
    origins, dirs = generate_rays(camera)
    out = np.empty((camera.height * camera.width, 3))
    for s in range(0, origins.shape[0], chunk):
        rgb, _, _ = render_rays(grid, origins[s:s + chunk], dirs[s:s + chunk], opts)
        out[s:s + chunk] = rgb
    return out.reshape(camera.height, camera.width, 3)
