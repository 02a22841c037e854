"""Sparse voxel grid: dense index lattice pointing into a packed data table.

Each occupied lattice point stores one 28-value data row: opacity in column 0
and 27 SH color coefficients in columns 1..27 (see sh.py for the layout).
Lattice point (i, j, k) sits at world position
aabb_min + (i, j, k) * extent / (dims - 1), so samples taken exactly at
lattice points reproduce stored values, and a grid of resolution D has D
sample points per axis. Empty cells read as all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .sh import SH_C0

EMPTY = -1
ROW_SIZE = 28


class GradientBuffer:
    """Sparse accumulator of per-row gradients mirroring a grid's data table.

    Rows that receive any contribution are tracked in insertion order so the
    optimizer can update (and later clear) only what was touched.
    """

    def __init__(self, n_rows: int):
        self.data = np.zeros((n_rows, ROW_SIZE), dtype=np.float64)
        self.touched_mask = np.zeros(n_rows, dtype=np.uint8)
        self.touched_ids = np.zeros(max(n_rows, 1), dtype=np.int64)
        self._count = np.zeros(1, dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_touched(self) -> int:
        return int(self._count[0])

    def touched_rows(self) -> np.ndarray:
        return np.sort(self.touched_ids[: self.n_touched])

    def nnz_fraction(self) -> float:
        return self.n_touched / max(self.n_rows, 1)

    def add(self, row: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (ROW_SIZE,):
            raise ValueError(f"expected {ROW_SIZE} gradient values")
        if self.touched_mask[row] == 0:
            self.touched_mask[row] = 1
            self.touched_ids[self._count[0]] = row
            self._count[0] += 1
        self.data[row] += values

    def clear(self) -> None:
        _kernels.clear_grad(self.data, self.touched_mask,
                            self.touched_ids, self._count)

    def dense(self) -> np.ndarray:
        """Copy of the gradient table (zeros where untouched)."""
        return self.data.copy()


@dataclass
class SparseGrid:
    """Dense int32 pointer lattice + float64 data table."""

    links: np.ndarray   # (Dx, Dy, Dz) int32, EMPTY or row id
    table: np.ndarray   # (rows, 28) float64
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        self.links = np.ascontiguousarray(self.links, dtype=np.int32)
        self.table = np.ascontiguousarray(self.table, dtype=np.float64)
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64).reshape(3)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64).reshape(3)
        if self.links.ndim != 3:
            raise ValueError("links must be a 3-d lattice")
        if any(d < 2 for d in self.links.shape):
            raise ValueError("grid needs at least 2 lattice points per axis")
        if self.table.ndim != 2 or self.table.shape[1] != ROW_SIZE:
            raise ValueError(f"table must be (rows, {ROW_SIZE})")
        if np.any(self.aabb_max <= self.aabb_min):
            raise ValueError("degenerate AABB")

    # -- constructors -------------------------------------------------------

    @classmethod
    def dense(cls, dims, aabb_min, aabb_max, sigma: float = 0.0,
              rgb: float | None = None) -> "SparseGrid":
        """Fully occupied grid. `rgb` sets a uniform rendered base color by
        giving every channel's DC coefficient the value rgb / SH_C0."""
        dims = tuple(int(d) for d in dims)
        n = dims[0] * dims[1] * dims[2]
        links = np.arange(n, dtype=np.int32).reshape(dims)
        table = np.zeros((n, ROW_SIZE), dtype=np.float64)
        table[:, 0] = sigma
        if rgb is not None:
            for ch in range(3):
                table[:, 1 + 9 * ch] = rgb / SH_C0
        return cls(links, table, aabb_min, aabb_max)

    @classmethod
    def empty(cls, dims, aabb_min, aabb_max) -> "SparseGrid":
        dims = tuple(int(d) for d in dims)
        links = np.full(dims, EMPTY, dtype=np.int32)
        table = np.zeros((0, ROW_SIZE), dtype=np.float64)
        return cls(links, table, aabb_min, aabb_max)

    # -- geometry -----------------------------------------------------------

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.links.shape

    @property
    def n_rows(self) -> int:
        return self.table.shape[0]

    @property
    def extent(self) -> np.ndarray:
        return self.aabb_max - self.aabb_min

    @property
    def voxel_size(self) -> np.ndarray:
        """World-space lattice spacing per axis: extent / (dims - 1)."""
        return self.extent / (np.array(self.dims, dtype=np.float64) - 1.0)

    @property
    def lattice_scale(self) -> np.ndarray:
        return (np.array(self.dims, dtype=np.float64) - 1.0) / self.extent

    def world_to_lattice(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.aabb_min) * self.lattice_scale

    def lattice_to_world(self, ijk: np.ndarray) -> np.ndarray:
        return self.aabb_min + np.asarray(ijk, dtype=np.float64) * self.voxel_size

    def _check_inside(self, pts: np.ndarray) -> None:
        tol = 1e-9 * np.max(self.extent)
        if np.any(pts < self.aabb_min - tol) or np.any(pts > self.aabb_max + tol):
            raise ValueError("sample position outside the grid AABB")

    # -- sampling -----------------------------------------------------------

    def _stencil(self, pts: np.ndarray, mode: str):
        """(rows, weights) of shape (N, 8) / (N, 1); rows may be EMPTY."""
        g = self.world_to_lattice(pts)
        dmax = np.array(self.dims, dtype=np.float64) - 1.0
        g = np.clip(g, 0.0, dmax)
        if mode == "nearest":
            idx = np.minimum(np.floor(g + 0.5).astype(np.int64),
                             np.array(self.dims) - 1)
            rows = self.links[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.int64)
            return rows[:, None], np.ones((len(g), 1))
        if mode != "trilinear":
            raise ValueError(f"unknown interpolation mode {mode!r}")
        i0 = np.minimum(np.floor(g).astype(np.int64), np.array(self.dims) - 2)
        f = g - i0
        rows = np.empty((len(g), 8), dtype=np.int64)
        ws = np.empty((len(g), 8), dtype=np.float64)
        q = 0
        for di in (0, 1):
            wx = f[:, 0] if di else 1.0 - f[:, 0]
            for dj in (0, 1):
                wy = f[:, 1] if dj else 1.0 - f[:, 1]
                for dk in (0, 1):
                    wz = f[:, 2] if dk else 1.0 - f[:, 2]
                    rows[:, q] = self.links[i0[:, 0] + di, i0[:, 1] + dj, i0[:, 2] + dk]
                    ws[:, q] = wx * wy * wz
                    q += 1
        return rows, ws

    def sample(self, pts: np.ndarray, mode: str = "trilinear"):
        """Interpolated (sigma, coeffs) at world positions inside the AABB.

        Opacity is clamped at zero after interpolation; empty cells contribute
        zeros. Accepts a single (3,) point or a batch (N, 3).
        """
        pts = np.asarray(pts, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        self._check_inside(pts)
        rows, ws = self._stencil(pts, mode)
        vals = np.where(rows[..., None] >= 0,
                        self.table[np.maximum(rows, 0)], 0.0)
        out = np.einsum("nq,nqc->nc", ws, vals)
        sigma = np.maximum(out[:, 0], 0.0)
        coeffs = out[:, 1:]
        if single:
            return float(sigma[0]), coeffs[0]
        return sigma, coeffs

    def sample_backward(self, pts: np.ndarray, upstream: np.ndarray,
                        grads: GradientBuffer, mode: str = "trilinear") -> None:
        """Adjoint of sample(): scatter upstream * weight into the stencil rows.

        `upstream` is dL/d(sigma, coeffs), 28 values per point. The opacity
        entry is masked where the interpolated opacity was clamped (< 0).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        self._check_inside(pts)
        rows, ws = self._stencil(pts, mode)
        raw = np.einsum("nq,nq->n", ws,
                        np.where(rows >= 0, self.table[np.maximum(rows, 0), 0], 0.0))
        up = upstream.copy()
        up[raw < 0.0, 0] = 0.0
        for nidx in range(len(pts)):
            for q in range(rows.shape[1]):
                r = rows[nidx, q]
                if r >= 0:
                    grads.add(int(r), ws[nidx, q] * up[nidx])

    # -- structure ops ------------------------------------------------------

    def occupancy(self) -> np.ndarray:
        return self.links >= 0

    def prune(self, criterion: str, threshold: float,
              weights: np.ndarray | None = None):
        """Drop rows whose criterion falls below `threshold`, protected by a
        26-neighbor dilation: an occupied cell survives if it or any lattice
        neighbor meets the threshold. Returns (new_grid, kept_old_rows) where
        kept_old_rows maps new row order back to old row ids.
        """
        occ = self.occupancy()
        if criterion == "weight":
            if weights is None:
                raise ValueError("weight criterion needs per-row max weights")
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (self.n_rows,):
                raise ValueError("weights must have one entry per data row")
            value = np.full(self.dims, -np.inf)
            value[occ] = weights[self.links[occ]]
        elif criterion == "density":
            value = np.full(self.dims, -np.inf)
            value[occ] = self.table[self.links[occ], 0]
        else:
            raise ValueError(f"unknown prune criterion {criterion!r}")
        deemed = occ & (value >= threshold)
        survive = occ & ndimage.binary_dilation(
            deemed, structure=np.ones((3, 3, 3), dtype=bool))
        new_links = np.full(self.dims, EMPTY, dtype=np.int32)
        n_keep = int(survive.sum())
        new_links[survive] = np.arange(n_keep, dtype=np.int32)
        kept_old = self.links[survive].astype(np.int64)
        new_table = self.table[kept_old].copy()
        grid = SparseGrid(new_links, new_table, self.aabb_min, self.aabb_max)
        return grid, kept_old

    def upsample(self, new_dims):
        """Resample onto a new lattice resolution (any dims >= 2 per axis).

        New lattice values sample this grid trilinearly at the corresponding
        world positions; a new cell is occupied iff its stencil carries
        nonzero weight on at least one occupied old cell.
        """
        new_dims = tuple(int(d) for d in new_dims)
        if any(d < 2 for d in new_dims):
            raise ValueError("upsample needs at least 2 points per axis")
        ii, jj, kk = np.meshgrid(*(np.arange(d) for d in new_dims), indexing="ij")
        ijk = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
        spacing = self.extent / (np.array(new_dims, dtype=np.float64) - 1.0)
        pts = self.aabb_min + ijk * spacing
        rows, ws = self._stencil(pts, "trilinear")
        occw = np.einsum("nq,nq->n", ws, (rows >= 0).astype(np.float64))
        occupied = occw > 0.0
        vals = np.where(rows[..., None] >= 0,
                        self.table[np.maximum(rows, 0)], 0.0)
        sampled = np.einsum("nq,nqc->nc", ws, vals)
        new_links = np.full(new_dims, EMPTY, dtype=np.int32)
        flat_occ = occupied.reshape(new_dims)
        n_new = int(occupied.sum())
        new_links[flat_occ] = np.arange(n_new, dtype=np.int32)
        new_table = sampled[occupied]
        return SparseGrid(new_links, new_table, self.aabb_min, self.aabb_max)

    def max_weight_accumulate(self, origins: np.ndarray, dirs: np.ndarray,
                              step_frac: float = 0.5,
                              stop_thresh: float = 1e-4,
                              interp: str = "trilinear") -> np.ndarray:
        """Per-row maximum of the sample weight T*(1-exp(-sigma*delta)) over
        the given rays; the pruning criterion for weight thresholding."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        out = np.zeros(self.n_rows, dtype=np.float64)
        step = step_frac * float(np.min(self.voxel_size))
        dmax = np.array(self.dims, dtype=np.float64) - 1.0
        _kernels.max_weight_accum(
            self.links, self.table, self.aabb_min, self.aabb_max,
            self.lattice_scale, dmax, step, origins, dirs,
            stop_thresh, interp == "nearest", out)
        return out

    # -- consistency --------------------------------------------------------

    def validate(self) -> None:
        """Raise unless links and table form a bijection with finite values."""
        rows = self.links[self.links >= 0]
        if rows.size != self.n_rows:
            raise AssertionError("row count does not match occupied cells")
        if rows.size:
            counts = np.bincount(rows, minlength=self.n_rows)
            if rows.max() >= self.n_rows or not np.all(counts == 1):
                raise AssertionError("links and table rows are not a bijection")
        if not np.all(np.isfinite(self.table)):
            raise AssertionError("non-finite values in data table")

    def copy(self) -> "SparseGrid":
        return SparseGrid(self.links.copy(), self.table.copy(),
                          self.aabb_min.copy(), self.aabb_max.copy())
