"""Per-coefficient first-order optimization with sparse row updates.

RMSProp is the default (it copes with the severe ill-conditioning of direct
voxel optimization); plain SGD is kept for ablations. Updates touch only the
rows that received gradient this step, and second-moment state for untouched
entries is deliberately left stale rather than decayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import GradientBuffer, ROW_SIZE, SparseGrid


@dataclass
class LrSchedule:
    """Learning-rate schedule: constant, exponential decay, or exponential
    decay multiplied by a smooth sine delay ramp rising from delay_mult to 1
    over the first delay_steps."""

    kind: str = "exponential"   # constant | exponential | delayed_exponential
    lr_init: float = 0.01
    lr_final: float = 0.01
    total_steps: int = 250000
    delay_steps: int = 0
    delay_mult: float = 0.01

    def __post_init__(self):
        if self.kind not in ("constant", "exponential", "delayed_exponential"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (self.lr_init >= self.lr_final > 0):
            raise ValueError("need lr_init >= lr_final > 0")
        if self.delay_steps < 0:
            raise ValueError("delay_steps must be >= 0")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at an optimization step (clamped beyond total_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.kind == "constant":
        return schedule.lr_init
    t = min(max(step / schedule.total_steps, 0.0), 1.0)
    lr = schedule.lr_init * (schedule.lr_final / schedule.lr_init) ** t
    if schedule.kind == "delayed_exponential" and schedule.delay_steps > 0:
        p = min(max(step / schedule.delay_steps, 0.0), 1.0)
        ramp = schedule.delay_mult + (1.0 - schedule.delay_mult) * math.sin(
            0.5 * math.pi * p)
        lr *= ramp
    return lr


class OptimState:
    """Per-row, per-value running second moments for RMSProp."""

    def __init__(self, n_rows: int, n_cols: int = ROW_SIZE,
                 beta: float = 0.95, eps: float = 1e-8):
        self.v = np.zeros((n_rows, n_cols), dtype=np.float64)
        self.beta = float(beta)
        self.eps = float(eps)
        self.step_count = 0

    @property
    def n_rows(self) -> int:
        return self.v.shape[0]

    def reindex(self, kept_rows: np.ndarray) -> None:
        """Follow a prune compaction: new row i held old row kept_rows[i]."""
        self.v = self.v[np.asarray(kept_rows, dtype=np.int64)].copy()

    def reset(self, n_rows: int) -> None:
        """Fresh state after a resolution change (old moments do not map)."""
        self.v = np.zeros((n_rows, self.v.shape[1]), dtype=np.float64)


def step(grid: SparseGrid, grads: GradientBuffer, state: OptimState,
         lr_sigma: float, lr_sh: float, method: str = "rmsprop") -> None:
    """Apply one sparse update to the grid's data table in place.

    Opacity (column 0) uses lr_sigma, SH coefficients use lr_sh. Only rows
    recorded in `grads` are visited; within them, zero-gradient entries are
    skipped entirely.
    """
    if method not in ("rmsprop", "sgd"):
        raise ValueError(f"unknown optimizer {method!r}")
    if grads.n_rows != grid.n_rows or state.n_rows != grid.n_rows:
        raise ValueError("gradient/state rows do not match the grid table")
    _kernels.opt_step(grid.table, state.v, grads.data,
                      grads.touched_ids, grads.n_touched,
                      lr_sigma, lr_sh, state.beta, state.eps,
                      method == "rmsprop")
    state.step_count += 1


def step_table(table: np.ndarray, grads_data: np.ndarray,
               touched_ids: np.ndarray, n_touched: int, state: OptimState,
               lr_first: float, lr_rest: float, method: str = "rmsprop") -> None:
    """Same update for a bare (rows, cols) table (used by the background)."""
    _kernels.opt_step(table, state.v, grads_data, touched_ids, n_touched,
                      lr_first, lr_rest, state.beta, state.eps,
                      method == "rmsprop")
    state.step_count += 1
