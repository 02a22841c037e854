"""End-to-end optimization: ray shuffling, the coarse-to-fine resolution
ladder with pruning, loss assembly, evaluation, and checkpointing.

Per-scene-type hyperparameter defaults live in default_config(); the config
round-trips through a flat YAML document whose keys mirror TrainConfig
exactly (unknown keys are rejected)."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import artifact_io, losses, msi, optim, render
from .camera import Dataset, all_rays, check_split_disjoint
from .grid import GradientBuffer, SparseGrid

SCENE_TYPES = ("bounded", "forward_facing_ndc", "unbounded_360")


class TrainingDiverged(RuntimeError):
    pass


class ResourceError(RuntimeError):
    pass


@dataclass
class LadderRung:
    step: int
    dims: tuple[int, int, int]


@dataclass
class TrainConfig:
    scene_type: str = "bounded"
    aabb: tuple[float, ...] = (-1.5, -1.5, -1.5, 1.5, 1.5, 1.5)
    ladder: list[LadderRung] = field(
        default_factory=lambda: [LadderRung(0, (256, 256, 256))])
    total_steps: int = 128000
    batch_size: int = 5000
    step_frac: float = 0.5
    stop_thresh: float = 1e-4
    interp: str = "trilinear"
    formula: str = "relative"
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    prune_criterion: str = "weight"
    prune_threshold: float = 0.256
    lambda_tv_sigma: float = 1e-5
    lambda_tv_sh: float = 1e-3
    tv_sample_frac: float = 0.01
    tv_until_step: int = -1          # -1: TV active for the whole run
    lambda_sparsity: float = 0.0
    lambda_beta: float = 0.0
    lr_sigma: optim.LrSchedule = field(default_factory=lambda: optim.LrSchedule(
        kind="delayed_exponential", lr_init=30.0, lr_final=0.05,
        total_steps=250000, delay_steps=15000, delay_mult=0.01))
    lr_sh: optim.LrSchedule = field(default_factory=lambda: optim.LrSchedule(
        kind="exponential", lr_init=0.01, lr_final=5e-6, total_steps=250000))
    optimizer: str = "rmsprop"
    rms_beta: float = 0.95
    rms_eps: float = 1e-8
    init_sigma: float = 0.1
    init_rgb: float = 0.1            # rendered base color; DC coeff = this / SH_C0
    seed: int = 0
    eval_every: int = 1000
    log_every: int = 100
    checkpoint_every: int = 0        # 0: checkpoint only at rungs and the end
    jitter: float = 0.0
    ndc_z_pad: float = 0.0           # extra NDC half-extent in z, in voxels
    # unbounded_360 only
    bg_layers: int = 64
    bg_height: int = 1024
    bg_width: int = 2048
    bg_lambda_tv: float = 1e-3
    bg_lr_sigma: optim.LrSchedule = field(default_factory=lambda: optim.LrSchedule(
        kind="exponential", lr_init=30.0, lr_final=0.05, total_steps=250000))
    bg_lr_rgb: optim.LrSchedule = field(default_factory=lambda: optim.LrSchedule(
        kind="exponential", lr_init=0.01, lr_final=5e-6, total_steps=250000))
    scene_margin: float = 1.1        # camera pre-scale margin for 360 scenes

    def __post_init__(self):
        if self.scene_type not in SCENE_TYPES:
            raise ValueError(f"unknown scene type {self.scene_type!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        steps = [r.step for r in self.ladder]
        if steps != sorted(steps) or len(set(steps)) != len(steps):
            raise ValueError("ladder steps must be strictly increasing")
        if steps and steps[0] != 0:
            raise ValueError("first ladder rung must start at step 0")
        if any(s >= self.total_steps for s in steps[1:]):
            raise ValueError("ladder steps must be < total_steps")


def default_config(scene_type: str) -> TrainConfig:
    """Full-scale default hyperparameters for each scene type."""
    if scene_type == "bounded":
        return TrainConfig(
            scene_type="bounded",
            aabb=(-1.5, -1.5, -1.5, 1.5, 1.5, 1.5),
            ladder=[LadderRung(0, (256, 256, 256)),
                    LadderRung(38400, (512, 512, 512))],
            total_steps=128000,
            prune_criterion="weight",
            prune_threshold=0.256,
            lambda_tv_sigma=1e-5,
            lambda_tv_sh=1e-3,
            tv_until_step=38400,
            background=(1.0, 1.0, 1.0),
        )
    if scene_type == "forward_facing_ndc":
        return TrainConfig(
            scene_type="forward_facing_ndc",
            aabb=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0),
            ladder=[LadderRung(0, (256, 256, 128)),
                    LadderRung(38400, (512, 512, 128)),
                    LadderRung(76800, (1408, 1156, 128))],
            total_steps=128000,
            prune_criterion="density",
            prune_threshold=5.0,
            lambda_tv_sigma=5e-4,
            lambda_tv_sh=5e-3,
            lambda_sparsity=1e-12,
            background=(0.0, 0.0, 0.0),
        )
    if scene_type == "unbounded_360":
        return TrainConfig(
            scene_type="unbounded_360",
            aabb=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0),
            ladder=[LadderRung(0, (128, 128, 128)),
                    LadderRung(25600, (256, 256, 256)),
                    LadderRung(51200, (512, 512, 512)),
                    LadderRung(76800, (640, 640, 640))],
            total_steps=102400,
            prune_criterion="weight",
            prune_threshold=1.28,
            lambda_tv_sigma=5e-5,
            lambda_tv_sh=5e-3,
            lambda_sparsity=1e-11,
            lambda_beta=1e-5,
            bg_layers=64,
            bg_height=1024,
            bg_width=2048,
            bg_lambda_tv=1e-3,
            background=(0.0, 0.0, 0.0),
        )
    raise ValueError(f"unknown scene type {scene_type!r}")


# -- config (de)serialization ------------------------------------------------


def config_to_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ladder"] = [{"step": r.step, "dims": list(r.dims)} for r in cfg.ladder]
    for key in ("lr_sigma", "lr_sh", "bg_lr_sigma", "bg_lr_rgb"):
        d[key] = dataclasses.asdict(getattr(cfg, key))
    d["aabb"] = list(cfg.aabb)
    d["background"] = list(cfg.background)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kw = dict(d)
    if "ladder" in kw:
        rungs = []
        for r in kw["ladder"]:
            extra = set(r) - {"step", "dims"}
            if extra:
                raise ValueError(f"unknown ladder keys: {sorted(extra)}")
            rungs.append(LadderRung(int(r["step"]), tuple(int(x) for x in r["dims"])))
        kw["ladder"] = rungs
    for key in ("lr_sigma", "lr_sh", "bg_lr_sigma", "bg_lr_rgb"):
        if key in kw and isinstance(kw[key], dict):
            extra = set(kw[key]) - {f.name for f in dataclasses.fields(optim.LrSchedule)}
            if extra:
                raise ValueError(f"unknown {key} keys: {sorted(extra)}")
            kw[key] = optim.LrSchedule(**kw[key])
    for key in ("aabb", "background"):
        if key in kw:
            kw[key] = tuple(float(x) for x in kw[key])
    return TrainConfig(**kw)


def load_config(path) -> TrainConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a key-value document")
    return config_from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


def apply_override(d: dict, dotted_key: str, value):
    node = d
    parts = dotted_key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise KeyError(f"unknown config key {dotted_key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {dotted_key!r}")
    node[parts[-1]] = value


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    grid: SparseGrid
    background: msi.MsiBackground | None
    metrics: list[dict]
    config: TrainConfig
    scene_scale: float = 1.0


class EpochBatcher:
    """Without-replacement batch sampler: every ray index appears exactly
    once per epoch; epochs are independent reshuffles of the same rng."""

    def __init__(self, n: int, batch_size: int, rng):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0

    def next(self) -> np.ndarray:
        chunks = []
        need = self.batch_size
        while need > 0:
            if self.cursor >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.cursor = 0
            take = min(need, self.n - self.cursor)
            chunks.append(self.perm[self.cursor:self.cursor + take])
            self.cursor += take
            need -= take
        return np.concatenate(chunks) if len(chunks) > 1 else chunks[0]


def _render_opts(cfg: TrainConfig) -> render.RenderOptions:
    bg = (0.0, 0.0, 0.0) if cfg.scene_type == "unbounded_360" else cfg.background
    return render.RenderOptions(
        step_frac=cfg.step_frac, stop_thresh=cfg.stop_thresh,
        background=tuple(bg), interp=cfg.interp, formula=cfg.formula,
        jitter=cfg.jitter)


def _grid_aabb(cfg: TrainConfig, dims) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array(cfg.aabb[:3], dtype=np.float64)
    hi = np.array(cfg.aabb[3:], dtype=np.float64)
    if cfg.scene_type == "forward_facing_ndc" and cfg.ndc_z_pad > 0:
        pad = cfg.ndc_z_pad * (hi[2] - lo[2]) / (dims[2] - 1)
        lo = lo.copy()
        hi = hi.copy()
        lo[2] -= pad
        hi[2] += pad
    return lo, hi


def _scene_scale_360(dataset: Dataset, margin: float) -> float:
    pos = np.stack([c.position for c in dataset.cameras])
    return _scale_from_positions(pos, margin)


def _scale_from_positions(pos: np.ndarray, margin: float) -> float:
    centroid = pos.mean(axis=0)
    maxdist = float(np.max(np.linalg.norm(pos - centroid, axis=1)))
    if maxdist <= 0:
        return 1.0
    return 1.0 / (margin * maxdist)


def train_split_scene_scale(data_dir, margin: float = 1.1) -> float:
    """Recompute the 360 camera prescale from a dataset's training split
    (metadata only); lets eval/render align with a previously trained grid."""
    import json as _json
    from pathlib import Path as _Path

    meta_path = _Path(data_dir) / "transforms_train.json"
    meta = _json.loads(meta_path.read_text())
    pos = np.array([np.asarray(f["transform_matrix"])[:3, 3]
                    for f in meta["frames"]])
    return _scale_from_positions(pos, margin)


def _estimate_table_bytes(dims) -> int:
    cells = int(np.prod([int(d) for d in dims]))
    return cells * (4 + 28 * 8)  # links + worst-case dense float64 rows


def evaluate(grid: SparseGrid, dataset: Dataset, opts: render.RenderOptions,
             background: msi.MsiBackground | None = None,
             scene_scale: float = 1.0):
    """Mean PSNR/SSIM over a dataset's views. Returns (psnr, ssim, rows)."""
    from .camera import generate_rays, to_ndc

    rows = []
    for vi, (img, cam) in enumerate(zip(dataset.images, dataset.cameras)):
        o, d = generate_rays(cam)
        if dataset.scene_type == "forward_facing_ndc":
            v = d
            o, d, _ = to_ndc(o, d, cam)
            pred = np.empty((o.shape[0], 3))
            for s in range(0, o.shape[0], 65536):
                rgb, _, _ = render.render_rays(
                    grid, o[s:s + 65536], d[s:s + 65536], opts,
                    viewdirs=v[s:s + 65536])
                pred[s:s + 65536] = rgb
        elif dataset.scene_type == "unbounded_360":
            o = o * scene_scale
            pred = np.empty((o.shape[0], 3))
            for s in range(0, o.shape[0], 65536):
                rgb = msi.render_rays_with_background(
                    grid, background, o[s:s + 65536], d[s:s + 65536], opts)[0]
                pred[s:s + 65536] = rgb
        else:
            pred = np.empty((o.shape[0], 3))
            for s in range(0, o.shape[0], 65536):
                rgb, _, _ = render.render_rays(
                    grid, o[s:s + 65536], d[s:s + 65536], opts)
                pred[s:s + 65536] = rgb
        pred = pred.reshape(img.shape)
        gt = np.asarray(img, dtype=np.float64)
        rows.append({"view": vi,
                     "psnr": losses.psnr(pred, gt),
                     "ssim": losses.ssim(pred, gt)})
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    return mean_psnr, mean_ssim, rows


def train(train_ds: Dataset, config: TrainConfig,
          test_ds: Dataset | None = None, out_dir=None,
          metrics_sink=None, progress: bool = False) -> TrainResult:
    """Optimize a grid (and background for 360 scenes) on the training views.

    Emits metric records through `metrics_sink` (a callable taking one dict):
    training-loss lines every log_every steps and {step, psnr, ssim,
    wall_time_s} lines at the eval cadence. Deterministic for a fixed seed.
    """
    cfg = config
    if test_ds is not None:
        check_split_disjoint(train_ds, test_ds)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []

    def emit(rec: dict):
        metrics.append(rec)
        if metrics_sink is not None:
            metrics_sink(rec)

    origins, mdirs, vdirs, gt = all_rays(train_ds)
    scene_scale = 1.0
    if cfg.scene_type == "unbounded_360":
        scene_scale = _scene_scale_360(train_ds, cfg.scene_margin)
        origins = origins * scene_scale

    dims0 = cfg.ladder[0].dims
    lo, hi = _grid_aabb(cfg, dims0)
    grid = SparseGrid.dense(dims0, lo, hi, sigma=cfg.init_sigma, rgb=cfg.init_rgb)
    state = optim.OptimState(grid.n_rows, beta=cfg.rms_beta, eps=cfg.rms_eps)
    grads = GradientBuffer(grid.n_rows)
    opts = _render_opts(cfg)

    background = None
    bg_state = None
    bg_grads = None
    if cfg.scene_type == "unbounded_360":
        background = msi.MsiBackground.create(cfg.bg_layers, cfg.bg_height,
                                              cfg.bg_width)
        background.data[:, :, :, 0] = cfg.init_sigma
        background.data[:, :, :, 1:] = cfg.init_rgb
        bg_state = optim.OptimState(
            cfg.bg_layers * cfg.bg_height * cfg.bg_width, 4,
            beta=cfg.rms_beta, eps=cfg.rms_eps)
        bg_grads = msi.BgGradientBuffer(background)

    n_rays = origins.shape[0]
    batcher = EpochBatcher(n_rays, cfg.batch_size, rng)
    rung_events = {r.step: r.dims for r in cfg.ladder[1:]}
    t_start = time.perf_counter()
    last_eval_step = -1
    nnz_fractions: list[tuple[int, float]] = []

    step_iter = range(cfg.total_steps)
    if progress:
        from tqdm import tqdm
        step_iter = tqdm(step_iter, desc="train", unit="step")

    for step in step_iter:
        if step in rung_events:
            new_dims = rung_events[step]
            if cfg.prune_criterion == "weight":
                weights = grid.max_weight_accumulate(
                    origins, mdirs, cfg.step_frac, cfg.stop_thresh, cfg.interp)
                grid, kept = grid.prune("weight", cfg.prune_threshold, weights)
            else:
                grid, kept = grid.prune("density", cfg.prune_threshold)
            state.reindex(kept)
            need = _estimate_table_bytes(new_dims)
            import psutil  # local import: only needed at rung events

            avail = psutil.virtual_memory().available
            if need > avail:
                raise ResourceError(
                    f"upsampling to {tuple(new_dims)} needs ~{need >> 20} MiB, "
                    f"only {avail >> 20} MiB available")
            try:
                grid = grid.upsample(new_dims)
            except MemoryError as e:
                raise ResourceError(
                    f"out of memory upsampling to {tuple(new_dims)}") from e
            state.reset(grid.n_rows)
            grads = GradientBuffer(grid.n_rows)
            if out_dir is not None:
                artifact_io.save_checkpoint(
                    out_dir / f"checkpoint_{step:07d}.plnx", grid, state, step,
                    background, bg_state)

        idx = batcher.next()
        bo = np.ascontiguousarray(origins[idx])
        bm = np.ascontiguousarray(mdirs[idx])
        bv = np.ascontiguousarray(vdirs[idx])
        bg_rgb = np.ascontiguousarray(gt[idx])

        lam_s = cfg.lambda_sparsity
        if cfg.scene_type == "unbounded_360":
            _, _, _, mse_sum, cauchy_raw, beta_raw = msi.render_rays_with_background(
                grid, background, bo, bm, opts,
                gt_rgb=bg_rgb, grads=grads, bg_grads=bg_grads,
                n_total=len(idx), lam_cauchy=lam_s,
                lam_beta=cfg.lambda_beta)
        else:
            _, mse_sum, cauchy_raw = render.fused_mse_backward(
                grid, bo, bm, bv, bg_rgb, grads, opts,
                n_total=len(idx), lam_cauchy=lam_s, rng=rng)
            beta_raw = 0.0
        loss_mse = mse_sum / len(idx)

        tv_on = (cfg.lambda_tv_sigma > 0 or cfg.lambda_tv_sh > 0) and (
            cfg.tv_until_step < 0 or step < cfg.tv_until_step)
        tv_sig = tv_sh = 0.0
        if tv_on:
            cells = losses.sample_tv_cells(grid, cfg.tv_sample_frac, rng)
            tv_sig, tv_sh = losses.tv_loss(
                grid, cells, cfg.lambda_tv_sigma, cfg.lambda_tv_sh, grads)
            if background is not None and cfg.bg_lambda_tv > 0:
                bcells = msi.sample_bg_tv_cells(background, cfg.tv_sample_frac, rng)
                msi.bg_tv_loss(background, bcells, cfg.bg_lambda_tv,
                               cfg.bg_lambda_tv, bg_grads)

        loss = (loss_mse + tv_sig + tv_sh + lam_s * cauchy_raw
                + cfg.lambda_beta * beta_raw)
        if not math.isfinite(loss):
            if out_dir is not None:
                artifact_io.save_grid(grid, out_dir / "diverged.plnx", background)
            raise TrainingDiverged(
                f"non-finite loss at step {step}: mse={loss_mse!r} "
                f"tv=({tv_sig!r}, {tv_sh!r})")

        nnz = grads.nnz_fraction()
        lr_s = optim.lr_at(cfg.lr_sigma, step)
        lr_c = optim.lr_at(cfg.lr_sh, step)
        optim.step(grid, grads, state, lr_s, lr_c, cfg.optimizer)
        grads.clear()
        if background is not None:
            optim.step_table(background.data.reshape(-1, 4), bg_grads.data,
                             bg_grads.touched_ids, bg_grads.n_touched, bg_state,
                             optim.lr_at(cfg.bg_lr_sigma, step),
                             optim.lr_at(cfg.bg_lr_rgb, step), cfg.optimizer)
            bg_grads.clear()

        if cfg.log_every > 0 and step % cfg.log_every == 0:
            nnz_fractions.append((step, nnz))
            emit({"step": step, "loss": loss, "mse": loss_mse,
                  "nnz_fraction": nnz})
        if test_ds is not None and cfg.eval_every > 0 and (
                step + 1) % cfg.eval_every == 0:
            p, s, _ = evaluate(grid, test_ds, opts, background, scene_scale)
            last_eval_step = step + 1
            emit({"step": step + 1, "psnr": p, "ssim": s,
                  "wall_time_s": time.perf_counter() - t_start})
        if (cfg.checkpoint_every > 0 and out_dir is not None
                and (step + 1) % cfg.checkpoint_every == 0):
            artifact_io.save_checkpoint(
                out_dir / f"checkpoint_{step + 1:07d}.plnx", grid, state,
                step + 1, background, bg_state)

    if test_ds is not None and last_eval_step != cfg.total_steps:
        p, s, _ = evaluate(grid, test_ds, opts, background, scene_scale)
        emit({"step": cfg.total_steps, "psnr": p, "ssim": s,
              "wall_time_s": time.perf_counter() - t_start})
    if out_dir is not None:
        artifact_io.save_checkpoint(out_dir / "final.plnx", grid, state,
                                    cfg.total_steps, background, bg_state)
    return TrainResult(grid=grid, background=background, metrics=metrics,
                       config=cfg, scene_scale=scene_scale)
