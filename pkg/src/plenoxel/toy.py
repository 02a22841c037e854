"""Procedural oracle scene: colored spheres baked into a ground-truth grid.

The dataset images are rendered from that grid with the same renderer used
for training, so the training optimum is exactly realizable by the model.
Spheres are mostly Lambertian (DC color with a soft vertical shade); two
carry small low-order view-dependent terms. The ground-truth grid is written
next to the dataset so tests can compare recovered parameters, not just
images.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import artifact_io
from .grid import SparseGrid
from .render import RenderOptions, render_image
from .camera import Camera
from .sh import SH_C0

TOY_AABB = 1.1
TOY_SIGMA = 45.0

# (center, radius, rgb, view-dependent band: (coeff index within a channel, scale))
_SPHERES = [
    ((0.38, 0.05, 0.12), 0.42, (0.85, 0.25, 0.20), None),
    ((-0.40, 0.30, -0.12), 0.34, (0.20, 0.55, 0.90), (3, 0.20)),
    ((-0.05, -0.45, 0.30), 0.28, (0.95, 0.80, 0.25), (6, 0.15)),
    ((0.05, 0.42, 0.45), 0.22, (0.35, 0.85, 0.45), None),
]


def toy_config(grid_dim: int = 64, step_frac: float = 0.5,
               total_steps: int = 5000, batch_size: int = 3000,
               aabb: float = TOY_AABB):
    """Desk-scale training config matched to make_toy_dataset output."""
    from .optim import LrSchedule
    from .trainer import LadderRung, TrainConfig

    return TrainConfig(
        scene_type="bounded",
        aabb=(-aabb,) * 3 + (aabb,) * 3,
        ladder=[LadderRung(0, (grid_dim,) * 3)],
        total_steps=total_steps,
        batch_size=batch_size,
        step_frac=step_frac,
        lambda_tv_sigma=1e-6,
        lambda_tv_sh=1e-4,
        tv_until_step=-1,
        lr_sigma=LrSchedule(kind="delayed_exponential", lr_init=2.0,
                            lr_final=0.1, total_steps=2 * total_steps,
                            delay_steps=total_steps // 10, delay_mult=0.01),
        lr_sh=LrSchedule(kind="exponential", lr_init=0.01, lr_final=1e-4,
                         total_steps=2 * total_steps),
        eval_every=0,
        log_every=100,
        background=(1.0, 1.0, 1.0),
    )


def build_toy_grid(dims: int = 64, aabb: float = TOY_AABB) -> SparseGrid:
    """Ground-truth grid: smooth opacity shells around each sphere, colors
    shaded vertically, occupancy pruned outside the spheres."""
    d = int(dims)
    grid = SparseGrid.dense((d, d, d), (-aabb,) * 3, (aabb,) * 3)
    axis = np.linspace(-aabb, aabb, d)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    band = 2.0 * (2 * aabb / (d - 1))

    sigma = np.zeros(len(pts))
    weight_sum = np.zeros(len(pts))
    coeffs = np.zeros((len(pts), 27))
    for center, radius, rgb, viewdep in _SPHERES:
        dist = np.linalg.norm(pts - np.asarray(center), axis=1)
        s = np.clip((radius - dist) / band + 0.5, 0.0, 1.0)
        s = s * s * (3.0 - 2.0 * s)  # smoothstep
        sigma = np.maximum(sigma, TOY_SIGMA * s)
        shade = 1.0 + 0.25 * (pts[:, 2] - center[2]) / radius
        c = np.zeros((len(pts), 27))
        for ch in range(3):
            c[:, 9 * ch] = rgb[ch] * shade / SH_C0
        if viewdep is not None:
            bidx, scale = viewdep
            for ch in range(3):
                c[:, 9 * ch + bidx] = rgb[ch] * scale / SH_C0
        coeffs += s[:, None] * c
        weight_sum += s
    occupied = weight_sum > 0
    coeffs[occupied] /= weight_sum[occupied, None]

    grid.table[:, 0] = sigma
    grid.table[:, 1:] = coeffs
    grid, _ = grid.prune("density", 1e-6)
    return grid


def _hemisphere_cameras(n: int, res: int, radius: float = 3.0,
                        fov_x: float = 0.6911112, phase: float = 0.0):
    """Deterministic golden-angle spiral of inward-facing upper-hemisphere
    poses (world z up, OpenGL camera looking down -z)."""
    cams = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    focal = 0.5 * res / math.tan(0.5 * fov_x)
    for i in range(n):
        elev = math.radians(8.0 + 55.0 * ((i + 0.5) / n))
        azim = phase + i * golden
        pos = radius * np.array([math.cos(azim) * math.cos(elev),
                                 math.sin(azim) * math.cos(elev),
                                 math.sin(elev)])
        zc = pos / np.linalg.norm(pos)              # camera backward
        up = np.array([0.0, 0.0, 1.0])
        xc = np.cross(up, zc)
        xc /= np.linalg.norm(xc)
        yc = np.cross(zc, xc)
        c2w = np.eye(4)
        c2w[:3, 0] = xc
        c2w[:3, 1] = yc
        c2w[:3, 2] = zc
        c2w[:3, 3] = pos
        cams.append(Camera(c2w=c2w, focal=focal, width=res, height=res))
    return cams, fov_x


def make_toy_dataset(out_dir, n_views: int = 25, res: int = 128,
                     n_test: int = 10, grid_dim: int = 64,
                     step_frac: float = 0.5, seed: int = 0) -> Path:
    """Write a transforms_{train,test}.json dataset rendered from the baked
    ground-truth grid, plus the grid itself (gt_grid.plnx) and a ready-made
    desk-scale training config (toy_config.yaml)."""
    from .trainer import save_config

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = build_toy_grid(grid_dim)
    artifact_io.save_grid(grid, out / "gt_grid.plnx")
    opts = RenderOptions(step_frac=step_frac, background=(1.0, 1.0, 1.0))

    rng = np.random.default_rng(seed)
    phase_train = float(rng.uniform(0, 2 * math.pi))
    phase_test = phase_train + 0.5  # offset so splits never share a pose
    for split, count, phase in (("train", n_views, phase_train),
                                ("test", n_test, phase_test)):
        cams, fov_x = _hemisphere_cameras(count, res, phase=phase)
        (out / split).mkdir(exist_ok=True)
        frames = []
        for i, cam in enumerate(cams):
            img = render_image(grid, cam, opts)
            name = f"{split}/r_{i:03d}"
            artifact_io.write_image(img, out / f"{name}.png")
            frames.append({"file_path": f"./{name}",
                           "transform_matrix": cam.c2w.tolist()})
        meta = {"camera_angle_x": fov_x, "frames": frames}
        (out / f"transforms_{split}.json").write_text(json.dumps(meta, indent=1))

    cfg = toy_config(grid_dim=grid_dim, step_frac=step_frac)
    save_config(cfg, out / "toy_config.yaml")
    return out
