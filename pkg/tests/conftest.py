import numpy as np
import pytest

import plenoxel as px
from plenoxel.grid import GradientBuffer
from plenoxel.msi import (BgGradientBuffer, MsiBackground, bg_tv_loss,
                          render_rays_with_background, sample_bg_tv_cells)


def random_grid(rng, dims=(5, 5, 5), aabb=1.0, sigma_range=(0.2, 3.0),
                dc_range=(0.5, 1.5), band_scale=0.05, holes=0.0):
    """Random grid whose interpolated opacity and pre-clamp colors stay away
    from the clamp kinks (so central finite differences are valid)."""
    g = px.SparseGrid.dense(dims, (-aabb,) * 3, (aabb,) * 3)
    g.table[:, 0] = rng.uniform(*sigma_range, g.n_rows)
    for ch in range(3):
        g.table[:, 1 + 9 * ch] = rng.uniform(*dc_range, g.n_rows)
        for b in range(1, 9):
            g.table[:, 1 + 9 * ch + b] = rng.uniform(
                -band_scale, band_scale, g.n_rows)
    if holes > 0:
        links = g.links.copy()
        mask = rng.random(links.shape) < holes
        links[mask] = -1
        keep = np.sort(g.links[links >= 0])
        remap = np.full(g.n_rows, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        links = np.where(links >= 0, remap[np.maximum(links, 0)], -1)
        g = px.SparseGrid(links.astype(np.int32), g.table[keep],
                          g.aabb_min, g.aabb_max)
    return g


def random_hitting_ray(rng, aabb=1.0):
    """Origin outside the box, aimed at a random interior point."""
    target = rng.uniform(-0.6 * aabb, 0.6 * aabb, 3)
    theta = rng.uniform(0, 2 * np.pi)
    z = rng.uniform(-0.9, 0.9)
    r = np.sqrt(1 - z * z)
    origin = 3.0 * aabb * np.array([r * np.cos(theta), r * np.sin(theta), z])
    d = target - origin
    return origin, d / np.linalg.norm(d)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile every numba kernel once so test timings measure warm runs."""
    rng = np.random.default_rng(0)
    g = random_grid(rng, dims=(3, 3, 3))
    o = np.array([[-2.0, 0.1, 0.1]])
    d = np.array([[1.0, 0.0, 0.0]])
    for formula in ("relative", "absolute"):
        for interp in ("trilinear", "nearest"):
            opts = px.RenderOptions(formula=formula, interp=interp)
            px.render_rays(g, o, d, opts)
            px.render_ray_backward(g, o[0], d[0], np.ones(3), opts)
    g.max_weight_accumulate(o, d)
    buf = GradientBuffer(g.n_rows)
    px.tv_loss(g, np.arange(4, dtype=np.int64), 1.0, 1.0, buf)
    state = px.OptimState(g.n_rows)
    from plenoxel import optim
    optim.step(g, buf, state, 0.1, 0.1)
    buf.clear()
    bg = MsiBackground.create(4, 6, 8)
    bg.data[:, :, :, 0] = 0.5
    bg.data[:, :, :, 1:] = 0.3
    bgrads = BgGradientBuffer(bg)
    render_rays_with_background(g, bg, o, d,
                                gt_rgb=np.zeros((1, 3)), grads=buf,
                                bg_grads=bgrads, n_total=1)
    bg_tv_loss(bg, sample_bg_tv_cells(bg, 0.1, rng), 1.0, 1.0, bgrads)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    """The acceptance-scale toy dataset: 25 train / 10 test views, 128^2."""
    out = tmp_path_factory.mktemp("toy") / "toy128"
    px.make_toy_dataset(out, n_views=25, res=128, n_test=10, grid_dim=64)
    return out


@pytest.fixture(scope="session")
def toy_small_dir(tmp_path_factory):
    """Reduced toy variant for trend checks: 25 train / 10 test at 64^2."""
    out = tmp_path_factory.mktemp("toy") / "toy64"
    px.make_toy_dataset(out, n_views=25, res=64, n_test=10, grid_dim=64)
    return out


@pytest.fixture(scope="session")
def toy_tiny_dir(tmp_path_factory):
    """Very small dataset for CLI and trainer plumbing tests."""
    out = tmp_path_factory.mktemp("toy") / "toy_tiny"
    px.make_toy_dataset(out, n_views=4, res=32, n_test=2, grid_dim=16)
    return out
