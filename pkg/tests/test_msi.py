import math

import numpy as np
import pytest

import plenoxel as px
from plenoxel.grid import GradientBuffer
from plenoxel.msi import (BgGradientBuffer, MsiBackground, bg_tv_loss,
                          layer_radii, render_rays_with_background,
                          sample_background, sample_bg_tv_cells)


def _bg(n_layers=6, h=8, w=12, sigma=0.5, rgb=(0.3, 0.5, 0.7)):
    bg = MsiBackground.create(n_layers, h, w)
    bg.data[..., 0] = sigma
    bg.data[..., 1] = rgb[0]
    bg.data[..., 2] = rgb[1]
    bg.data[..., 3] = rgb[2]
    return bg


def _empty_grid(dims=(4, 4, 4)):
    return px.SparseGrid.dense(dims, (-1, -1, -1), (1, 1, 1), sigma=0.0)


def test_layer_radii_linear_in_inverse_radius():
    r = layer_radii(64)
    inv = 1.0 / r
    np.testing.assert_allclose(np.diff(inv), -1.0 / 63.0, atol=1e-12)
    assert r[0] == 1.0
    assert math.isinf(r[-1])
    assert np.all(np.diff(r) > 0)


def test_constant_layers_sample_constant():
    bg = _bg()
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * \
        rng.uniform(1.0, 30.0, (50, 1))
    sig, rgb = sample_background(bg, pts)
    np.testing.assert_allclose(sig, 0.5, atol=1e-12)
    np.testing.assert_allclose(rgb, np.tile([0.3, 0.5, 0.7], (50, 1)), atol=1e-12)


def test_sample_inside_unit_sphere_raises():
    bg = _bg()
    with pytest.raises(ValueError):
        sample_background(bg, np.array([0.5, 0.0, 0.0]))


def test_lattice_node_returns_stored_texel():
    bg = _bg(n_layers=5, h=6, w=8)
    rng = np.random.default_rng(1)
    bg.data[:] = rng.uniform(0.1, 1.0, bg.data.shape)
    layer, j, i = 2, 3, 5
    r = bg.radii[layer]
    theta = (j + 0.5) * math.pi / bg.height
    phi = -math.pi + (i + 0.5) * 2 * math.pi / bg.width
    p = r * np.array([math.sin(theta) * math.cos(phi),
                      math.sin(theta) * math.sin(phi),
                      math.cos(theta)])
    sig, rgb = sample_background(bg, p)
    assert sig == pytest.approx(bg.data[layer, j, i, 0], rel=1e-9)
    np.testing.assert_allclose(rgb, bg.data[layer, j, i, 1:], rtol=1e-9)


def test_random_exterior_point_matches_scalar_stencil_oracle():
    bg = _bg(n_layers=5, h=6, w=8)
    rng = np.random.default_rng(2)
    bg.data[:] = rng.uniform(0.0, 1.0, bg.data.shape)
    L, H, W = bg.n_layers, bg.height, bg.width
    for _ in range(50):
        p = rng.normal(size=3)
        p = p / np.linalg.norm(p) * rng.uniform(1.01, 50.0)
        # independent scalar re-implementation of the warped stencil
        r = np.linalg.norm(p)
        lc = min(max((1 - 1 / r) * (L - 1), 0.0), L - 1)
        l0 = min(int(lc), L - 2)
        fl = lc - l0
        phi = math.atan2(p[1], p[0])
        theta = math.acos(max(-1.0, min(1.0, p[2] / r)))
        u = ((phi + math.pi) / (2 * math.pi) * W - 0.5) % W
        v = min(max(theta / math.pi * H - 0.5, 0.0), H - 1.0)
        i0 = min(int(u), W - 1)
        fu = u - i0
        i1 = (i0 + 1) % W
        j0 = min(int(v), H - 2)
        fv = v - j0
        expect = np.zeros(4)
        for dl, wl in ((0, 1 - fl), (1, fl)):
            for jj, wv in ((j0, 1 - fv), (j0 + 1, fv)):
                for ii, wu in ((i0, 1 - fu), (i1, fu)):
                    expect += wl * wv * wu * bg.data[l0 + dl, jj, ii]
        sig, rgb = sample_background(bg, p)
        assert sig == pytest.approx(expect[0], abs=1e-6)
        np.testing.assert_allclose(rgb, expect[1:], atol=1e-6)


def test_phi_seam_continuity():
    bg = _bg(n_layers=4, h=6, w=10)
    rng = np.random.default_rng(3)
    bg.data[:] = rng.uniform(0.0, 1.0, bg.data.shape)
    gaps = []
    for eps in (1e-3, 1e-5, 1e-7):
        r = 2.0
        theta = 1.1
        pa = r * np.array([math.cos(math.pi - eps) * math.sin(theta),
                           math.sin(math.pi - eps) * math.sin(theta),
                           math.cos(theta)])
        pb = r * np.array([math.cos(-math.pi + eps) * math.sin(theta),
                           math.sin(-math.pi + eps) * math.sin(theta),
                           math.cos(theta)])
        sa, ca = sample_background(bg, pa)
        sb, cb = sample_background(bg, pb)
        gaps.append(abs(sa - sb) + np.max(np.abs(ca - cb)))
    assert gaps[1] < gaps[0] or gaps[0] < 1e-9
    assert gaps[2] < 1e-5


# -- composite rendering --------------------------------------------------


def test_empty_everything_renders_black_with_full_transmittance():
    grid = _empty_grid()
    bg = _bg(sigma=0.0, rgb=(0, 0, 0))
    o = np.array([[0.1, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    rgb, tfg, trans, _, _, _ = render_rays_with_background(grid, bg, o, d)
    np.testing.assert_allclose(rgb, 0.0, atol=1e-12)
    assert tfg[0] == 1.0
    assert trans[0] == 1.0


def test_empty_foreground_opaque_inner_layer_hand_value():
    grid = _empty_grid()
    sigma, color = 4.0, (0.8, 0.4, 0.2)
    bg = _bg(n_layers=6, sigma=0.0, rgb=color)
    bg.data[0, :, :, 0] = sigma  # only the innermost layer carries opacity
    # axis ray exits the foreground cube exactly at the unit sphere
    o = np.array([[0.0, 0.0, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    rgb, tfg, trans, _, _, _ = render_rays_with_background(grid, bg, o, d)
    assert tfg[0] == 1.0
    radii = bg.radii
    delta = radii[1] - radii[0]  # first crossing to the next, along the axis
    alpha = 1 - math.exp(-sigma * delta)
    np.testing.assert_allclose(rgb[0], alpha * np.array(color), rtol=1e-9)


def test_opaque_foreground_blocks_background():
    grid = px.SparseGrid.dense((4, 4, 4), (-1, -1, -1), (1, 1, 1),
                               sigma=500.0, rgb=0.5)
    bg = _bg(sigma=5.0, rgb=(1.0, 0.0, 0.0))
    o = np.array([[-0.9, 0.05, 0.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    rgb, tfg, trans, _, _, _ = render_rays_with_background(grid, bg, o, d)
    assert tfg[0] < 1e-6
    # red background must not leak through
    assert rgb[0, 0] - rgb[0, 1] < 1e-6


def test_composite_weights_plus_residual_sum_to_one():
    # colors are 1 everywhere, so the rendered value equals the weight sum
    rng = np.random.default_rng(4)
    grid = px.SparseGrid.dense((4, 4, 4), (-1, -1, -1), (1, 1, 1))
    grid.table[:, 0] = rng.uniform(0.0, 2.0, grid.n_rows)
    from plenoxel.sh import SH_C0
    for ch in range(3):
        grid.table[:, 1 + 9 * ch] = 1.0 / SH_C0
    bg = _bg(n_layers=8, sigma=0.3, rgb=(1.0, 1.0, 1.0))
    o = rng.uniform(-0.4, 0.4, (100, 3))
    d = rng.normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rgb, tfg, trans, _, _, _ = render_rays_with_background(
        grid, bg, o, d, opts=px.RenderOptions(stop_thresh=0.0))
    np.testing.assert_allclose(rgb + trans[:, None], 1.0, atol=1e-6)


def test_composite_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    grid = px.SparseGrid.dense((4, 4, 4), (-1, -1, -1), (1, 1, 1))
    grid.table[:, 0] = rng.uniform(0.2, 1.5, grid.n_rows)
    from plenoxel.sh import SH_C0
    for ch in range(3):
        grid.table[:, 1 + 9 * ch] = rng.uniform(0.5, 1.5, grid.n_rows)
    bg = _bg(n_layers=5, h=6, w=8, sigma=0.0, rgb=(0.0, 0.0, 0.0))
    bg.data[:] = rng.uniform(0.1, 1.0, bg.data.shape)
    o = np.array([[0.05, -0.1, 0.08]])
    d = np.array([[0.6, 0.5, -0.4]])
    d /= np.linalg.norm(d)
    gt = np.array([[0.2, 0.4, 0.6]])
    lam_c, lam_b = 1e-3, 1e-2
    opts = px.RenderOptions(stop_thresh=0.0)

    def value():
        # total objective the gradients correspond to: squared error plus the
        # cauchy and beta terms (buffers discarded)
        _, _, _, mse, craw, braw = render_rays_with_background(
            grid, bg, o, d, opts, gt_rgb=gt,
            grads=GradientBuffer(grid.n_rows), bg_grads=BgGradientBuffer(bg),
            n_total=1, lam_cauchy=lam_c, lam_beta=lam_b)
        return mse + lam_c * craw + lam_b * braw

    grads = GradientBuffer(grid.n_rows)
    bgrads = BgGradientBuffer(bg)
    render_rays_with_background(grid, bg, o, d, opts, gt_rgb=gt, grads=grads,
                                bg_grads=bgrads, n_total=1,
                                lam_cauchy=lam_c, lam_beta=lam_b)
    h = 1e-4
    dense = grads.dense()
    nz = np.argwhere(dense != 0)
    for row, col in nz[rng.permutation(len(nz))[:60]]:
        old = grid.table[row, col]
        grid.table[row, col] = old + h
        fp = value()
        grid.table[row, col] = old - h
        fm = value()
        grid.table[row, col] = old
        fd = (fp - fm) / (2 * h)
        assert dense[row, col] == pytest.approx(fd, rel=2e-4, abs=1e-7)
    # background texel gradients
    flat = bgrads.data
    nzb = np.argwhere(flat != 0)
    view = bg.data.reshape(-1, 4)
    for r, c in nzb[rng.permutation(len(nzb))[:60]]:
        old = view[r, c]
        view[r, c] = old + h
        fp = value()
        view[r, c] = old - h
        fm = value()
        view[r, c] = old
        fd = (fp - fm) / (2 * h)
        assert flat[r, c] == pytest.approx(fd, rel=2e-4, abs=1e-7)


def test_bg_tv_wraps_phi_seam():
    bg = _bg(n_layers=3, h=4, w=6, sigma=0.0, rgb=(0, 0, 0))
    # step in color across the phi seam only
    bg.data[1, 2, 0, 1] = 1.0
    cells = np.array([(1 * 4 + 2) * 6 + 5], dtype=np.int64)  # (l=1, j=2, i=5)
    _, tv_rgb = bg_tv_loss(bg, cells, 0.0, 1.0, eps=0.0)
    # phi neighbor of i=5 wraps to i=0 where the value is 1
    expected = abs(1.0 - 0.0) * (6 / 256.0)
    assert tv_rgb == pytest.approx(expected, rel=1e-12)


def test_bg_tv_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    bg = _bg(n_layers=3, h=4, w=6)
    bg.data[:] = rng.uniform(0.0, 1.0, bg.data.shape)
    cells = np.arange(3 * 4 * 6, dtype=np.int64)
    buf = BgGradientBuffer(bg)
    bg_tv_loss(bg, cells, 0.9, 1.1, buf)

    def value():
        a, b = bg_tv_loss(bg, cells, 0.9, 1.1)
        return a + b

    dense = buf.data
    view = bg.data.reshape(-1, 4)
    nz = np.argwhere(dense != 0)
    h = 1e-5
    for r, c in nz[rng.permutation(len(nz))[:100]]:
        old = view[r, c]
        view[r, c] = old + h
        fp = value()
        view[r, c] = old - h
        fm = value()
        view[r, c] = old
        fd = (fp - fm) / (2 * h)
        assert dense[r, c] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_bg_cell_sampler_sized_from_fraction():
    bg = _bg(n_layers=4, h=8, w=8)
    rng = np.random.default_rng(7)
    cells = sample_bg_tv_cells(bg, 0.05, rng)
    assert len(cells) == round(0.05 * 4 * 8 * 8)
    assert np.all(cells >= 0) and np.all(cells < 4 * 8 * 8)
