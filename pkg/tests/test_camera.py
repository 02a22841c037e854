import json
import math

import numpy as np
import pytest
from PIL import Image

import plenoxel as px
from plenoxel.camera import (Camera, DatasetError, all_rays,
                             check_split_disjoint, generate_ray,
                             generate_rays, load_nerf_dataset, ndc_ray, to_ndc)


def _identity_cam(focal=2.0, w=2, h=2):
    return Camera(c2w=np.eye(4), focal=focal, width=w, height=h, near=1.0)


def _random_cam(rng, w=24, h=18, focal=30.0, radius=3.0):
    pos = radius * (rng.normal(size=3) + np.array([0, 0, 2.0]))
    zc = pos / np.linalg.norm(pos)
    up = np.array([0.0, 0.0, 1.0])
    xc = np.cross(up, zc)
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = xc, yc, zc, pos
    return Camera(c2w=c2w, focal=focal, width=w, height=h, near=1.0)


def test_generate_ray_identity_pose_formula():
    cam = _identity_cam()
    ray = generate_ray(cam, 0, 0)
    expected = np.array([-0.25, 0.25, -1.0])
    expected /= np.linalg.norm(expected)
    np.testing.assert_allclose(ray.direction, expected, atol=1e-12)
    np.testing.assert_array_equal(ray.origin, 0.0)


def test_symmetric_pixels_mirror_about_axis():
    cam = _identity_cam(focal=4.0, w=4, h=4)
    left = generate_ray(cam, 0, 1).direction
    right = generate_ray(cam, 3, 1).direction
    assert left[0] == pytest.approx(-right[0], abs=1e-12)
    assert left[1] == pytest.approx(right[1], abs=1e-12)


def test_ray_origin_is_camera_translation():
    rng = np.random.default_rng(0)
    cam = _random_cam(rng)
    ray = generate_ray(cam, 3, 4)
    np.testing.assert_allclose(ray.origin, cam.c2w[:3, 3], atol=1e-12)


def test_ray_directions_unit_norm():
    rng = np.random.default_rng(1)
    cam = _random_cam(rng)
    _, dirs = generate_rays(cam)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-6)


def test_generate_rays_matches_single_ray_api():
    rng = np.random.default_rng(2)
    cam = _random_cam(rng, w=5, h=4)
    origins, dirs = generate_rays(cam)
    for py in range(4):
        for px_ in range(5):
            ray = generate_ray(cam, px_, py)
            np.testing.assert_allclose(dirs[py * 5 + px_], ray.direction,
                                       atol=1e-12)


def test_out_of_range_pixel_raises():
    cam = _identity_cam()
    with pytest.raises(ValueError):
        generate_ray(cam, 2, 0)


def test_invalid_camera_rejected():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(DatasetError):
        Camera(c2w=bad, focal=10.0, width=4, height=4)
    with pytest.raises(DatasetError):
        Camera(c2w=np.eye(4), focal=-1.0, width=4, height=4)


# -- NDC ----------------------------------------------------------------------


def _ndc_invert(p_ndc, cam, near):
    """Closed-form inverse of the NDC point map (test-local oracle)."""
    oz = 2.0 * near / (p_ndc[2] - 1.0)
    ox = -p_ndc[0] * oz * (cam.width / 2.0) / cam.focal
    oy = -p_ndc[1] * oz * (cam.height / 2.0) / cam.focal
    return np.array([ox, oy, oz])


def test_ndc_near_plane_point_maps_to_minus_one():
    cam = _identity_cam(focal=8.0, w=8, h=8)
    o = np.array([[0.0, 0.0, 0.0]])
    d = np.array([[0.0, 0.0, -1.0]])
    o_ndc, d_ndc, valid = to_ndc(o, d, cam)
    assert valid[0]
    assert o_ndc[0, 2] == pytest.approx(-1.0, abs=1e-12)


def test_ndc_far_limit_is_plus_one():
    cam = _identity_cam(focal=8.0, w=8, h=8)
    o = np.array([[0.1, -0.2, 0.0]])
    d = np.array([[0.02, 0.01, -1.0]])
    o_ndc, d_ndc, _ = to_ndc(o, d, cam)
    far_pt = o_ndc[0] + 1.0 * d_ndc[0]   # t' = 1 in NDC is the far limit
    assert far_pt[2] == pytest.approx(1.0, abs=1e-9)


def test_ndc_round_trip_recovers_world_points():
    # warp 1000 random forward rays, walk along them in NDC, invert each point
    # with the closed-form inverse, and confirm it lies on the original ray
    rng = np.random.default_rng(3)
    cam = _identity_cam(focal=20.0, w=32, h=24)
    near = 1.0
    n = 1000
    o = rng.uniform(-0.5, 0.5, (n, 3))
    o[:, 2] = 0.0
    d = rng.uniform(-0.4, 0.4, (n, 3))
    d[:, 2] = -1.0
    o_ndc, d_ndc, valid = to_ndc(o, d, cam)
    assert np.all(valid)
    for tprime in (0.0, 0.3, 0.9):
        p_ndc = o_ndc + tprime * d_ndc
        for i in range(n):
            world = _ndc_invert(p_ndc[i], cam, near)
            offset = world - o[i]
            cross = np.cross(offset, d[i])
            assert np.linalg.norm(cross) / np.linalg.norm(offset) < 1e-6
            assert world[2] <= -near + 1e-9


def test_ndc_parallel_ray_flagged_or_raises():
    cam = _identity_cam()
    o = np.array([[0.0, 0.0, -2.0]])
    d = np.array([[1.0, 0.0, 0.0]])
    _, _, valid = to_ndc(o, d, cam)
    assert not valid[0]
    with pytest.raises(ValueError):
        ndc_ray(px.Ray(origin=o[0], direction=d[0]), cam)


# -- dataset loading ------------------------------------------------------


def _write_dataset(root, n_frames, res=8, rgba=False, angle_x=0.7,
                   split="train"):
    root.mkdir(parents=True, exist_ok=True)
    (root / split).mkdir(exist_ok=True)
    frames = []
    rng = np.random.default_rng(0)
    for i in range(n_frames):
        cam = _random_cam(rng, w=res, h=res)
        name = f"{split}/r_{i}"
        if rgba:
            arr = np.zeros((res, res, 4), dtype=np.uint8)
            arr[..., 0] = 255   # fully red where opaque
            arr[: res // 2, :, 3] = 255   # top half opaque, bottom transparent
            Image.fromarray(arr, "RGBA").save(root / f"{name}.png")
        else:
            arr = (rng.uniform(0, 1, (res, res, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr, "RGB").save(root / f"{name}.png")
        frames.append({"file_path": f"./{name}",
                       "transform_matrix": cam.c2w.tolist()})
    meta = {"camera_angle_x": angle_x, "frames": frames}
    (root / f"transforms_{split}.json").write_text(json.dumps(meta))


def test_load_dataset_with_100_frames(tmp_path):
    _write_dataset(tmp_path / "ds", 100)
    ds = load_nerf_dataset(tmp_path / "ds", "bounded", "train")
    assert ds.n_views == 100
    assert len(ds.images) == 100
    w = ds.cameras[0].width
    assert ds.cameras[0].focal == pytest.approx(
        0.5 * w / math.tan(0.35), rel=1e-9)


def test_empty_frames_list_raises(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    (root / "transforms_train.json").write_text(
        json.dumps({"camera_angle_x": 0.7, "frames": []}))
    with pytest.raises(DatasetError):
        load_nerf_dataset(root, "bounded", "train")


def test_rgba_zero_alpha_composites_to_white(tmp_path):
    _write_dataset(tmp_path / "ds", 2, rgba=True)
    ds = load_nerf_dataset(tmp_path / "ds", "bounded", "train")
    img = ds.images[0]
    np.testing.assert_allclose(img[-1, 0], [1.0, 1.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(img[0, 0], [1.0, 0.0, 0.0], atol=1e-6)


def test_missing_metadata_field_names_file_and_field(tmp_path):
    root = tmp_path / "ds"
    root.mkdir()
    (root / "transforms_train.json").write_text(
        json.dumps({"camera_angle_x": 0.7,
                    "frames": [{"file_path": "./x"}]}))
    with pytest.raises(DatasetError, match="transform_matrix"):
        load_nerf_dataset(root, "bounded", "train")


def test_image_camera_count_mismatch_raises(tmp_path):
    _write_dataset(tmp_path / "ds", 3)
    meta = json.loads((tmp_path / "ds" / "transforms_train.json").read_text())
    meta["frames"][1]["file_path"] = "./train/missing"
    (tmp_path / "ds" / "transforms_train.json").write_text(json.dumps(meta))
    with pytest.raises(Exception):
        load_nerf_dataset(tmp_path / "ds", "bounded", "train")


def test_split_disjointness_check(tmp_path):
    _write_dataset(tmp_path / "ds", 3, split="train")
    _write_dataset(tmp_path / "ds", 2, split="test")
    tr = load_nerf_dataset(tmp_path / "ds", "bounded", "train")
    te = load_nerf_dataset(tmp_path / "ds", "bounded", "test")
    check_split_disjoint(tr, te)  # distinct files: fine
    with pytest.raises(DatasetError):
        check_split_disjoint(tr, tr)


def test_llff_poses_bounds_ingestion(tmp_path):
    root = tmp_path / "llff"
    (root / "images").mkdir(parents=True)
    rng = np.random.default_rng(4)
    n, h, w, f = 9, 12, 16, 20.0
    rows = []
    for i in range(n):
        # LLFF convention: columns (down, right, back) + translation + hwf
        pos = np.array([0.1 * i, 0.0, 4.0])
        m = np.eye(3)
        down, right, back = -m[1], m[0], m[2]
        pose = np.stack([down, right, back, pos], axis=1)
        hwf = np.array([[h], [w], [f]])
        rows.append(np.concatenate([np.concatenate([pose, hwf], axis=1).ravel(),
                                    [2.0, 10.0]]))
        img = (rng.uniform(0, 1, (h, w, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"im_{i:02d}.png")
    np.save(root / "poses_bounds.npy", np.stack(rows))
    train = load_nerf_dataset(root, "forward_facing_ndc", "train")
    test = load_nerf_dataset(root, "forward_facing_ndc", "test")
    assert train.n_views + test.n_views == n
    assert test.n_views == 2  # every 8th view held out
    check_split_disjoint(train, test)
    for cam in train.cameras:
        assert cam.near > 0


def test_all_rays_flattens_every_pixel(tmp_path):
    _write_dataset(tmp_path / "ds", 3, res=6)
    ds = load_nerf_dataset(tmp_path / "ds", "bounded", "train")
    o, m, v, rgb = all_rays(ds)
    assert o.shape == (3 * 36, 3)
    np.testing.assert_allclose(rgb[:36],
                               np.asarray(ds.images[0], dtype=np.float64).reshape(-1, 3),
                               atol=1e-7)
