"""Calibrated-image datasets, pinhole ray generation, and the NDC warp.

Datasets follow the common transforms_{train,test}.json layout: a global
camera_angle_x plus one row-major 4x4 camera-to-world matrix per frame
(OpenGL convention, camera looking down -z), images referenced by relative
path. RGBA images are composited over the dataset background (white for
synthetic scenes). LLFF-style poses_bounds.npy captures are normalized onto
the same internal form at load time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifact_io import read_image


class DatasetError(ValueError):
    pass


@dataclass
class Camera:
    c2w: np.ndarray          # (4, 4) camera-to-world
    focal: float             # pixels
    width: int
    height: int
    near: float = 0.0
    far: float = math.inf

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise DatasetError("camera transform must be 4x4")
        r = self.c2w[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-4:
            raise DatasetError("camera rotation is not orthonormal")
        if self.focal <= 0:
            raise DatasetError("focal length must be positive")

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    px: int = 0
    py: int = 0
    rgb: np.ndarray | None = None


@dataclass
class Dataset:
    images: np.ndarray              # (N, H, W, 3) float32 in [0, 1]
    cameras: list[Camera]
    scene_type: str = "bounded"     # bounded | forward_facing_ndc | unbounded_360
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise DatasetError("dataset needs at least one view")
        if len(self.cameras) != len(self.images):
            raise DatasetError("image/camera count mismatch")

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def generate_ray(cam: Camera, px: int, py: int) -> Ray:
    """World ray through the center of pixel (px, py)."""
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise ValueError(f"pixel ({px}, {py}) outside the image")
    d_cam = np.array([(px + 0.5 - cam.width / 2) / cam.focal,
                      -(py + 0.5 - cam.height / 2) / cam.focal,
                      -1.0])
    d = cam.c2w[:3, :3] @ d_cam
    d /= np.linalg.norm(d)
    return Ray(origin=cam.position.copy(), direction=d, px=px, py=py)


def generate_rays(cam: Camera):
    """All pixel-center rays of a view, row-major: (origins, dirs), (H*W, 3)."""
    xs = (np.arange(cam.width) + 0.5 - cam.width / 2) / cam.focal
    ys = -(np.arange(cam.height) + 0.5 - cam.height / 2) / cam.focal
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d = d_cam @ cam.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.position, d.shape).copy()
    return o, np.ascontiguousarray(d)


def to_ndc(origins: np.ndarray, dirs: np.ndarray, cam: Camera,
           near: float | None = None):
    """Warp world rays of a forward-facing camera into the NDC cube.

    Origins are first advanced to the near plane; the projective map sends the
    view frustum to [-1, 1]^2 in x/y with z = 1 at infinity. Returns
    (ndc_origins, ndc_dirs, valid_mask); rays parallel to the image plane are
    flagged invalid rather than warped.
    """
    near = cam.near if near is None else near
    if near <= 0:
        near = 1.0
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64)).copy()
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64)).copy()
    valid = np.abs(d[:, 2]) > 1e-10
    dz = np.where(valid, d[:, 2], 1.0)
    t = -(near + o[:, 2]) / dz
    o = o + t[:, None] * d
    oz = np.where(np.abs(o[:, 2]) > 1e-12, o[:, 2], -1e-12)
    fx = cam.focal / (cam.width / 2.0)
    fy = cam.focal / (cam.height / 2.0)
    o_ndc = np.stack([
        -fx * o[:, 0] / oz,
        -fy * o[:, 1] / oz,
        1.0 + 2.0 * near / oz,
    ], axis=-1)
    d_ndc = np.stack([
        -fx * (d[:, 0] / dz - o[:, 0] / oz),
        -fy * (d[:, 1] / dz - o[:, 1] / oz),
        -2.0 * near / oz,
    ], axis=-1)
    return o_ndc, d_ndc, valid


def ndc_ray(ray: Ray, cam: Camera) -> Ray:
    """Single-ray NDC warp; raises if the ray is parallel to the image plane."""
    o, d, valid = to_ndc(ray.origin, ray.direction, cam)
    if not valid[0]:
        raise ValueError("ray parallel to the image plane cannot be warped")
    return Ray(origin=o[0], direction=d[0], px=ray.px, py=ray.py, rgb=ray.rgb)


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


def _load_transforms(root: Path, split: str, scene_type: str,
                     background: np.ndarray, downscale: int) -> Dataset:
    meta_path = root / f"transforms_{split}.json"
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{meta_path}: invalid JSON ({e})") from e
    if "frames" not in meta or not isinstance(meta["frames"], list):
        raise DatasetError(f"{meta_path}: missing 'frames' list")
    frames = meta["frames"]
    if len(frames) == 0:
        raise DatasetError(f"{meta_path}: empty frames list")

    images = []
    cameras = []
    paths = []
    for fi, frame in enumerate(frames):
        if "transform_matrix" not in frame:
            raise DatasetError(
                f"{meta_path}: frame {fi} missing 'transform_matrix'")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise DatasetError(
                f"{meta_path}: frame {fi} transform_matrix is not 4x4")
        rel = frame.get("file_path")
        if rel is None:
            raise DatasetError(f"{meta_path}: frame {fi} missing 'file_path'")
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        img = read_image(img_path, background=background, downscale=downscale)
        h, w = img.shape[:2]
        if "camera_angle_x" in meta:
            focal = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
        elif "fl_x" in meta:
            focal = float(meta["fl_x"]) / downscale
        else:
            raise DatasetError(
                f"{meta_path}: missing 'camera_angle_x' (or 'fl_x')")
        near = float(frame.get("near", meta.get("near", 0.0)))
        far = float(frame.get("far", meta.get("far", math.inf)))
        cameras.append(Camera(c2w=c2w, focal=focal, width=w, height=h,
                              near=near, far=far))
        images.append(img.astype(np.float32))
        paths.append(str(img_path))

    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{meta_path}: images have mixed resolutions")
    return Dataset(images=np.stack(images), cameras=cameras,
                   scene_type=scene_type, background=background, paths=paths)


def _load_llff(root: Path, split: str, scene_type: str,
               background: np.ndarray, downscale: int,
               hold_every: int = 8) -> Dataset:
    """poses_bounds.npy capture, normalized to the internal convention:
    axes remapped to (right, up, back), poses recentered on the average
    camera, world rescaled so the nearest bound maps to ~1.33."""
    pb = np.load(root / "poses_bounds.npy")
    if pb.ndim != 2 or pb.shape[1] != 17:
        raise DatasetError(f"{root / 'poses_bounds.npy'}: expected (N, 17)")
    poses = pb[:, :15].reshape(-1, 3, 5)
    bounds = pb[:, 15:]
    # (down, right, back) -> (right, up, back)
    poses = np.concatenate(
        [poses[:, :, 1:2], -poses[:, :, 0:1], poses[:, :, 2:]], axis=2)
    hwf = poses[0, :, 4]

    sc = 1.0 / (bounds.min() * 0.75)
    poses[:, :, 3] *= sc
    bounds = bounds * sc

    # recenter on the average pose
    center = poses[:, :, 3].mean(axis=0)
    vz = _normalize(poses[:, :, 2].sum(axis=0))
    up = poses[:, :, 1].sum(axis=0)
    vx = _normalize(np.cross(up, vz))
    vy = np.cross(vz, vx)
    c2w_avg = np.eye(4)
    c2w_avg[:3, :4] = np.stack([vx, vy, vz, center], axis=1)
    inv = np.linalg.inv(c2w_avg)

    img_dir = None
    for cand in ("images", f"images_{downscale}"):
        if (root / cand).is_dir():
            img_dir = root / cand
            break
    if img_dir is None:
        raise DatasetError(f"{root}: no images directory next to poses_bounds.npy")
    img_paths = sorted(p for p in img_dir.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(img_paths) != len(poses):
        raise DatasetError(
            f"{root}: image/camera count mismatch "
            f"({len(img_paths)} images, {len(poses)} poses)")

    idx = np.arange(len(poses))
    test_mask = idx % hold_every == 0
    pick = test_mask if split == "test" else ~test_mask

    images, cameras, paths = [], [], []
    for i in np.flatnonzero(pick):
        img = read_image(img_paths[i], background=background, downscale=downscale)
        h, w = img.shape[:2]
        focal = hwf[2] * w / hwf[1]
        c2w = np.eye(4)
        c2w[:3, :4] = poses[i, :, :4]
        c2w = inv @ c2w
        cameras.append(Camera(c2w=c2w, focal=focal, width=w, height=h,
                              near=float(bounds[i, 0]), far=float(bounds[i, 1])))
        images.append(img.astype(np.float32))
        paths.append(str(img_paths[i]))
    return Dataset(images=np.stack(images), cameras=cameras,
                   scene_type=scene_type, background=background, paths=paths)


def _normalize(v):
    return v / np.linalg.norm(v)


def load_nerf_dataset(path, scene_type: str = "bounded", split: str = "train",
                      background=(1.0, 1.0, 1.0), downscale: int = 1) -> Dataset:
    """Load one split of a calibrated dataset rooted at `path`."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    background = np.asarray(background, dtype=np.float64)
    if (root / f"transforms_{split}.json").exists():
        return _load_transforms(root, split, scene_type, background, downscale)
    if (root / "poses_bounds.npy").exists():
        return _load_llff(root, split, scene_type, background, downscale)
    raise DatasetError(
        f"{root}: found neither transforms_{split}.json nor poses_bounds.npy")


def check_split_disjoint(train: Dataset, test: Dataset) -> None:
    shared = set(train.paths) & set(test.paths)
    if shared:
        raise DatasetError(f"train/test splits share images: {sorted(shared)[:3]}")


def all_rays(dataset: Dataset):
    """Flatten every pixel of every view into ray arrays.

    Returns (origins, march_dirs, view_dirs, rgb), each (N, 3) float64, where
    march_dirs are NDC-space for forward-facing scenes and view_dirs are the
    unit world directions used for SH evaluation.
    """
    origins, mdirs, vdirs, rgb = [], [], [], []
    for img, cam in zip(dataset.images, dataset.cameras):
        o, d = generate_rays(cam)
        v = d
        if dataset.scene_type == "forward_facing_ndc":
            o, d, valid = to_ndc(o, d, cam)
            if not np.all(valid):
                keep = valid
                o, d, v = o[keep], d[keep], v[keep]
                img = img.reshape(-1, 3)[keep]
        origins.append(o)
        mdirs.append(d)
        vdirs.append(v)
        rgb.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    return (np.concatenate(origins), np.concatenate(mdirs),
            np.concatenate(vdirs), np.concatenate(rgb))
