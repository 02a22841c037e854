"""Bit-exact serialization of trained grids, checkpoints, and image I/O.

Grid container layout (little-endian throughout):

    magic           4s   "PLNX"
    version         u32  (currently 1)
    dims            3*u32 (Dx, Dy, Dz)
    aabb            6*f64 (min xyz, max xyz)
    sh degree       u8   (always 2)
    row count       u64
    index lattice   Dx*Dy*Dz * i32, x-fastest order, -1 = empty
    data table      rows * 28 * f32 (sigma, then 27 SH channel-major)
    bg flag         u8
      [if 1]        n_layers u16, width u32, height u32,
                    radii n_layers*f64,
                    layer data n_layers*height*width rows of 4*f32
                    (sigma, r, g, b; layer-major, then theta row, then phi)
    crc32           u32 over all preceding bytes

The in-memory tables are float64; values are quantized to f32 on save, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"PLNX"
STATE_MAGIC = b"PLNS"
VERSION = 1


class GridFileError(ValueError):
    pass


def _grid_payload(grid, background=None) -> bytes:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<3I", *grid.dims)
    buf += struct.pack("<6d", *grid.aabb_min, *grid.aabb_max)
    buf += struct.pack("<B", 2)
    buf += struct.pack("<Q", grid.n_rows)
    buf += np.ravel(grid.links, order="F").astype("<i4").tobytes()
    with np.errstate(over="ignore"):  # diagnostic dumps may hold f32-range overflows
        buf += grid.table.astype("<f4").tobytes()
    if background is None:
        buf += struct.pack("<B", 0)
    else:
        n_layers, height, width, _ = background.data.shape
        buf += struct.pack("<B", 1)
        buf += struct.pack("<H", n_layers)
        buf += struct.pack("<2I", width, height)
        buf += background.radii.astype("<f8").tobytes()
        buf += background.data.astype("<f4").tobytes()
    return bytes(buf)


def save_grid(grid, path, background=None) -> None:
    """Write a grid (and optional background) with a trailing CRC32."""
    payload = _grid_payload(grid, background)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise GridFileError(f"{self.path}: truncated file")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_grid(path):
    """Read a grid container; returns (grid, background_or_None)."""
    from .grid import SparseGrid
    from .msi import MsiBackground

    data = Path(path).read_bytes()
    if len(data) < 8:
        raise GridFileError(f"{path}: truncated file")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise GridFileError(f"{path}: CRC32 mismatch (corrupt file)")
    r = _Reader(data[:-4], path)
    if r.take(4) != MAGIC:
        raise GridFileError(f"{path}: bad magic (not a grid file)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise GridFileError(f"{path}: unsupported version {version}")
    dims = r.unpack("<3I")
    aabb = r.unpack("<6d")
    (degree,) = r.unpack("<B")
    if degree != 2:
        raise GridFileError(f"{path}: unsupported SH degree {degree}")
    (n_rows,) = r.unpack("<Q")
    n_cells = dims[0] * dims[1] * dims[2]
    links = np.frombuffer(r.take(4 * n_cells), dtype="<i4")
    links = links.reshape(dims, order="F").astype(np.int32)
    table = np.frombuffer(r.take(4 * 28 * n_rows), dtype="<f4")
    table = table.reshape(n_rows, 28).astype(np.float64)
    if n_rows and (links.max() >= n_rows or np.count_nonzero(links >= 0) != n_rows):
        raise GridFileError(f"{path}: index lattice does not match row count")
    grid = SparseGrid(links, table, np.array(aabb[:3]), np.array(aabb[3:]))

    (bg_flag,) = r.unpack("<B")
    background = None
    if bg_flag == 1:
        (n_layers,) = r.unpack("<H")
        width, height = r.unpack("<2I")
        radii = np.frombuffer(r.take(8 * n_layers), dtype="<f8").astype(np.float64)
        bgdata = np.frombuffer(r.take(4 * 4 * n_layers * height * width),
                               dtype="<f4")
        bgdata = bgdata.reshape(n_layers, height, width, 4).astype(np.float64)
        background = MsiBackground(data=bgdata, radii=radii)
    elif bg_flag != 0:
        raise GridFileError(f"{path}: bad background flag {bg_flag}")
    if r.off != len(r.data):
        raise GridFileError(f"{path}: {len(r.data) - r.off} trailing bytes")
    return grid, background


def save_checkpoint(path, grid, state, step: int, background=None,
                    bg_state=None) -> None:
    """GridFile plus an optimizer-state sidecar at <path> and <path>.state."""
    save_grid(grid, path, background)
    buf = bytearray()
    buf += STATE_MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<Q", step)
    buf += struct.pack("<2d", state.beta, state.eps)
    buf += struct.pack("<2Q", *state.v.shape)
    buf += state.v.astype("<f4").tobytes()
    if bg_state is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B", 1)
        buf += struct.pack("<2Q", *bg_state.v.shape)
        buf += bg_state.v.astype("<f4").tobytes()
    crc = zlib.crc32(bytes(buf)) & 0xFFFFFFFF
    Path(str(path) + ".state").write_bytes(bytes(buf) + struct.pack("<I", crc))


def load_checkpoint(path):
    """Returns (grid, background, state, bg_state, step)."""
    from .optim import OptimState

    grid, background = load_grid(path)
    data = Path(str(path) + ".state").read_bytes()
    if len(data) < 8:
        raise GridFileError(f"{path}.state: truncated file")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise GridFileError(f"{path}.state: CRC32 mismatch")
    r = _Reader(data[:-4], str(path) + ".state")
    if r.take(4) != STATE_MAGIC:
        raise GridFileError(f"{path}.state: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise GridFileError(f"{path}.state: unsupported version {version}")
    (step,) = r.unpack("<Q")
    beta, eps = r.unpack("<2d")
    rows, cols = r.unpack("<2Q")
    state = OptimState(rows, cols, beta=beta, eps=eps)
    state.v[:] = np.frombuffer(r.take(4 * rows * cols),
                               dtype="<f4").reshape(rows, cols)
    state.step_count = step
    (bg_flag,) = r.unpack("<B")
    bg_state = None
    if bg_flag == 1:
        rows, cols = r.unpack("<2Q")
        bg_state = OptimState(rows, cols, beta=beta, eps=eps)
        bg_state.v[:] = np.frombuffer(r.take(4 * rows * cols),
                                      dtype="<f4").reshape(rows, cols)
        bg_state.step_count = step
    return grid, background, state, bg_state, step


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def write_image(rgb: np.ndarray, path) -> None:
    """Write a float image (values clamped to [0, 1]) as 8-bit PNG."""
    rgb = np.asarray(rgb, dtype=np.float64)
    q = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_image(path, background=(1.0, 1.0, 1.0), downscale: int = 1) -> np.ndarray:
    """Read an image as (H, W, 3) float64 in [0, 1]; RGBA is composited over
    `background` (alpha * rgb + (1 - alpha) * background)."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as e:
        raise GridFileError(f"cannot decode image {path}: {e}") from e
    if downscale > 1:
        img = img.resize((img.width // downscale, img.height // downscale),
                         Image.BOX)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[2] == 4:
        alpha = arr[..., 3:4]
        arr = arr[..., :3] * alpha + np.asarray(background) * (1.0 - alpha)
    return arr[..., :3]
