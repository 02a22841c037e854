#!/usr/bin/env python3
"""Generate the cross-component golden files consumed by the viewer tests.

Writes into frontend/test/fixtures/:
  g000..g009.plnx     random grids (some with holes / backgrounds)
  golden.json         per-file field expectations + random value probes
  toy.plnx            small baked toy scene export
  toy_ref.json        fixed benchmark pose + render settings
  toy_render.bin      float32 H*W*3 render of that pose from the library

Rerun after any change to the container format, then re-run both test suites.
"""

import json
import sys
import zlib
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import plenoxel as px  # noqa: E402
from plenoxel.msi import MsiBackground  # noqa: E402

FIXTURES = Path(__file__).resolve().parents[1] / "frontend" / "test" / "fixtures"


def random_grid(rng):
    dims = tuple(int(rng.integers(2, 7)) for _ in range(3))
    aabb = rng.uniform(0.5, 2.0)
    g = px.SparseGrid.dense(dims, (-aabb,) * 3, (aabb,) * 3)
    g.table[:] = rng.normal(size=g.table.shape)
    if rng.random() < 0.5:
        links = g.links.copy()
        links[rng.random(links.shape) < 0.4] = -1
        keep = np.sort(g.links[links >= 0])
        if len(keep) == 0:
            links[0, 0, 0] = 0
            keep = np.array([g.links[0, 0, 0]])
        remap = np.full(g.n_rows, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        g = px.SparseGrid(
            np.where(links >= 0, remap[np.maximum(links, 0)], -1).astype(np.int32),
            g.table[keep], g.aabb_min, g.aabb_max)
    g.table[:] = g.table.astype(np.float32)
    return g


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240)
    golden = []
    for i in range(10):
        g = random_grid(rng)
        bg = None
        if i % 4 == 3:
            bg = MsiBackground.create(3, 4, 6)
            bg.data[:] = rng.uniform(0, 1, bg.data.shape).astype(np.float32)
        name = f"g{i:03d}.plnx"
        px.save_grid(g, FIXTURES / name, bg)
        raw = (FIXTURES / name).read_bytes()
        probes = []
        if g.n_rows:
            for _ in range(5):
                r = int(rng.integers(0, g.n_rows))
                c = int(rng.integers(0, 28))
                probes.append([r, c, float(np.float32(g.table[r, c]))])
        lattice = []
        for _ in range(5):
            ijk = [int(rng.integers(0, d)) for d in g.dims]
            lattice.append(ijk + [int(g.links[ijk[0], ijk[1], ijk[2]])])
        golden.append({
            "file": name,
            "dims": list(g.dims),
            "aabb_min": list(map(float, g.aabb_min)),
            "aabb_max": list(map(float, g.aabb_max)),
            "rows": int(g.n_rows),
            "crc32": zlib.crc32(raw[:-4]) & 0xFFFFFFFF,
            "size": len(raw),
            "has_background": bg is not None,
            "bg_layers": 0 if bg is None else bg.n_layers,
            "table_probes": probes,
            "lattice_probes": lattice,
        })
    (FIXTURES / "golden.json").write_text(json.dumps(golden, indent=1))

    # benchmark toy export + library render of a fixed pose
    grid = px.build_toy_grid(24)
    px.save_grid(grid, FIXTURES / "toy.plnx")
    radius, azim, elev = 3.0, 0.8, 0.5
    pos = radius * np.array([np.cos(azim) * np.cos(elev),
                             np.sin(azim) * np.cos(elev), np.sin(elev)])
    zc = pos / np.linalg.norm(pos)
    xc = np.cross([0.0, 0.0, 1.0], zc)
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = xc, yc, zc, pos
    w = h = 40
    fov_x = 0.6911112
    focal = 0.5 * w / np.tan(0.5 * fov_x)
    cam = px.Camera(c2w=c2w, focal=focal, width=w, height=h)
    opts = px.RenderOptions(step_frac=0.5, stop_thresh=1e-4,
                            background=(1.0, 1.0, 1.0))
    loaded, _ = px.load_grid(FIXTURES / "toy.plnx")  # render from f32 values
    img = px.render_image(loaded, cam, opts)
    img.astype("<f4").tofile(FIXTURES / "toy_render.bin")
    (FIXTURES / "toy_ref.json").write_text(json.dumps({
        "file": "toy.plnx",
        "width": w,
        "height": h,
        "focal": focal,
        "c2w": c2w.tolist(),
        "step_frac": 0.5,
        "stop_thresh": 1e-4,
        "background": [1.0, 1.0, 1.0],
        "dims": list(grid.dims),
        "rows": int(grid.n_rows),
    }, indent=1))
    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    main()
