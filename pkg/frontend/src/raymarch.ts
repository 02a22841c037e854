// CPU raymarcher: the reference for the GPU shader and the software
// fallback. Mirrors the trainer's renderer exactly -- relative-transmittance
// compositing, trilinear interpolation with empty cells as zeros, opacity
// clamped after interpolation, colors clamped after the SH dot product,
// uniform sampling at step_frac * (smallest voxel edge) with the last
// interval shortened to end exactly at the AABB exit.

import { GridScene, ROW_SIZE, linkAt } from "./format.js";
import { shBasis } from "./sh.js";

export interface RenderSettings {
  stepFrac: number;
  stopThresh: number;
  background: [number, number, number];
}

export const DEFAULT_SETTINGS: RenderSettings = {
  stepFrac: 0.5,
  stopThresh: 1e-4,
  background: [1, 1, 1],
};

export interface PinholePose {
  /** row-major 4x4 camera-to-world, camera looking down -z */
  c2w: number[][];
  focal: number;
  width: number;
  height: number;
}

function rayAabb(
  o: number[], d: number[], lo: number[], hi: number[],
): [number, number] {
  let t0 = 0;
  let t1 = Infinity;
  for (let a = 0; a < 3; a++) {
    if (Math.abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return [1, 0];
    } else {
      let ta = (lo[a] - o[a]) / d[a];
      let tb = (hi[a] - o[a]) / d[a];
      if (ta > tb) [ta, tb] = [tb, ta];
      if (ta > t0) t0 = ta;
      if (tb < t1) t1 = tb;
    }
  }
  return [t0, t1];
}

/** Render a single ray; writes rgb into out[0..2] and returns residual T. */
export function renderRay(
  scene: GridScene, origin: number[], dir: number[],
  settings: RenderSettings, basis: Float64Array, out: Float64Array,
): number {
  const [dx, dy, dz] = scene.dims;
  const lo = scene.aabbMin;
  const hi = scene.aabbMax;
  const scale = [
    (dx - 1) / (hi[0] - lo[0]),
    (dy - 1) / (hi[1] - lo[1]),
    (dz - 1) / (hi[2] - lo[2]),
  ];
  const edge = Math.min(1 / scale[0], 1 / scale[1], 1 / scale[2]);
  const step = settings.stepFrac * edge;
  const [t0, t1] = rayAabb(origin, dir, lo, hi);
  let r = 0;
  let g = 0;
  let b = 0;
  let T = 1;
  const L = t1 - t0;
  if (L > 0) {
    const n = Math.max(1, Math.ceil(L / step - 1e-9));
    const rows = new Int32Array(8);
    const ws = new Float64Array(8);
    for (let s = 0; s < n; s++) {
      const t = t0 + s * step;
      const dlt = s < n - 1 ? step : L - step * (n - 1);
      let gx = (origin[0] + t * dir[0] - lo[0]) * scale[0];
      let gy = (origin[1] + t * dir[1] - lo[1]) * scale[1];
      let gz = (origin[2] + t * dir[2] - lo[2]) * scale[2];
      gx = Math.min(Math.max(gx, 0), dx - 1);
      gy = Math.min(Math.max(gy, 0), dy - 1);
      gz = Math.min(Math.max(gz, 0), dz - 1);
      let i0 = Math.min(Math.floor(gx), dx - 2);
      let j0 = Math.min(Math.floor(gy), dy - 2);
      let k0 = Math.min(Math.floor(gz), dz - 2);
      const fx = gx - i0;
      const fy = gy - j0;
      const fz = gz - k0;
      let q = 0;
      let sigma = 0;
      let any = false;
      for (let di = 0; di < 2; di++) {
        const wx = di ? fx : 1 - fx;
        for (let dj = 0; dj < 2; dj++) {
          const wy = dj ? fy : 1 - fy;
          for (let dk = 0; dk < 2; dk++) {
            const wz = dk ? fz : 1 - fz;
            const row = linkAt(scene, i0 + di, j0 + dj, k0 + dk);
            rows[q] = row;
            ws[q] = wx * wy * wz;
            if (row >= 0) {
              any = true;
              sigma += ws[q] * scene.table[row * ROW_SIZE];
            }
            q++;
          }
        }
      }
      if (!any || sigma <= 0) continue;
      const att = Math.exp(-sigma * dlt);
      const w = T * (1 - att);
      let cr = 0;
      let cg = 0;
      let cb = 0;
      for (q = 0; q < 8; q++) {
        const row = rows[q];
        if (row < 0) continue;
        const base = row * ROW_SIZE + 1;
        const wq = ws[q];
        let acc = 0;
        for (let m = 0; m < 9; m++) acc += basis[m] * scene.table[base + m];
        cr += wq * acc;
        acc = 0;
        for (let m = 0; m < 9; m++) acc += basis[m] * scene.table[base + 9 + m];
        cg += wq * acc;
        acc = 0;
        for (let m = 0; m < 9; m++) acc += basis[m] * scene.table[base + 18 + m];
        cb += wq * acc;
      }
      if (cr > 0) r += w * cr;
      if (cg > 0) g += w * cg;
      if (cb > 0) b += w * cb;
      T *= att;
      if (T < settings.stopThresh) break;
    }
  }
  out[0] = r + T * settings.background[0];
  out[1] = g + T * settings.background[1];
  out[2] = b + T * settings.background[2];
  return T;
}

/** Render a full pinhole view; returns H*W*3 float64 values in [0, ~1]. */
export function renderImage(
  scene: GridScene, pose: PinholePose, settings: RenderSettings = DEFAULT_SETTINGS,
): Float64Array {
  const { c2w, focal, width, height } = pose;
  const origin = [c2w[0][3], c2w[1][3], c2w[2][3]];
  const out = new Float64Array(width * height * 3);
  const basis = new Float64Array(9);
  const px = new Float64Array(3);
  for (let py = 0; py < height; py++) {
    for (let pxi = 0; pxi < width; pxi++) {
      const cx = (pxi + 0.5 - width / 2) / focal;
      const cy = -(py + 0.5 - height / 2) / focal;
      const dirX = c2w[0][0] * cx + c2w[0][1] * cy - c2w[0][2];
      const dirY = c2w[1][0] * cx + c2w[1][1] * cy - c2w[1][2];
      const dirZ = c2w[2][0] * cx + c2w[2][1] * cy - c2w[2][2];
      const n = Math.hypot(dirX, dirY, dirZ);
      const d = [dirX / n, dirY / n, dirZ / n];
      shBasis(d[0], d[1], d[2], basis);
      renderRay(scene, origin, d, settings, basis, px);
      const at = (py * width + pxi) * 3;
      out[at] = px[0];
      out[at + 1] = px[1];
      out[at + 2] = px[2];
    }
  }
  return out;
}
