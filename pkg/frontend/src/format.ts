// Grid container parsing. Layout (little-endian):
//   "PLNX" | version u32 | dims 3*u32 | aabb 6*f64 | sh degree u8 |
//   row count u64 | lattice i32[Dx*Dy*Dz] x-fastest (-1 empty) |
//   table f32[rows*28] (sigma, then 27 SH coefficients channel-major) |
//   bg flag u8 [n_layers u16, width u32, height u32, radii f64[n],
//               layers f32[n*h*w*4]] | crc32 u32 of everything before it.

export const ROW_SIZE = 28;

export interface BackgroundData {
  nLayers: number;
  width: number;
  height: number;
  radii: Float64Array;
  data: Float32Array; // layer-major, then theta row, then phi; 4 per texel
}

export interface GridScene {
  dims: [number, number, number];
  aabbMin: [number, number, number];
  aabbMax: [number, number, number];
  rows: number;
  /** lattice in x-fastest order: index = i + dims[0]*(j + dims[1]*k) */
  links: Int32Array;
  /** rows * 28 values */
  table: Float32Array;
  background: BackgroundData | null;
}

export interface Manifest {
  file: string;
  dims: number[];
  suggested_pose: number[][];
  has_background: boolean;
}

export class FormatError extends Error {}

const CRC_TABLE = (() => {
  const t = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    t[n] = c >>> 0;
  }
  return t;
})();

export function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

class Reader {
  private view: DataView;
  private off = 0;

  constructor(private buf: ArrayBuffer, private baseOffset = 0, private limit = buf.byteLength) {
    this.view = new DataView(buf);
    this.off = baseOffset;
  }

  private need(n: number): number {
    if (this.off + n > this.limit) {
      throw new FormatError("truncated file");
    }
    const at = this.off;
    this.off += n;
    return at;
  }

  u8(): number {
    return this.view.getUint8(this.need(1));
  }
  u16(): number {
    return this.view.getUint16(this.need(2), true);
  }
  u32(): number {
    return this.view.getUint32(this.need(4), true);
  }
  u64(): number {
    const at = this.need(8);
    const lo = this.view.getUint32(at, true);
    const hi = this.view.getUint32(at + 4, true);
    if (hi >= 2 ** 21) {
      throw new FormatError("row count exceeds the safe integer range");
    }
    return hi * 2 ** 32 + lo;
  }
  f64(): number {
    return this.view.getFloat64(this.need(8), true);
  }
  bytes(n: number): Uint8Array {
    return new Uint8Array(this.buf, this.need(n), n);
  }
  i32Array(n: number): Int32Array {
    const at = this.need(4 * n);
    // copy: the source offset may not be 4-byte aligned relative to the buffer
    return new Int32Array(this.buf.slice(at, at + 4 * n));
  }
  f32Array(n: number): Float32Array {
    const at = this.need(4 * n);
    return new Float32Array(this.buf.slice(at, at + 4 * n));
  }
  f64Array(n: number): Float64Array {
    const at = this.need(8 * n);
    return new Float64Array(this.buf.slice(at, at + 8 * n));
  }
  get offset(): number {
    return this.off;
  }
}

export function parseGrid(buf: ArrayBuffer): GridScene {
  if (buf.byteLength < 8) {
    throw new FormatError("truncated file");
  }
  const view = new DataView(buf);
  const storedCrc = view.getUint32(buf.byteLength - 4, true);
  const payload = new Uint8Array(buf, 0, buf.byteLength - 4);
  if (crc32(payload) !== storedCrc) {
    throw new FormatError("CRC32 mismatch (corrupt file)");
  }
  const magic = new Uint8Array(buf, 0, 4);
  if (String.fromCharCode(...magic) !== "PLNX") {
    throw new FormatError("bad magic (not a grid file)");
  }
  const r = new Reader(buf, 4, buf.byteLength - 4);
  const version = r.u32();
  if (version !== 1) {
    throw new FormatError(`unsupported version ${version}`);
  }
  const dims: [number, number, number] = [r.u32(), r.u32(), r.u32()];
  const aabbMin: [number, number, number] = [r.f64(), r.f64(), r.f64()];
  const aabbMax: [number, number, number] = [r.f64(), r.f64(), r.f64()];
  const degree = r.u8();
  if (degree !== 2) {
    throw new FormatError(`unsupported SH degree ${degree}`);
  }
  const rows = r.u64();
  const nCells = dims[0] * dims[1] * dims[2];
  const links = r.i32Array(nCells);
  const table = r.f32Array(rows * ROW_SIZE);
  let occupied = 0;
  let maxRow = -1;
  for (let i = 0; i < links.length; i++) {
    if (links[i] >= 0) {
      occupied++;
      if (links[i] > maxRow) maxRow = links[i];
    }
  }
  if (occupied !== rows || maxRow >= rows) {
    throw new FormatError("index lattice does not match row count");
  }
  const bgFlag = r.u8();
  let background: BackgroundData | null = null;
  if (bgFlag === 1) {
    const nLayers = r.u16();
    const width = r.u32();
    const height = r.u32();
    const radii = r.f64Array(nLayers);
    const data = r.f32Array(nLayers * height * width * 4);
    background = { nLayers, width, height, radii, data };
  } else if (bgFlag !== 0) {
    throw new FormatError(`bad background flag ${bgFlag}`);
  }
  if (r.offset !== buf.byteLength - 4) {
    throw new FormatError("trailing bytes after the background section");
  }
  return { dims, aabbMin, aabbMax, rows, links, table, background };
}

/** Lattice lookup honoring the x-fastest storage order; -1 when empty. */
export function linkAt(scene: GridScene, i: number, j: number, k: number): number {
  return scene.links[i + scene.dims[0] * (j + scene.dims[1] * k)];
}
