// Real spherical harmonics (degree 2), graphics convention, matching the
// training side: 9 basis values per direction, coefficients channel-major.

export const SH_C0 = 0.28209479177387814;
export const SH_C1 = 0.4886025119029199;
export const SH_C2_0 = 1.0925484305920792;
export const SH_C2_2 = 0.31539156525252005;
export const SH_C2_4 = 0.5462742152960396;

/** Fill out[0..8] with the basis at unit direction (x, y, z). */
export function shBasis(x: number, y: number, z: number, out: Float64Array): void {
  out[0] = SH_C0;
  out[1] = -SH_C1 * y;
  out[2] = SH_C1 * z;
  out[3] = -SH_C1 * x;
  out[4] = SH_C2_0 * x * y;
  out[5] = -SH_C2_0 * y * z;
  out[6] = SH_C2_2 * (2 * z * z - x * x - y * y);
  out[7] = -SH_C2_0 * x * z;
  out[8] = SH_C2_4 * (x * x - y * y);
}
