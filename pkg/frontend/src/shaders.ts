// GLSL ES 3.0 raymarching shader. The dense pointer lattice rides in an
// isampler3D; the data table is packed into an RGBA32F 2D texture, 7 texels
// per row (28 floats: sigma, then 9 SH coefficients per color channel).

export const VERTEX_SRC = `#version 300 es
precision highp float;
const vec2 verts[3] = vec2[3](vec2(-1.0, -1.0), vec2(3.0, -1.0), vec2(-1.0, 3.0));
out vec2 ndc;
void main() {
  ndc = verts[gl_VertexID];
  gl_Position = vec4(ndc, 0.0, 1.0);
}
`;

export const FRAGMENT_SRC = `#version 300 es
precision highp float;
precision highp int;
precision highp isampler3D;
precision highp sampler2D;

in vec2 ndc;
out vec4 frag;

uniform isampler3D uLinks;
uniform sampler2D uTable;
uniform ivec2 uTableSize;     // texels per line (multiple of 7), lines
uniform ivec3 uDims;
uniform vec3 uAabbMin;
uniform vec3 uAabbMax;
uniform vec3 uCamPos;
uniform mat3 uCamRot;         // columns: right, up, backward
uniform vec2 uHalfTan;        // tan(fov/2) horizontal, vertical
uniform vec3 uBackground;
uniform float uStepFrac;
uniform float uStopThresh;

vec4 fetchRow(int row, int texel) {
  int cols = uTableSize.x / 7;
  int x = (row % cols) * 7 + texel;
  int y = row / cols;
  return texelFetch(uTable, ivec2(x, y), 0);
}

float rowSigma(int row) {
  return fetchRow(row, 0).x;
}

vec3 rowColor(int row, float basis[9]) {
  vec4 t0 = fetchRow(row, 0);
  vec4 t1 = fetchRow(row, 1);
  vec4 t2 = fetchRow(row, 2);
  vec4 t3 = fetchRow(row, 3);
  vec4 t4 = fetchRow(row, 4);
  vec4 t5 = fetchRow(row, 5);
  vec4 t6 = fetchRow(row, 6);
  float cr = basis[0]*t0.y + basis[1]*t0.z + basis[2]*t0.w
           + basis[3]*t1.x + basis[4]*t1.y + basis[5]*t1.z
           + basis[6]*t1.w + basis[7]*t2.x + basis[8]*t2.y;
  float cg = basis[0]*t2.z + basis[1]*t2.w + basis[2]*t3.x
           + basis[3]*t3.y + basis[4]*t3.z + basis[5]*t3.w
           + basis[6]*t4.x + basis[7]*t4.y + basis[8]*t4.z;
  float cb = basis[0]*t4.w + basis[1]*t5.x + basis[2]*t5.y
           + basis[3]*t5.z + basis[4]*t5.w + basis[5]*t6.x
           + basis[6]*t6.y + basis[7]*t6.z + basis[8]*t6.w;
  return vec3(cr, cg, cb);
}

void main() {
  vec3 dirCam = vec3(ndc.x * uHalfTan.x, ndc.y * uHalfTan.y, -1.0);
  vec3 dir = normalize(uCamRot * dirCam);
  vec3 o = uCamPos;

  // slab clip
  vec3 inv = 1.0 / dir;
  vec3 tA = (uAabbMin - o) * inv;
  vec3 tB = (uAabbMax - o) * inv;
  vec3 tMin = min(tA, tB);
  vec3 tMax = max(tA, tB);
  float t0 = max(max(tMin.x, max(tMin.y, tMin.z)), 0.0);
  float t1 = min(tMax.x, min(tMax.y, tMax.z));

  float basis[9];
  basis[0] = 0.28209479177387814;
  basis[1] = -0.4886025119029199 * dir.y;
  basis[2] = 0.4886025119029199 * dir.z;
  basis[3] = -0.4886025119029199 * dir.x;
  basis[4] = 1.0925484305920792 * dir.x * dir.y;
  basis[5] = -1.0925484305920792 * dir.y * dir.z;
  basis[6] = 0.31539156525252005 * (2.0*dir.z*dir.z - dir.x*dir.x - dir.y*dir.y);
  basis[7] = -1.0925484305920792 * dir.x * dir.z;
  basis[8] = 0.5462742152960396 * (dir.x*dir.x - dir.y*dir.y);

  vec3 scale = (vec3(uDims) - 1.0) / (uAabbMax - uAabbMin);
  float edge = min(1.0/scale.x, min(1.0/scale.y, 1.0/scale.z));
  float step = uStepFrac * edge;

  vec3 rgb = vec3(0.0);
  float T = 1.0;
  float L = t1 - t0;
  if (L > 0.0) {
    int n = int(ceil(L / step - 1e-6));
    if (n < 1) n = 1;
    for (int s = 0; s < 4096; s++) {
      if (s >= n) break;
      float t = t0 + float(s) * step;
      float dlt = (s < n - 1) ? step : L - step * float(n - 1);
      vec3 g = (o + t * dir - uAabbMin) * scale;
      g = clamp(g, vec3(0.0), vec3(uDims) - 1.0);
      ivec3 c0 = min(ivec3(g), uDims - 2);
      vec3 f = g - vec3(c0);

      float sigma = 0.0;
      int rows[8];
      float ws[8];
      int q = 0;
      bool any = false;
      for (int di = 0; di < 2; di++)
      for (int dj = 0; dj < 2; dj++)
      for (int dk = 0; dk < 2; dk++) {
        int row = texelFetch(uLinks, c0 + ivec3(di, dj, dk), 0).r;
        float w = (di == 1 ? f.x : 1.0 - f.x)
                * (dj == 1 ? f.y : 1.0 - f.y)
                * (dk == 1 ? f.z : 1.0 - f.z);
        rows[q] = row;
        ws[q] = w;
        if (row >= 0) { any = true; sigma += w * rowSigma(row); }
        q++;
      }
      if (!any || sigma <= 0.0) continue;
      float att = exp(-sigma * dlt);
      float w = T * (1.0 - att);
      vec3 col = vec3(0.0);
      for (int m = 0; m < 8; m++) {
        if (rows[m] >= 0) col += ws[m] * rowColor(rows[m], basis);
      }
      rgb += w * max(col, vec3(0.0));
      T *= att;
      if (T < uStopThresh) break;
    }
  }
  frag = vec4(rgb + T * uBackground, 1.0);
}
`;
