// WebGL2 plumbing: upload the pointer lattice as a 3D integer texture and
// the data table as an RGBA32F texture (7 texels per row), then draw a
// fullscreen triangle with the raymarching shader.

import { GridScene, ROW_SIZE } from "./format.js";
import { OrbitState, orbitPose } from "./camera.js";
import { FRAGMENT_SRC, VERTEX_SRC } from "./shaders.js";

const ROWS_PER_LINE = 512; // table texture width = 7 * 512 = 3584 texels

export class GlRenderer {
  private gl: WebGL2RenderingContext;
  private program: WebGLProgram;
  private uniforms: Record<string, WebGLUniformLocation | null> = {};
  private dims: [number, number, number] = [0, 0, 0];
  private aabbMin: [number, number, number] = [0, 0, 0];
  private aabbMax: [number, number, number] = [1, 1, 1];

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl2");
    if (!gl) {
      throw new Error("WebGL2 is not available");
    }
    if (!gl.getExtension("EXT_color_buffer_float")) {
      // float textures used only as inputs; extension not strictly required
    }
    this.gl = gl;
    this.program = this.link(VERTEX_SRC, FRAGMENT_SRC);
    for (const name of [
      "uLinks", "uTable", "uTableSize", "uDims", "uAabbMin", "uAabbMax",
      "uCamPos", "uCamRot", "uHalfTan", "uBackground", "uStepFrac",
      "uStopThresh",
    ]) {
      this.uniforms[name] = gl.getUniformLocation(this.program, name);
    }
  }

  private link(vsSrc: string, fsSrc: string): WebGLProgram {
    const gl = this.gl;
    const compile = (type: number, src: string) => {
      const sh = gl.createShader(type)!;
      gl.shaderSource(sh, src);
      gl.compileShader(sh);
      if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
        throw new Error(`shader compile failed: ${gl.getShaderInfoLog(sh)}`);
      }
      return sh;
    };
    const prog = gl.createProgram()!;
    gl.attachShader(prog, compile(gl.VERTEX_SHADER, vsSrc));
    gl.attachShader(prog, compile(gl.FRAGMENT_SHADER, fsSrc));
    gl.linkProgram(prog);
    if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
      throw new Error(`program link failed: ${gl.getProgramInfoLog(prog)}`);
    }
    return prog;
  }

  upload(scene: GridScene): void {
    const gl = this.gl;
    this.dims = scene.dims;
    this.aabbMin = scene.aabbMin;
    this.aabbMax = scene.aabbMax;

    gl.activeTexture(gl.TEXTURE0);
    const linksTex = gl.createTexture();
    gl.bindTexture(gl.TEXTURE_3D, linksTex);
    gl.texParameteri(gl.TEXTURE_3D, gl.TEXTURE_MIN_FILTER, gl.NEAREST);
    gl.texParameteri(gl.TEXTURE_3D, gl.TEXTURE_MAG_FILTER, gl.NEAREST);
    // storage order is x-fastest, which is exactly WebGL's layout for
    // (width, height, depth) = dims
    gl.texImage3D(gl.TEXTURE_3D, 0, gl.R32I, scene.dims[0], scene.dims[1],
                  scene.dims[2], 0, gl.RED_INTEGER, gl.INT, scene.links);

    const lines = Math.max(1, Math.ceil(scene.rows / ROWS_PER_LINE));
    const width = 7 * ROWS_PER_LINE;
    const padded = new Float32Array(width * lines * 4);
    for (let row = 0; row < scene.rows; row++) {
      const texel0 = (Math.floor(row / ROWS_PER_LINE) * width
        + (row % ROWS_PER_LINE) * 7) * 4;
      for (let c = 0; c < ROW_SIZE; c++) {
        padded[texel0 + c] = scene.table[row * ROW_SIZE + c];
      }
    }
    gl.activeTexture(gl.TEXTURE1);
    const tableTex = gl.createTexture();
    gl.bindTexture(gl.TEXTURE_2D, tableTex);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.NEAREST);
    gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.NEAREST);
    gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA32F, width, lines, 0, gl.RGBA,
                  gl.FLOAT, padded);

    gl.useProgram(this.program);
    gl.uniform1i(this.uniforms.uLinks, 0);
    gl.uniform1i(this.uniforms.uTable, 1);
    gl.uniform2i(this.uniforms.uTableSize, width, lines);
    gl.uniform3i(this.uniforms.uDims, ...scene.dims);
    gl.uniform3f(this.uniforms.uAabbMin, ...scene.aabbMin);
    gl.uniform3f(this.uniforms.uAabbMax, ...scene.aabbMax);
  }

  draw(orbit: OrbitState, settings: { stepFrac: number; stopThresh: number;
       background: [number, number, number] }): void {
    const gl = this.gl;
    const pose = orbitPose(orbit);
    gl.viewport(0, 0, this.canvas.width, this.canvas.height);
    gl.useProgram(this.program);
    gl.uniform3f(this.uniforms.uCamPos, pose[0][3], pose[1][3], pose[2][3]);
    // column-major mat3 of (right, up, backward)
    gl.uniformMatrix3fv(this.uniforms.uCamRot, false, [
      pose[0][0], pose[1][0], pose[2][0],
      pose[0][1], pose[1][1], pose[2][1],
      pose[0][2], pose[1][2], pose[2][2],
    ]);
    const halfTanX = Math.tan(orbit.fovX / 2);
    const halfTanY = halfTanX * this.canvas.height / this.canvas.width;
    gl.uniform2f(this.uniforms.uHalfTan, halfTanX, halfTanY);
    gl.uniform3f(this.uniforms.uBackground, ...settings.background);
    gl.uniform1f(this.uniforms.uStepFrac, settings.stepFrac);
    gl.uniform1f(this.uniforms.uStopThresh, settings.stopThresh);
    gl.drawArrays(gl.TRIANGLES, 0, 3);
  }
}
