// Orbit camera: drag to orbit, wheel to dolly, arrow keys / WASD to pan the
// target point. Produces the same camera-to-world convention as the trainer
// (OpenGL style, camera looking down -z, world z up).

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  azimuth: number;
  elevation: number;
  fovX: number;
}

export function defaultOrbit(aabbMin: number[], aabbMax: number[]): OrbitState {
  const cx = (aabbMin[0] + aabbMax[0]) / 2;
  const cy = (aabbMin[1] + aabbMax[1]) / 2;
  const cz = (aabbMin[2] + aabbMax[2]) / 2;
  const diag = Math.hypot(
    aabbMax[0] - aabbMin[0], aabbMax[1] - aabbMin[1], aabbMax[2] - aabbMin[2]);
  return { target: [cx, cy, cz], radius: 1.6 * diag, azimuth: 0.7,
           elevation: 0.45, fovX: 0.6911112 };
}

export function orbitFromPose(c2w: number[][], fovX = 0.6911112): OrbitState {
  const px = c2w[0][3];
  const py = c2w[1][3];
  const pz = c2w[2][3];
  const radius = Math.hypot(px, py, pz);
  return {
    target: [0, 0, 0],
    radius,
    azimuth: Math.atan2(py, px),
    elevation: Math.asin(Math.min(Math.max(pz / radius, -1), 1)),
    fovX,
  };
}

/** Camera-to-world matrix of the orbit state (row-major 4x4). */
export function orbitPose(s: OrbitState): number[][] {
  const ce = Math.cos(s.elevation);
  const pos = [
    s.target[0] + s.radius * Math.cos(s.azimuth) * ce,
    s.target[1] + s.radius * Math.sin(s.azimuth) * ce,
    s.target[2] + s.radius * Math.sin(s.elevation),
  ];
  let zx = pos[0] - s.target[0];
  let zy = pos[1] - s.target[1];
  let zz = pos[2] - s.target[2];
  const zn = Math.hypot(zx, zy, zz);
  zx /= zn; zy /= zn; zz /= zn;
  // x = up cross z (world up = +z), guarded at the poles
  let xx = -zy;
  let xy = zx;
  let xz = 0;
  const xn = Math.hypot(xx, xy, xz);
  if (xn < 1e-9) {
    xx = 1; xy = 0; xz = 0;
  } else {
    xx /= xn; xy /= xn;
  }
  const yx = zy * xz - zz * xy;
  const yy = zz * xx - zx * xz;
  const yz = zx * xy - zy * xx;
  return [
    [xx, yx, zx, pos[0]],
    [xy, yy, zy, pos[1]],
    [xz, yz, zz, pos[2]],
    [0, 0, 0, 1],
  ];
}

export function attachControls(
  canvas: HTMLCanvasElement, state: OrbitState, onChange: () => void,
): void {
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
  });
  window.addEventListener("mousemove", (e) => {
    if (!dragging) return;
    const dx = e.clientX - lastX;
    const dy = e.clientY - lastY;
    lastX = e.clientX;
    lastY = e.clientY;
    state.azimuth -= dx * 0.008;
    state.elevation = Math.min(
      Math.max(state.elevation + dy * 0.008, -1.45), 1.45);
    onChange();
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    state.radius *= Math.exp(e.deltaY * 0.001);
    onChange();
  }, { passive: false });
  window.addEventListener("keydown", (e) => {
    const pan = state.radius * 0.04;
    const pose = orbitPose(state);
    const move = (ax: number, sign: number) => {
      state.target[0] += sign * pan * pose[0][ax];
      state.target[1] += sign * pan * pose[1][ax];
      state.target[2] += sign * pan * pose[2][ax];
    };
    switch (e.key) {
      case "a": case "ArrowLeft": move(0, -1); break;
      case "d": case "ArrowRight": move(0, 1); break;
      case "w": case "ArrowUp": move(1, 1); break;
      case "s": case "ArrowDown": move(1, -1); break;
      default: return;
    }
    onChange();
  });
}
