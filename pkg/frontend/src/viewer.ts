// Viewer app: fetch the manifest + grid file, parse in a worker, render with
// the WebGL2 raymarcher (CPU fallback when WebGL2 is missing), and report a
// median FPS over the last 100 frames.

import { attachControls, defaultOrbit, orbitFromPose, orbitPose,
         OrbitState } from "./camera.js";
import { GridScene, Manifest } from "./format.js";
import { GlRenderer } from "./gl.js";
import { DEFAULT_SETTINGS, renderImage } from "./raymarch.js";

function banner(text: string, isError = false): void {
  const el = document.getElementById("banner")!;
  el.textContent = text;
  el.className = isError ? "error" : "";
  el.style.display = text ? "block" : "none";
}

async function loadScene(url: string): Promise<GridScene> {
  const resp = await fetch(url);
  if (!resp.ok) {
    throw new Error(`fetch failed: ${resp.status} ${resp.statusText}`);
  }
  const buf = await resp.arrayBuffer();
  return new Promise((resolve, reject) => {
    const worker = new Worker(new URL("./worker.js", import.meta.url),
                              { type: "module" });
    worker.onmessage = (e: MessageEvent) => {
      worker.terminate();
      if (e.data.type === "scene") {
        resolve(e.data.scene as GridScene);
      } else {
        reject(new Error(e.data.message));
      }
    };
    worker.onerror = (e) => {
      worker.terminate();
      reject(new Error(e.message));
    };
    worker.postMessage(buf, [buf]);
  });
}

class FpsMeter {
  private times: number[] = [];

  tick(now: number): number | null {
    this.times.push(now);
    if (this.times.length > 101) this.times.shift();
    if (this.times.length < 11) return null;
    const dts = [];
    for (let i = 1; i < this.times.length; i++) {
      dts.push(this.times[i] - this.times[i - 1]);
    }
    dts.sort((a, b) => a - b);
    return 1000 / dts[Math.floor(dts.length / 2)];
  }
}

function softwareLoop(canvas: HTMLCanvasElement, scene: GridScene,
                      orbit: OrbitState): void {
  // low-resolution CPU fallback so the viewer still works without WebGL2
  const ctx = canvas.getContext("2d")!;
  const w = 160;
  const h = Math.round(w * canvas.height / canvas.width);
  const off = new OffscreenCanvas(w, h);
  const offCtx = off.getContext("2d")!;
  let dirty = true;
  const redraw = () => { dirty = true; };
  attachControls(canvas, orbit, redraw);
  const frame = () => {
    if (dirty) {
      dirty = false;
      const pose = orbitPoseForRender(orbit, w, h);
      const img = renderImage(scene, pose, DEFAULT_SETTINGS);
      const pix = offCtx.createImageData(w, h);
      for (let i = 0; i < w * h; i++) {
        pix.data[4 * i] = Math.min(255, Math.max(0, Math.round(img[3 * i] * 255)));
        pix.data[4 * i + 1] = Math.min(255, Math.max(0, Math.round(img[3 * i + 1] * 255)));
        pix.data[4 * i + 2] = Math.min(255, Math.max(0, Math.round(img[3 * i + 2] * 255)));
        pix.data[4 * i + 3] = 255;
      }
      offCtx.putImageData(pix, 0, 0);
      ctx.imageSmoothingEnabled = false;
      ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
    }
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
}

function orbitPoseForRender(orbit: OrbitState, width: number, height: number) {
  const focal = 0.5 * width / Math.tan(orbit.fovX / 2);
  return { c2w: orbitPose(orbit), focal, width, height };
}

export async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const manifestUrl = params.get("scene") ?? "scene.json";
  const canvas = document.getElementById("view") as HTMLCanvasElement;
  canvas.width = canvas.clientWidth;
  canvas.height = canvas.clientHeight;

  let manifest: Manifest | null = null;
  let fileUrl = manifestUrl;
  try {
    if (manifestUrl.endsWith(".json")) {
      const resp = await fetch(manifestUrl);
      if (!resp.ok) throw new Error(`manifest fetch failed: ${resp.status}`);
      manifest = await resp.json();
      fileUrl = new URL(manifest!.file, new URL(manifestUrl, location.href)).href;
    }
    const scene = await loadScene(fileUrl);
    banner("");
    const info = document.getElementById("info")!;
    info.textContent =
      `${scene.dims.join("x")} grid, ${scene.rows.toLocaleString()} occupied`
      + (scene.background ? " (background layers present; foreground shown)"
                          : "");
    const orbit = manifest?.suggested_pose
      ? orbitFromPose(manifest.suggested_pose)
      : defaultOrbit(scene.aabbMin, scene.aabbMax);

    let renderer: GlRenderer;
    try {
      renderer = new GlRenderer(canvas);
    } catch {
      banner("WebGL2 unavailable; using the low-resolution software renderer");
      softwareLoop(canvas, scene, orbit);
      return;
    }
    renderer.upload(scene);
    canvas.addEventListener("webglcontextlost", (e) => {
      e.preventDefault();
      banner("graphics context lost; reload the page to continue", true);
    });
    attachControls(canvas, orbit, () => undefined);
    const meter = new FpsMeter();
    const fpsEl = document.getElementById("fps")!;
    const frame = (now: number) => {
      renderer.draw(orbit, DEFAULT_SETTINGS);
      const fps = meter.tick(now);
      if (fps !== null) {
        fpsEl.textContent = `${fps.toFixed(0)} fps (median/100)`;
      }
      requestAnimationFrame(frame);
    };
    requestAnimationFrame(frame);
  } catch (err) {
    banner(`failed to load scene: ${(err as Error).message}`, true);
  }
}

start();
