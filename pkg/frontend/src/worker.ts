// Parse grid files off the UI thread; the typed arrays transfer back.

import { FormatError, parseGrid } from "./format.js";

self.onmessage = (event: MessageEvent<ArrayBuffer>) => {
  try {
    const scene = parseGrid(event.data);
    const transfer = [scene.links.buffer, scene.table.buffer];
    if (scene.background) {
      transfer.push(scene.background.radii.buffer, scene.background.data.buffer);
    }
    (self as unknown as Worker).postMessage({ type: "scene", scene }, transfer);
  } catch (err) {
    (self as unknown as Worker).postMessage({
      type: "error",
      message: err instanceof FormatError ? err.message : String(err),
    });
  }
};
