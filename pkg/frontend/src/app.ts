/** Browser entry point: wires the orbit controls, group toggles and
 * transfer-function select to the render service. */

import {
  fetchFrame,
  fetchGroups,
  fetchMeta,
  type RenderParams,
  type Vec3,
} from "./api";
import { GroupMaskState } from "./mask";
import {
  framingOrbit,
  orbitPosition,
  panned,
  rotated,
  zoomed,
  type OrbitState,
} from "./orbit";
import { FrameStream } from "./stream";

const FOV_Y = 0.8;
const VIEW_SIZE = 512;
const ROTATE_PER_PX = 0.008;
const ZOOM_STEP = 1.15;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

async function main(): Promise<void> {
  const frame = el<HTMLImageElement>("frame");
  const banner = el<HTMLElement>("error-banner");
  const errorText = el<HTMLElement>("error-text");
  const retryButton = el<HTMLButtonElement>("retry");
  const latencyLabel = el<HTMLElement>("latency");
  const groupsBox = el<HTMLElement>("groups");
  const tfSelect = el<HTMLSelectElement>("tf");

  const meta = await fetchMeta();
  const groups = await fetchGroups();

  const box = meta.bounding_box ?? {
    min: [0, 0, 0] as Vec3,
    max: [100, 100, 100] as Vec3,
  };
  let orbit: OrbitState = framingOrbit(box, FOV_Y);
  const minRadius = orbit.radius * 0.15;
  const maxRadius = orbit.radius * 6;

  let tf = meta.tf_presets.includes("default") ? "default" : meta.tf_presets[0];
  for (const name of meta.tf_presets) {
    const option = document.createElement("option");
    option.value = name;
    option.textContent = name;
    option.selected = name === tf;
    tfSelect.appendChild(option);
  }

  const present = groups
    .map((g) => g.index)
    .filter((i) => (meta.group_counts[i] ?? 0) > 0);
  const mask = new GroupMaskState(present);

  let objectUrl: string | null = null;
  const stream = new FrameStream(fetchFrame, {
    onFrame(blob, latencyMs) {
      banner.hidden = true;
      if (objectUrl !== null) {
        URL.revokeObjectURL(objectUrl);
      }
      objectUrl = URL.createObjectURL(blob);
      frame.src = objectUrl;
      latencyLabel.textContent =
        `${latencyMs.toFixed(0)} ms (${(1000 / latencyMs).toFixed(1)} fps)`;
    },
    onError(error) {
      banner.hidden = false;
      errorText.textContent = error.message;
    },
  });

  const params = (): RenderParams => ({
    position: orbitPosition(orbit),
    target: orbit.target,
    fovY: FOV_Y,
    width: VIEW_SIZE,
    height: VIEW_SIZE,
    groupMask: mask.maskValue(),
    tf,
  });
  const requestFrame = (): void => stream.request(params());

  for (const group of groups) {
    if (!present.includes(group.index)) {
      continue;
    }
    const label = document.createElement("label");
    const checkbox = document.createElement("input");
    checkbox.type = "checkbox";
    checkbox.checked = true;
    checkbox.addEventListener("change", () => {
      mask.toggle(group.index);
      requestFrame();
    });
    label.appendChild(checkbox);
    label.appendChild(document.createTextNode(
      `${group.name} (${meta.group_counts[group.index]})`));
    groupsBox.appendChild(label);
  }

  tfSelect.addEventListener("change", () => {
    tf = tfSelect.value;
    requestFrame();
  });
  retryButton.addEventListener("click", () => stream.retry());

  let dragMode: "orbit" | "pan" | null = null;
  let lastX = 0;
  let lastY = 0;
  frame.addEventListener("pointerdown", (event) => {
    dragMode = event.button === 2 ? "pan" : "orbit";
    lastX = event.clientX;
    lastY = event.clientY;
    frame.setPointerCapture(event.pointerId);
    event.preventDefault();
  });
  frame.addEventListener("pointermove", (event) => {
    if (dragMode === null) {
      return;
    }
    const dx = event.clientX - lastX;
    const dy = event.clientY - lastY;
    lastX = event.clientX;
    lastY = event.clientY;
    if (dragMode === "orbit") {
      orbit = rotated(orbit, -dx * ROTATE_PER_PX, dy * ROTATE_PER_PX);
    } else {
      const unitsPerPx = (2 * orbit.radius * Math.tan(FOV_Y / 2)) / VIEW_SIZE;
      orbit = panned(orbit, dx * unitsPerPx, dy * unitsPerPx);
    }
    requestFrame();
  });
  const endDrag = (): void => {
    dragMode = null;
  };
  frame.addEventListener("pointerup", endDrag);
  frame.addEventListener("pointercancel", endDrag);
  frame.addEventListener("contextmenu", (event) => event.preventDefault());
  frame.addEventListener("wheel", (event) => {
    event.preventDefault();
    const factor = event.deltaY > 0 ? ZOOM_STEP : 1 / ZOOM_STEP;
    orbit = zoomed(orbit, factor, minRadius, maxRadius);
    requestFrame();
  }, { passive: false });

  requestFrame();
}

main().catch((error: unknown) => {
  const banner = document.getElementById("error-banner");
  const text = document.getElementById("error-text");
  if (banner !== null && text !== null) {
    banner.hidden = false;
    text.textContent = error instanceof Error ? error.message : String(error);
  }
});
