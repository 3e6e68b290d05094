import { ApiClient, ApiError, HistoryEntry } from "./api.js";
import { MaskEditor } from "./editor.js";
import { Palette } from "./palette.js";
import { LabelRaster, Point } from "./raster.js";
import { fileToPngB64, pngB64ToImage, pngB64ToRGBA, rgbaToPngB64 } from "./dom.js";

const ZOOM = 3; // nearest-neighbor display scale over the native resolution

interface AppState {
  api: ApiClient;
  palette: Palette;
  sessionId: string | null;
  editor: MaskEditor | null;
  size: number;
  history: HistoryEntry[];
  compareSelection: number[];
  overlayVisible: boolean;
  busy: boolean;
}

const state: AppState = {
  api: new ApiClient("/api"),
  palette: [],
  sessionId: null,
  editor: null,
  size: 0,
  history: [],
  compareSelection: [],
  overlayVisible: true,
  busy: false,
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function setStatus(text: string, isError = false): void {
  const bar = el<HTMLDivElement>("status");
  bar.textContent = text;
  bar.className = isError ? "status error" : "status";
}

function drawBase(img: HTMLImageElement): void {
  const canvas = el<HTMLCanvasElement>("base-canvas");
  canvas.width = state.size;
  canvas.height = state.size;
  canvas.style.width = `${state.size * ZOOM}px`;
  canvas.style.height = `${state.size * ZOOM}px`;
  canvas.getContext("2d")!.drawImage(img, 0, 0, state.size, state.size);
}

function redrawMask(): void {
  if (!state.editor) return;
  const canvas = el<HTMLCanvasElement>("mask-canvas");
  canvas.width = state.size;
  canvas.height = state.size;
  canvas.style.width = `${state.size * ZOOM}px`;
  canvas.style.height = `${state.size * ZOOM}px`;
  canvas.style.opacity = state.overlayVisible ? "0.65" : "0";
  const rgba = state.editor.raster.toRGBA(state.palette);
  canvas.getContext("2d")!.putImageData(new ImageData(rgba, state.size, state.size), 0, 0);
  el<HTMLButtonElement>("undo").disabled = !state.editor.canUndo();
  el<HTMLButtonElement>("redo").disabled = !state.editor.canRedo();
}

function renderLegend(): void {
  const legend = el<HTMLDivElement>("legend");
  legend.innerHTML = "";
  for (const entry of state.palette) {
    const item = document.createElement("button");
    item.className = "legend-item";
    item.dataset.label = String(entry.id);
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = `rgb(${entry.rgb.join(",")})`;
    item.append(swatch, document.createTextNode(entry.name));
    item.onclick = () => {
      state.editor!.activeLabel = entry.id;
      legend.querySelectorAll(".legend-item").forEach((n) => n.classList.remove("active"));
      item.classList.add("active");
    };
    legend.append(item);
  }
  const first = legend.querySelector<HTMLButtonElement>(".legend-item");
  first?.click();
}

async function renderHistory(): Promise<void> {
  const strip = el<HTMLDivElement>("history");
  strip.innerHTML = "";
  for (const entry of state.history) {
    const img = await pngB64ToImage(entry.result);
    img.className = "thumb";
    img.title = `result ${entry.index}`;
    img.onclick = () => toggleCompare(entry.index);
    strip.append(img);
  }
  renderCompare();
}

function toggleCompare(index: number): void {
  const sel = state.compareSelection;
  const pos = sel.indexOf(index);
  if (pos >= 0) sel.splice(pos, 1);
  else {
    sel.push(index);
    if (sel.length > 2) sel.shift();
  }
  renderCompare();
}

function renderCompare(): void {
  const panel = el<HTMLDivElement>("compare");
  panel.innerHTML = "";
  for (const index of state.compareSelection) {
    const entry = state.history.find((h) => h.index === index);
    if (!entry) continue;
    const fig = document.createElement("figure");
    const img = document.createElement("img");
    img.src = `data:image/png;base64,${entry.result}`;
    img.className = "compare-img";
    const cap = document.createElement("figcaption");
    cap.textContent = `result ${entry.index}`;
    fig.append(img, cap);
    panel.append(fig);
  }
}

function canvasPoint(event: PointerEvent): Point {
  const canvas = el<HTMLCanvasElement>("mask-canvas");
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) / rect.width) * state.size,
    y: ((event.clientY - rect.top) / rect.height) * state.size,
  };
}

function bindPainting(): void {
  const canvas = el<HTMLCanvasElement>("mask-canvas");
  let last: Point | null = null;
  canvas.onpointerdown = (e) => {
    if (!state.editor || state.busy) return;
    canvas.setPointerCapture(e.pointerId);
    state.editor.beginStroke();
    last = canvasPoint(e);
    state.editor.paint([last]);
    redrawMask();
  };
  canvas.onpointermove = (e) => {
    if (!state.editor || last === null) return;
    const p = canvasPoint(e);
    state.editor.paint([last, p]);
    last = p;
    redrawMask();
  };
  const finish = () => {
    state.editor?.endStroke();
    last = null;
    redrawMask();
  };
  canvas.onpointerup = finish;
  canvas.onpointercancel = finish;
}

async function openSession(imageFile: File, maskFile: File): Promise<void> {
  setStatus("creating session…");
  state.busy = true;
  try {
    const artifacts = await state.api.createSession(
      await fileToPngB64(imageFile),
      await fileToPngB64(maskFile),
    );
    state.sessionId = artifacts.id;
    state.palette = artifacts.palette;
    const coarse = await pngB64ToImage(artifacts.coarse);
    state.size = coarse.naturalWidth;
    drawBase(coarse);

    const semantic = await pngB64ToRGBA(artifacts.semantic_mask);
    const raster = LabelRaster.fromRGBA(semantic.data, semantic.width, semantic.height, state.palette);

    const session = await state.api.getSession(artifacts.id);
    const damageRGBA = await pngB64ToRGBA(session.mask);
    const damage = new Uint8Array(state.size * state.size);
    for (let i = 0; i < damage.length; i++) damage[i] = damageRGBA.data[i * 4] >= 128 ? 1 : 0;

    state.editor = new MaskEditor(raster, damage);
    state.history = [];
    state.compareSelection = [];
    renderLegend();
    redrawMask();
    await renderHistory();
    el<HTMLDivElement>("editor-panel").hidden = false;
    setStatus(`session ${artifacts.id.slice(0, 8)} ready - paint, then submit`);
  } catch (err) {
    setStatus(errText(err), true);
  } finally {
    state.busy = false;
  }
}

async function submit(): Promise<void> {
  if (!state.editor || !state.sessionId || state.busy) return;
  state.busy = true;
  const button = el<HTMLButtonElement>("submit");
  button.disabled = true; // one in-flight refine at a time
  setStatus("refining…");
  try {
    const rgba = state.editor.raster.toRGBA(state.palette);
    const maskB64 = rgbaToPngB64(rgba, state.size, state.size);
    await state.api.refine(state.sessionId, maskB64);
    const session = await state.api.getSession(state.sessionId);
    state.history = session.history;
    await renderHistory();
    setStatus(`refined (${state.history.length} result${state.history.length > 1 ? "s" : ""})`);
  } catch (err) {
    setStatus(errText(err), true);
  } finally {
    state.busy = false;
    button.disabled = false;
  }
}

function errText(err: unknown): string {
  if (err instanceof ApiError) return `${err.code}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

export function start(): void {
  bindPainting();
  el<HTMLButtonElement>("open").onclick = () => {
    const image = el<HTMLInputElement>("image-file").files?.[0];
    const mask = el<HTMLInputElement>("mask-file").files?.[0];
    if (!image || !mask) {
      setStatus("choose both an image and a damage mask", true);
      return;
    }
    void openSession(image, mask);
  };
  el<HTMLButtonElement>("submit").onclick = () => void submit();
  el<HTMLButtonElement>("undo").onclick = () => {
    state.editor?.undo();
    redrawMask();
  };
  el<HTMLButtonElement>("redo").onclick = () => {
    state.editor?.redo();
    redrawMask();
  };
  el<HTMLInputElement>("brush-size").oninput = (e) => {
    if (state.editor) state.editor.brushRadius = Number((e.target as HTMLInputElement).value);
  };
  el<HTMLInputElement>("context-lock").onchange = (e) => {
    if (state.editor) state.editor.contextLock = (e.target as HTMLInputElement).checked;
  };
  el<HTMLInputElement>("overlay-toggle").onchange = (e) => {
    state.overlayVisible = (e.target as HTMLInputElement).checked;
    redrawMask();
  };
  setStatus("open an image and its damage mask to start");
}

start();
