/**
 * DOM wiring for the threshold tuner.  All decisions live in the pure
 * modules (api/state/controller/debounce/histogram/viewport/palette);
 * this file only moves values between them and the page.
 */

import { ApiClient, type SlideDetail, type HistogramDoc } from "./api.js";
import { TunerState } from "./state.js";
import { saveDraft, undoLast, openSlide, type SaveResult } from "./controller.js";
import { debounce } from "./debounce.js";
import { bars, valueToX, xToValue } from "./histogram.js";
import { legendEntries } from "./palette.js";
import {
  type Viewport, fullView, panBy, zoomAt, bboxParam, scaleFor,
} from "./viewport.js";

const api = new ApiClient();
const state = new TunerState();

let detail: SlideDetail | null = null;
let histogramDoc: HistogramDoc | null = null;
type SaveBadge = "saved" | "saving" | "unsaved" | "failed";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

const slideSelect = el<HTMLSelectElement>("slide-select");
const slideMeta = el<HTMLElement>("slide-meta");
const markerSelect = el<HTMLSelectElement>("marker-select");
const histCanvas = el<HTMLCanvasElement>("histogram");
const thresholdInput = el<HTMLInputElement>("threshold-input");
const saveBadge = el<HTMLElement>("save-badge");
const conflictBanner = el<HTMLElement>("conflict-banner");
const undoButton = el<HTMLButtonElement>("undo-button");
const countsBody = el<HTMLElement>("counts-body");
const layerSelect = el<HTMLSelectElement>("layer-select");
const viewer = el<HTMLElement>("viewer");
const overlayImg = el<HTMLImageElement>("overlay-img");
const resetViewButton = el<HTMLButtonElement>("reset-view");
const rulesPre = el<HTMLElement>("rules-text");
const statusLine = el<HTMLElement>("status-line");

// --- save pipeline ----------------------------------------------------------

async function save(): Promise<void> {
  if (state.takeUpdate() === null) {
    return;
  }
  setSaveBadge("saving");
  const result = await saveDraft(state, api);
  applySaveResult(result);
}

function applySaveResult(result: SaveResult): void {
  switch (result.kind) {
    case "clean":
      setSaveBadge("saved");
      break;
    case "saved":
      setSaveBadge(state.dirtyMarkers().length > 0 ? "unsaved" : "saved");
      showStatus("");
      if (state.dirtyMarkers().length > 0) {
        scheduleSave(); // drags that landed while the PUT was in flight
      }
      refreshOverlay();
      break;
    case "rebased":
      setSaveBadge("unsaved");
      if (state.takeUpdate() !== null) {
        scheduleSave(); // reapply the surviving draft on the new version
      } else {
        setSaveBadge("saved");
      }
      refreshOverlay();
      break;
    case "rejected":
      setSaveBadge("failed");
      showStatus(`rejected: ${result.message}`);
      break;
    case "offline":
      // the draft is still local and flagged unsaved
      setSaveBadge("failed");
      showStatus(`save failed: ${result.message}`);
      break;
  }
  renderConflict();
  renderCounts();
  renderThresholdControls();
  void refreshHistogram();
}

const scheduleSave = debounce(() => { void save(); });

function setSaveBadge(value: SaveBadge): void {
  saveBadge.textContent = {
    saved: "saved",
    saving: "saving…",
    unsaved: "unsaved",
    failed: "save failed — edits kept",
  }[value];
  saveBadge.dataset["state"] = value;
}

function showStatus(message: string): void {
  statusLine.textContent = message;
  statusLine.classList.toggle("hidden", message === "");
}

// --- rendering --------------------------------------------------------------

function renderSlideMeta(): void {
  if (detail === null) {
    slideMeta.textContent = "";
    return;
  }
  const parts = [
    `patient ${detail.patient_id}`,
    detail.site,
    detail.disease,
    `${detail.microns_per_pixel.toFixed(2)} µm/px`,
    `${detail.nucleus_count} nuclei`,
  ];
  if (!detail.has_images) {
    parts.push("features only — no imagery");
  }
  slideMeta.textContent = parts.join(" · ");
}

function renderMarkerOptions(): void {
  if (detail === null) {
    return;
  }
  markerSelect.replaceChildren(
    ...detail.markers.map((m) => new Option(m, m, false, m === state.marker)),
  );
}

function renderLayerOptions(): void {
  if (detail === null) {
    return;
  }
  const names: string[] = ["class-labels"];
  if (detail.has_images) {
    names.push("he");
  }
  for (const m of detail.markers) {
    names.push(`gate:${m}`);
  }
  if (detail.has_images) {
    for (const m of detail.markers) {
      names.push(`channel:${m}`);
    }
  }
  if (!names.includes(state.layer)) {
    state.layer = "class-labels";
  }
  layerSelect.replaceChildren(
    ...names.map((n) => new Option(n, n, false, n === state.layer)),
  );
}

function renderThresholdControls(): void {
  const marker = state.marker;
  if (marker === null) {
    return;
  }
  const value = state.displayedValue(marker);
  if (value !== undefined) {
    thresholdInput.value = String(Math.round(value * 100) / 100);
  }
  thresholdInput.classList.toggle("dirty", state.isDirty(marker));
  drawHistogram();
}

function drawHistogram(): void {
  const ctx = histCanvas.getContext("2d");
  if (ctx === null || histogramDoc === null) {
    return;
  }
  const { width, height } = histCanvas;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#4a6fa5";
  for (const bar of bars(histogramDoc.counts, width, height)) {
    ctx.fillRect(bar.x, bar.y, Math.max(1, bar.w - 1), bar.h);
  }
  const marker = state.marker;
  const value = marker === null ? undefined : state.displayedValue(marker);
  if (value !== undefined) {
    const x = valueToX(value, histogramDoc.edges, width);
    ctx.strokeStyle = marker !== null && state.isDirty(marker) ? "#e0a030" : "#d04040";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, height);
    ctx.stroke();
  }
}

function renderCounts(): void {
  const doc = state.lastCounts;
  if (doc === null) {
    countsBody.replaceChildren();
    return;
  }
  const classNames = Object.keys(doc.counts).filter(
    (k) => k !== "excluded" && k !== "unassigned",
  );
  const rows = legendEntries(classNames, doc.counts).map((entry) => {
    const row = document.createElement("tr");
    const swatchCell = document.createElement("td");
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.backgroundColor = entry.color;
    swatchCell.append(swatch);
    const nameCell = document.createElement("td");
    nameCell.textContent = entry.name;
    const countCell = document.createElement("td");
    countCell.className = "count";
    countCell.textContent = String(entry.count);
    row.append(swatchCell, nameCell, countCell);
    return row;
  });
  countsBody.replaceChildren(...rows);
}

function renderConflict(): void {
  const message = state.conflictMessage;
  conflictBanner.textContent = message ?? "";
  conflictBanner.classList.toggle("hidden", message === null);
  undoButton.disabled = !state.canUndo();
}

function refreshOverlay(): void {
  if (state.slideId === null || detail === null || !detail.has_images) {
    return;
  }
  const vp = state.viewport ?? fullView(detail.width ?? 1, detail.height ?? 1);
  state.viewport = vp;
  const scale = Math.max(0.125, scaleFor(vp, viewer.clientWidth || 640));
  const url = api.overlayUrl(state.slideId, state.layer, bboxParam(vp), scale);
  // version in the query string busts the browser cache after a commit
  overlayImg.src = `${url}&v=${state.serverVersion}`;
}

// --- data refresh -----------------------------------------------------------

async function refreshHistogram(): Promise<void> {
  if (state.slideId === null || state.marker === null) {
    return;
  }
  const slideId = state.slideId;
  const marker = state.marker;
  const doc = await api.histogram(slideId, marker);
  if (state.slideId !== slideId || state.marker !== marker) {
    return; // answer for a slide or marker we have moved away from
  }
  if (histogramDoc === null || histogramDoc.marker !== marker
      || doc.version >= histogramDoc.version) {
    histogramDoc = doc;
    drawHistogram();
  }
}

async function loadSlide(slideId: string): Promise<void> {
  histogramDoc = null;
  showStatus("");
  try {
    const loaded = await openSlide(state, api, slideId);
    if (loaded === null) {
      return;
    }
    detail = loaded;
    state.viewport = detail.has_images
      ? fullView(detail.width ?? 1, detail.height ?? 1)
      : null;
    renderSlideMeta();
    renderMarkerOptions();
    renderLayerOptions();
    renderThresholdControls();
    renderConflict();
    renderCounts();
    setSaveBadge("saved");
    viewer.classList.toggle("hidden", !detail.has_images);
    await refreshHistogram();
    refreshOverlay();
  } catch (err) {
    showStatus(`failed to load slide: ${String(err)}`);
  }
}

// --- event wiring -----------------------------------------------------------

slideSelect.addEventListener("change", () => {
  scheduleSave.cancel();
  void loadSlide(slideSelect.value);
});

markerSelect.addEventListener("change", () => {
  state.marker = markerSelect.value;
  histogramDoc = null;
  renderThresholdControls();
  void refreshHistogram();
});

function dragTo(value: number): void {
  const marker = state.marker;
  if (marker === null) {
    return;
  }
  state.dragValue(marker, value);
  setSaveBadge(state.dirtyMarkers().length > 0 ? "unsaved" : "saved");
  renderThresholdControls();
  scheduleSave();
}

thresholdInput.addEventListener("change", () => {
  const value = Number(thresholdInput.value);
  if (Number.isFinite(value)) {
    dragTo(value);
  }
});

let draggingThreshold = false;

histCanvas.addEventListener("pointerdown", (event) => {
  if (histogramDoc === null) {
    return;
  }
  draggingThreshold = true;
  histCanvas.setPointerCapture(event.pointerId);
  dragTo(xToValue(event.offsetX, histogramDoc.edges, histCanvas.width));
});

histCanvas.addEventListener("pointermove", (event) => {
  if (draggingThreshold && histogramDoc !== null) {
    dragTo(xToValue(event.offsetX, histogramDoc.edges, histCanvas.width));
  }
});

histCanvas.addEventListener("pointerup", () => {
  draggingThreshold = false;
});

undoButton.addEventListener("click", () => {
  scheduleSave.cancel();
  void (async () => {
    const result = await undoLast(state, api);
    if (result !== null) {
      applySaveResult(result);
    }
  })();
});

layerSelect.addEventListener("change", () => {
  state.layer = layerSelect.value;
  refreshOverlay();
});

resetViewButton.addEventListener("click", () => {
  if (detail !== null && detail.has_images) {
    state.viewport = fullView(detail.width ?? 1, detail.height ?? 1);
    refreshOverlay();
  }
});

let panning: { startX: number; startY: number; vp: Viewport } | null = null;

viewer.addEventListener("pointerdown", (event) => {
  if (state.viewport !== null) {
    panning = { startX: event.clientX, startY: event.clientY, vp: state.viewport };
    viewer.setPointerCapture(event.pointerId);
  }
});

viewer.addEventListener("pointermove", (event) => {
  if (panning === null || detail === null || state.viewport === null) {
    return;
  }
  const perPixel = state.viewport.w / (viewer.clientWidth || 1);
  state.viewport = panBy(
    panning.vp,
    (panning.startX - event.clientX) * perPixel,
    (panning.startY - event.clientY) * perPixel,
    detail.width ?? 1,
    detail.height ?? 1,
  );
  refreshOverlay();
});

viewer.addEventListener("pointerup", () => {
  panning = null;
});

viewer.addEventListener("wheel", (event) => {
  if (detail === null || state.viewport === null) {
    return;
  }
  event.preventDefault();
  const rect = viewer.getBoundingClientRect();
  state.viewport = zoomAt(
    state.viewport,
    event.deltaY < 0 ? 1.25 : 0.8,
    event.clientX - rect.left,
    event.clientY - rect.top,
    rect.width || 1,
    rect.height || 1,
    detail.width ?? 1,
    detail.height ?? 1,
  );
  refreshOverlay();
});

overlayImg.addEventListener("error", () => {
  // a missing tile shows as the checkerboard backing, not a broken image
  overlayImg.removeAttribute("src");
  showStatus(`overlay layer "${state.layer}" is unavailable for this slide`);
});

overlayImg.addEventListener("load", () => {
  showStatus("");
});

window.addEventListener("beforeunload", () => {
  // push any still-debounced edit out before the page goes away
  scheduleSave.flush();
});

// --- boot -------------------------------------------------------------------

async function boot(): Promise<void> {
  try {
    const [slides, rules] = await Promise.all([api.listSlides(), api.rulesText()]);
    rulesPre.textContent = rules;
    slideSelect.replaceChildren(
      ...slides.map((s) => new Option(
        `${s.slide_id} (${s.nucleus_count} nuclei)`, s.slide_id,
      )),
    );
    if (slides.length > 0) {
      slideSelect.value = slides[0].slide_id;
      await loadSlide(slides[0].slide_id);
    } else {
      showStatus("no slides loaded on the server");
    }
  } catch (err) {
    showStatus(`cannot reach the tuning service: ${String(err)}`);
  }
}

void boot();
