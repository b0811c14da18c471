/**
 * Page wiring: left pane (detector view + mask overlay), right pane
 * (progressive virtual-detector image), dataset picker, Apply button.
 */

import { ApiClient, ApiError } from './api.js';
import { radiusFromPointer, startGesture, Gesture } from './overlay.js';
import { ProgressiveImage } from './render.js';
import {
  adoptJob,
  dragCenter,
  dragRadius,
  finishJob,
  initialState,
  markPartition,
  selectDataset,
  specFromGeometry,
  UiAnalysisState,
} from './state.js';
import { StreamEvent } from './wire.js';

const api = new ApiClient();
const state: UiAnalysisState = initialState();

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

let leftCanvas: HTMLCanvasElement;
let rightCanvas: HTMLCanvasElement;
let image: ProgressiveImage | null = null;
let leftImage: ProgressiveImage | null = null;
let closeStream: (() => void) | null = null;
let repaintQueued = false;

function warn(message: string | null): void {
  state.warning = message;
  const banner = $('warning');
  banner.textContent = message ?? '';
  banner.style.display = message ? 'block' : 'none';
}

function setStatus(text: string): void {
  $('status').textContent = text;
}

// -- painting ----------------------------------------------------------------

function paintImage(canvas: HTMLCanvasElement, img: ProgressiveImage): void {
  const ctx = canvas.getContext('2d')!;
  canvas.width = img.width;
  canvas.height = img.height;
  ctx.putImageData(new ImageData(img.toRgba(), img.width, img.height), 0, 0);
}

function paintOverlay(): void {
  if (!state.dataset || !leftImage) return;
  const ctx = leftCanvas.getContext('2d')!;
  paintImage(leftCanvas, leftImage);
  const g = state.geometry;
  ctx.strokeStyle = '#ff8800';
  ctx.lineWidth = 0.5;
  ctx.beginPath();
  ctx.arc(g.cx, g.cy, g.rOuter, 0, 2 * Math.PI);
  ctx.stroke();
  if (g.shape === 'ring') {
    ctx.beginPath();
    ctx.arc(g.cx, g.cy, g.rInner, 0, 2 * Math.PI);
    ctx.stroke();
  }
  $('geometry').textContent =
    `center (${g.cx.toFixed(1)}, ${g.cy.toFixed(1)}) ` +
    `r ${g.rInner.toFixed(1)}..${g.rOuter.toFixed(1)}`;
}

/** Coalesce repaints to animation frames. */
function queueRepaint(): void {
  if (repaintQueued) return;
  repaintQueued = true;
  requestAnimationFrame(() => {
    repaintQueued = false;
    if (image) paintImage(rightCanvas, image);
    paintOverlay();
  });
}

// -- event stream ------------------------------------------------------------

function onStreamEvent(ev: StreamEvent): void {
  if (ev.kind === 'integrity') {
    warn(`stream integrity: ${ev.message}`);
    return;
  }
  const jobId = ev.envelope.job_id;
  if (ev.kind === 'partial') {
    if (!image || !markPartition(state, jobId, ev.envelope.partition_index)) return;
    image.applyPartial(ev.envelope.frame_start, ev.envelope.frame_count, ev.slab);
    setStatus(`partition ${ev.envelope.partition_index} arrived`);
    queueRepaint();
  } else if (ev.kind === 'complete') {
    if (!finishJob(state, jobId, 'done')) return;
    if (!ev.checksumOk) warn('checksum mismatch: displayed data may be incomplete');
    setStatus(`done (${ev.envelope.partitions} partitions)`);
    queueRepaint(); // final repaint from the accumulated grid
  } else {
    if (!finishJob(state, jobId, ev.envelope.status)) return;
    setStatus(ev.envelope.error ? `failed: ${ev.envelope.error}` : 'cancelled');
  }
}

// -- actions -----------------------------------------------------------------

async function apply(): Promise<void> {
  if (!state.dataset) return;
  warn(null);
  try {
    const spec = specFromGeometry(state);
    const analysis = await api.createAnalysis(state.dataset.dataset_id, spec);
    const job = await api.startJob(analysis.analysis_id);
    const stale = adoptJob(state, job.job_id);
    if (stale) api.cancelJob(stale).catch(() => undefined);
    if (closeStream) closeStream();
    image = new ProgressiveImage(state.dataset.scan_shape);
    queueRepaint();
    closeStream = api.subscribe(job.job_id, onStreamEvent);
    setStatus(`job ${job.job_id.slice(0, 8)} started`);
  } catch (err) {
    if (err instanceof ApiError) warn(err.message);
    else throw err;
  }
}

async function openDataset(): Promise<void> {
  const path = ($('path') as HTMLInputElement).value;
  try {
    const ds = await api.openDataset(path);
    selectDataset(state, ds);
    leftImage = new ProgressiveImage(ds.sig_shape);
    setStatus(`${ds.total_frames} frames, ${ds.partitions} partitions`);
    queueRepaint();
  } catch (err) {
    if (err instanceof ApiError) warn(err.message);
    else throw err;
  }
}

// -- pointer gestures (local only; no network until Apply) -------------------

function canvasPoint(ev: PointerEvent): { x: number; y: number } {
  const rect = leftCanvas.getBoundingClientRect();
  return {
    x: ((ev.clientX - rect.left) / rect.width) * leftCanvas.width,
    y: ((ev.clientY - rect.top) / rect.height) * leftCanvas.height,
  };
}

function attachGestures(): void {
  let gesture: Gesture | null = null;
  leftCanvas.addEventListener('pointerdown', (ev) => {
    const { x, y } = canvasPoint(ev);
    gesture = startGesture(state.geometry, x, y);
    if (gesture) leftCanvas.setPointerCapture(ev.pointerId);
  });
  leftCanvas.addEventListener('pointermove', (ev) => {
    if (!gesture) return;
    const { x, y } = canvasPoint(ev);
    if (gesture.target === 'center') {
      dragCenter(state, x - gesture.lastX, y - gesture.lastY);
      gesture.lastX = x;
      gesture.lastY = y;
    } else {
      dragRadius(state, gesture.target, radiusFromPointer(state.geometry, x, y));
    }
    queueRepaint();
  });
  leftCanvas.addEventListener('pointerup', () => {
    gesture = null;
  });
}

window.addEventListener('DOMContentLoaded', () => {
  leftCanvas = $('detector');
  rightCanvas = $('result');
  $('open').addEventListener('click', () => void openDataset());
  $('apply').addEventListener('click', () => void apply());
  attachGestures();
});
