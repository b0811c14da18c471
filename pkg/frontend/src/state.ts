/**
 * UI state and the pure reducers that mutate it.
 *
 * Mask-geometry edits are strictly local: nothing here performs network
 * IO, and no network event is allowed to write back into the geometry.
 * Apply snapshots the geometry into an analysis spec for submission.
 */

export type DatasetSummary = {
  dataset_id: string;
  path: string;
  scan_shape: number[];
  sig_shape: number[];
  dtype: string;
  total_frames: number;
  partitions: number;
  partition_frame_counts: number[];
};

export type MaskGeometry = {
  shape: 'disk' | 'ring';
  cx: number; // detector pixel coordinates
  cy: number;
  rInner: number;
  rOuter: number;
};

export type LeftPaneMode =
  | { mode: 'sum' }
  | { mode: 'pick'; scanX: number; scanY: number };

export type JobPhase = 'idle' | 'running' | 'done' | 'cancelled' | 'failed';

export type UiAnalysisState = {
  dataset: DatasetSummary | null;
  geometry: MaskGeometry;
  leftPane: LeftPaneMode;
  analysisId: string | null;
  jobId: string | null;
  jobPhase: JobPhase;
  /** partition_index -> painted, for the active job */
  fillMap: Map<number, boolean>;
  warning: string | null;
};

export function initialState(): UiAnalysisState {
  return {
    dataset: null,
    geometry: { shape: 'ring', cx: 0, cy: 0, rInner: 0, rOuter: 1 },
    leftPane: { mode: 'sum' },
    analysisId: null,
    jobId: null,
    jobPhase: 'idle',
    fillMap: new Map(),
    warning: null,
  };
}

export function selectDataset(state: UiAnalysisState, ds: DatasetSummary): void {
  const [h, w] = ds.sig_shape;
  state.dataset = ds;
  // start with a centered ring covering the middle of the detector
  state.geometry = {
    shape: 'ring',
    cx: (w - 1) / 2,
    cy: (h - 1) / 2,
    rInner: Math.min(h, w) / 8,
    rOuter: Math.min(h, w) / 4,
  };
}

/** Drag of the mask center; purely local. */
export function dragCenter(state: UiAnalysisState, dx: number, dy: number): void {
  state.geometry.cx += dx;
  state.geometry.cy += dy;
}

/**
 * Drag of a radius handle.  The invariant rInner <= rOuter is enforced
 * during the gesture, so an invalid geometry can never be submitted.
 */
export function dragRadius(
  state: UiAnalysisState,
  which: 'inner' | 'outer',
  r: number,
): void {
  const g = state.geometry;
  const clamped = Math.max(0, r);
  if (which === 'inner') {
    g.rInner = Math.min(clamped, g.rOuter);
  } else {
    g.rOuter = Math.max(clamped, g.rInner);
  }
}

/** Snapshot the current geometry as the analysis spec to submit. */
export function specFromGeometry(state: UiAnalysisState): object {
  const g = state.geometry;
  const mask =
    g.shape === 'disk'
      ? { kind: 'disk', cx: g.cx, cy: g.cy, r: g.rOuter }
      : { kind: 'ring', cx: g.cx, cy: g.cy, r_inner: g.rInner, r_outer: g.rOuter };
  return { variant: 'mask_apply', masks: [mask] };
}

/**
 * A newly submitted job takes over the display; the previous one (if still
 * running) is returned so the caller can cancel it on the backend.
 */
export function adoptJob(state: UiAnalysisState, jobId: string): string | null {
  const stale = state.jobPhase === 'running' ? state.jobId : null;
  state.jobId = jobId;
  state.jobPhase = 'running';
  state.fillMap = new Map();
  state.warning = null;
  return stale;
}

export function markPartition(
  state: UiAnalysisState,
  jobId: string,
  partitionIndex: number,
): boolean {
  if (jobId !== state.jobId) return false; // stale job, ignore
  state.fillMap.set(partitionIndex, true);
  return true;
}

export function finishJob(
  state: UiAnalysisState,
  jobId: string,
  phase: Exclude<JobPhase, 'idle' | 'running'>,
): boolean {
  if (jobId !== state.jobId) return false;
  state.jobPhase = phase;
  return true;
}
