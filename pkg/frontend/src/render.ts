/**
 * Progressive stripe renderer.
 *
 * Partial results are frame-range slabs; frames map row-major onto the
 * scan grid, so each partition paints a contiguous stripe (possibly
 * starting and ending mid-row).  Display uses linear min-max
 * normalization over the currently filled frames, recomputed per partial;
 * frames still pending are painted black.
 */

export type StripeSpan = { frameStart: number; frameCount: number };

export class ProgressiveImage {
  readonly width: number;
  readonly height: number;
  /** channel-0 values per scan position (NaN while pending) */
  readonly values: Float64Array;
  private readonly filledFrames: Uint8Array;
  private paintedSpans: StripeSpan[] = [];

  constructor(scanShape: number[]) {
    [this.height, this.width] = scanShape;
    this.values = new Float64Array(this.width * this.height).fill(NaN);
    this.filledFrames = new Uint8Array(this.width * this.height);
  }

  /** Paint one partial: `slab` is (frameCount, channels) row-major. */
  applyPartial(frameStart: number, frameCount: number, slab: Float64Array): StripeSpan {
    const channels = slab.length / frameCount;
    for (let f = 0; f < frameCount; f++) {
      this.values[frameStart + f] = slab[f * channels]; // channel 0
      this.filledFrames[frameStart + f] = 1;
    }
    const span = { frameStart, frameCount };
    this.paintedSpans.push(span);
    return span;
  }

  /** Full repaint source after completion: the accumulated grid. */
  applyFullGrid(grid: Float64Array): void {
    this.values.set(grid);
    this.filledFrames.fill(1);
  }

  get spans(): readonly StripeSpan[] {
    return this.paintedSpans;
  }

  get filledCount(): number {
    let n = 0;
    for (let i = 0; i < this.filledFrames.length; i++) n += this.filledFrames[i];
    return n;
  }

  isFilled(frame: number): boolean {
    return this.filledFrames[frame] === 1;
  }

  /** Min-max over filled frames only; null until anything is filled. */
  normalizationRange(): { lo: number; hi: number } | null {
    let lo = Infinity;
    let hi = -Infinity;
    for (let i = 0; i < this.values.length; i++) {
      if (!this.filledFrames[i]) continue;
      const v = this.values[i];
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
    return lo === Infinity ? null : { lo, hi };
  }

  /**
   * Render to an RGBA pixel buffer (grayscale, opaque).  Pending frames
   * are black.  A constant filled image renders mid-gray rather than
   * dividing by zero.
   */
  toRgba(): Uint8ClampedArray<ArrayBuffer> {
    const out = new Uint8ClampedArray(this.width * this.height * 4);
    const range = this.normalizationRange();
    for (let i = 0; i < this.values.length; i++) {
      let level = 0;
      if (this.filledFrames[i] && range) {
        level =
          range.hi === range.lo
            ? 128
            : Math.round(((this.values[i] - range.lo) / (range.hi - range.lo)) * 255);
      }
      out[i * 4] = level;
      out[i * 4 + 1] = level;
      out[i * 4 + 2] = level;
      out[i * 4 + 3] = 255;
    }
    return out;
  }
}

/** Normalize a complete grid exactly as the progressive renderer would. */
export function renderCompleteGrid(scanShape: number[], grid: Float64Array): Uint8ClampedArray<ArrayBuffer> {
  const image = new ProgressiveImage(scanShape);
  image.applyFullGrid(grid);
  return image.toRgba();
}
