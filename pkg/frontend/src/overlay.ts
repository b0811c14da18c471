/**
 * Geometry of the draggable mask overlay: hit-testing and gesture
 * arithmetic in detector pixel coordinates.  Pure math — the canvas
 * drawing lives in main.ts, and nothing here talks to the network.
 */

import { MaskGeometry } from './state.js';

export type HitTarget = 'center' | 'inner' | 'outer' | null;

const HANDLE_TOLERANCE = 2; // pixels around a radius line that grab it

export function hitTest(g: MaskGeometry, x: number, y: number): HitTarget {
  const d = Math.hypot(x - g.cx, y - g.cy);
  const toOuter = Math.abs(d - g.rOuter);
  const toInner = g.shape === 'ring' ? Math.abs(d - g.rInner) : Infinity;
  if (Math.min(toOuter, toInner) <= HANDLE_TOLERANCE) {
    return toInner < toOuter ? 'inner' : 'outer';
  }
  return d < g.rOuter ? 'center' : null;
}

/** Radius implied by the pointer position during a handle drag. */
export function radiusFromPointer(g: MaskGeometry, x: number, y: number): number {
  return Math.hypot(x - g.cx, y - g.cy);
}

export type Gesture = {
  target: Exclude<HitTarget, null>;
  lastX: number;
  lastY: number;
};

export function startGesture(g: MaskGeometry, x: number, y: number): Gesture | null {
  const target = hitTest(g, x, y);
  return target ? { target, lastX: x, lastY: y } : null;
}
