/**
 * Pure layout math: centering a stimulus in the viewport and pinning
 * the fixation dot to the stimulus center. The canvas adapter calls
 * these every frame, so a window resize recenters on the next repaint
 * without any dedicated resize bookkeeping.
 */

import type { FixationDot } from "./types.js";

export interface Viewport {
  width: number;
  height: number;
}

export interface Placement {
  x: number;
  y: number;
  width: number;
  height: number;
}

/** Top-left corner that centers an image; clamped so oversized images
 * anchor at the origin instead of going negative. */
export function centerImage(
  viewport: Viewport,
  imageWidth: number,
  imageHeight: number,
): Placement {
  return {
    x: Math.max(0, (viewport.width - imageWidth) / 2),
    y: Math.max(0, (viewport.height - imageHeight) / 2),
    width: imageWidth,
    height: imageHeight,
  };
}

/** Fixation dot at the center of the placed image, whatever the
 * viewport currently is. */
export function fixationForPlacement(p: Placement, radius = 4): FixationDot {
  return {
    cx: p.x + p.width / 2,
    cy: p.y + p.height / 2,
    radius,
  };
}
