/**
 * Frame-count presentation: durations are converted to whole frames and
 * each frame is drawn at a repaint, which is the only way to hold a
 * duration to within one frame on a real display. Overruns (missed
 * vsyncs) are measured and reported, never thrown.
 */

import type { Clock } from "./types.js";

/** Whole frames that best match a duration at the given frame period.
 * Zero (or negative) duration means zero frames, so adjacent segments
 * run back-to-back; any positive duration shows at least one frame. */
export function framesFor(durationMs: number, frameMs: number): number {
  if (durationMs <= 0) {
    return 0;
  }
  return Math.max(1, Math.round(durationMs / frameMs));
}

export interface PresentationStats {
  /** Frames actually drawn (always the requested count). */
  frames: number;
  /** Timestamp of the first drawn frame; NaN when frames === 0. */
  onsetMs: number;
  /** Wall-clock span from first frame to the end of the last. */
  elapsedMs: number;
  /** Whole frames by which the span exceeded the nominal budget. */
  overrunFrames: number;
}

/** Draw one frame per repaint for nFrames repaints. */
export async function presentForFrames(
  draw: (frame: number) => void,
  nFrames: number,
  clock: Clock,
): Promise<PresentationStats> {
  if (nFrames <= 0) {
    return { frames: 0, onsetMs: NaN, elapsedMs: 0, overrunFrames: 0 };
  }
  let onsetMs = 0;
  for (let frame = 0; frame < nFrames; frame++) {
    const t = await clock.nextFrame();
    if (frame === 0) {
      onsetMs = t;
    }
    draw(frame);
  }
  const elapsedMs = clock.now() - onsetMs;
  // first-to-last frame callbacks span n - 1 periods at the nominal
  // rate (the last frame stays visible until the following repaint)
  const overrun = Math.round(elapsedMs / clock.frameMs) - (nFrames - 1);
  return {
    frames: nFrames,
    onsetMs,
    elapsedMs,
    overrunFrames: Math.max(0, overrun),
  };
}
