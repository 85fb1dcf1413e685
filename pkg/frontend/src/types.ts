/**
 * Wire types for the session server plus the ports (display, clock,
 * input) the runner talks to. The ports keep the trial logic free of
 * DOM calls so the same runner drives a canvas in a browser and fakes
 * in the test suite.
 */

/** One trial as listed in the session manifest: ids only, no answer key. */
export interface ManifestTrial {
  index: number;
  stimulus_a: string;
  stimulus_b: string;
  stimulus_x: string;
}

/** Progress block returned by every session endpoint. */
export interface Progress {
  session_id: string;
  n_trials: number;
  n_answered: number;
  n_skipped: number;
  n_flagged: number;
  next_index: number | null;
  done: boolean;
}

/** GET /sessions/{sid}: the full design (ids and timing) plus progress. */
export interface SessionManifest extends Progress {
  stimulus_ms: number;
  blank_ms: number;
  trials: ManifestTrial[];
}

/** GET /sessions/{sid}/trials/next. */
export type NextTrial =
  | { done: true }
  | {
      done: false;
      index: number;
      stimulus_a: string;
      stimulus_b: string;
      stimulus_x: string;
      stimulus_ms: number;
      blank_ms: number;
    };

/** POST /sessions/{sid}/responses body; stimulus ids are echoed so the
 * server can verify the client displayed the right images. */
export interface ResponsePayload {
  index: number;
  response: "A" | "B";
  response_time_ms: number;
  timestamp: string;
  stimulus_a: string;
  stimulus_b: string;
  stimulus_x: string;
}

/** POST /sessions/{sid}/skips body. */
export interface SkipPayload {
  index: number;
  reason: string;
  timestamp: string;
}

/** Acknowledgment for responses and skips: progress plus outcome flags. */
export interface PostAck extends Progress {
  recorded?: boolean;
  duplicate?: boolean;
  skipped?: boolean;
  record?: Record<string, unknown>;
  skip?: Record<string, unknown>;
}

/** Error body for rejected posts (400 and 409). */
export interface ErrorBody {
  error: string;
  expected?: number | null;
  got?: number;
  [key: string]: unknown;
}

/** Central fixation marker, pinned to the stimulus center. */
export interface FixationDot {
  cx: number;
  cy: number;
  radius: number;
}

/** Everything the presentation layer needs for one trial. */
export interface TrialView {
  index: number;
  stimulusA: string;
  stimulusB: string;
  stimulusX: string;
  stimulusMs: number;
  blankMs: number;
}

/** Fetched stimulus bytes keyed by opaque id. */
export interface StimulusImage {
  id: string;
  bytes: Uint8Array;
}

/** Rendering port. drawStimulus is called once per frame so the
 * adapter can recenter against the live viewport (window resizes take
 * effect on the very next frame). */
export interface Display {
  /** Decode/cache images before any frame is shown; the runner never
   * draws a stimulus that has not passed through prepare. */
  prepare(view: TrialView, images: StimulusImage[]): Promise<void>;
  drawStimulus(image: StimulusImage, view: TrialView, frame: number): void;
  drawBlank(): void;
  showPrompt(view: TrialView, keys: [string, string], progress: Progress | null): void;
  showSummary(summary: SessionSummary): void;
}

/** Frame clock. nextFrame resolves at the next repaint with its
 * timestamp; frameMs is the nominal frame period used for frame-count
 * scheduling. */
export interface Clock {
  readonly frameMs: number;
  now(): number;
  nextFrame(): Promise<number>;
}

/** Keyboard port: listener receives every key with a press timestamp. */
export interface InputSource {
  onKey(listener: (key: string, timeMs: number) => void): () => void;
}

/** Outcome of a completed (or resumed-and-finished) session. */
export interface SessionSummary {
  sessionId: string;
  nTrials: number;
  answered: number;
  skipped: number;
  /** Presentation segments whose wall-clock span exceeded the frame
   * budget by more than one frame; logged, never fatal. */
  frameOverruns: number;
  done: boolean;
}
