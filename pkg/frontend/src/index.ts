export {
  backoffDelayMs,
  HttpError,
  Outbox,
  SessionClient,
} from "./client.js";
export type {
  ClientOptions,
  OutboxOptions,
  PostResult,
  RetryOptions,
  Sleeper,
} from "./client.js";
export { attachRunner, CanvasDisplay, FrameClock, KeyboardInput } from "./dom.js";
export { centerImage, fixationForPlacement } from "./geometry.js";
export type { Placement, Viewport } from "./geometry.js";
export { ResponseCollector } from "./input.js";
export type { KeyPress } from "./input.js";
export { DEFAULT_KEYS, runSession } from "./runner.js";
export type { RunnerOptions } from "./runner.js";
export { framesFor, presentForFrames } from "./timing.js";
export type { PresentationStats } from "./timing.js";
export type * from "./types.js";
