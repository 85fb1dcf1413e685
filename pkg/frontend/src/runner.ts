/**
 * Session driver: fetches trials in server order, preloads all three
 * stimuli before anything is shown, presents A/blank/B/blank/X by
 * frame count, then prompts for one of two response keys. Responses
 * and skips go through the ordered outbox, with the stimulus ids the
 * client actually displayed echoed in every response so the server can
 * verify them.
 *
 * Resume is server-driven: the loop always asks for the next
 * unresolved trial, so a reload or reconnect carries on where the log
 * left off. Response time is measured from X onset; a press buffered
 * before X clamps to zero and is flagged as implausible server-side
 * rather than hidden.
 */

import { Outbox, SessionClient } from "./client.js";
import type { PostResult } from "./client.js";
import { ResponseCollector } from "./input.js";
import { framesFor, presentForFrames } from "./timing.js";
import type {
  Clock,
  Display,
  InputSource,
  Progress,
  ResponsePayload,
  SessionSummary,
  StimulusImage,
  TrialView,
} from "./types.js";

export interface RunnerOptions {
  client: SessionClient;
  sessionId: string;
  display: Display;
  clock: Clock;
  input: InputSource;
  /** Keys for "first interval" and "second interval". */
  keys?: [string, string];
  outbox?: Outbox;
  onProgress?: (progress: Progress) => void;
}

export const DEFAULT_KEYS: [string, string] = ["f", "j"];

export async function runSession(opts: RunnerOptions): Promise<SessionSummary> {
  const keys = opts.keys ?? DEFAULT_KEYS;
  const outbox = opts.outbox ?? new Outbox();
  const collector = new ResponseCollector(opts.input, keys);
  let frameOverruns = 0;
  try {
    let progress: Progress | null = await opts.client.manifest(opts.sessionId);
    opts.onProgress?.(progress);
    for (;;) {
      const next = await opts.client.nextTrial(opts.sessionId);
      if (next.done) {
        break;
      }
      const view: TrialView = {
        index: next.index,
        stimulusA: next.stimulus_a,
        stimulusB: next.stimulus_b,
        stimulusX: next.stimulus_x,
        stimulusMs: next.stimulus_ms,
        blankMs: next.blank_ms,
      };

      let images: Map<string, StimulusImage>;
      try {
        images = await preload(opts.client, view);
        await opts.display.prepare(view, [...images.values()]);
      } catch (err) {
        const ack = await outbox.enqueue(() =>
          opts.client.postSkip(opts.sessionId, {
            index: view.index,
            reason: `stimulus-load-failure: ${describe(err)}`,
            timestamp: new Date().toISOString(),
          }),
        );
        rejectOnClientBug(ack, view.index);
        // 200 (skipped or duplicate) and 409 (already resolved) both
        // mean the server holds an authoritative record for this trial
        if (ack.status === 200) {
          progress = ack.body;
          opts.onProgress?.(progress);
        }
        continue;
      }

      collector.arm();
      const presented = await presentTrial(opts.display, opts.clock, view, images);
      frameOverruns += presented.overruns;
      opts.display.showPrompt(view, keys, progress);
      const press = await collector.awaitResponse();

      const payload: ResponsePayload = {
        index: view.index,
        response: press.key === keys[0] ? "A" : "B",
        response_time_ms: Math.max(0, press.timeMs - presented.xOnsetMs),
        timestamp: new Date().toISOString(),
        stimulus_a: view.stimulusA,
        stimulus_b: view.stimulusB,
        stimulus_x: view.stimulusX,
      };
      const ack = await outbox.enqueue(() =>
        opts.client.postResponse(opts.sessionId, payload),
      );
      rejectOnClientBug(ack, view.index);
      if (ack.status === 200) {
        progress = ack.body;
        opts.onProgress?.(progress);
      }
      // a 409 means the server already resolved this trial some other
      // way; the next loop iteration re-syncs from trials/next
    }

    const final = await opts.client.manifest(opts.sessionId);
    const summary: SessionSummary = {
      sessionId: final.session_id,
      nTrials: final.n_trials,
      answered: final.n_answered,
      skipped: final.n_skipped,
      frameOverruns,
      done: final.done,
    };
    opts.display.showSummary(summary);
    return summary;
  } finally {
    collector.dispose();
  }
}

/** Fetch every distinct stimulus for the trial (X shares bytes with one
 * interval but has its own id, so this is usually three downloads). */
async function preload(
  client: SessionClient,
  view: TrialView,
): Promise<Map<string, StimulusImage>> {
  const ids = [...new Set([view.stimulusA, view.stimulusB, view.stimulusX])];
  const fetched = await Promise.all(
    ids.map(async (id) => ({ id, bytes: await client.stimulus(id) })),
  );
  return new Map(fetched.map((image) => [image.id, image]));
}

interface Presented {
  xOnsetMs: number;
  overruns: number;
}

async function presentTrial(
  display: Display,
  clock: Clock,
  view: TrialView,
  images: Map<string, StimulusImage>,
): Promise<Presented> {
  const stimulusFrames = framesFor(view.stimulusMs, clock.frameMs);
  const blankFrames = framesFor(view.blankMs, clock.frameMs);
  const image = (id: string): StimulusImage => {
    const found = images.get(id);
    if (found === undefined) {
      throw new Error(`stimulus ${id} missing after preload`);
    }
    return found;
  };

  let overruns = 0;
  const show = async (id: string) => {
    const stats = await presentForFrames(
      (frame) => display.drawStimulus(image(id), view, frame),
      stimulusFrames,
      clock,
    );
    if (stats.overrunFrames > 1) {
      overruns += 1;
    }
    return stats;
  };
  const blank = async () => {
    const stats = await presentForFrames(
      () => display.drawBlank(),
      blankFrames,
      clock,
    );
    if (stats.overrunFrames > 1) {
      overruns += 1;
    }
  };

  await show(view.stimulusA);
  await blank();
  await show(view.stimulusB);
  await blank();
  const xStats = await show(view.stimulusX);
  const xOnsetMs = Number.isNaN(xStats.onsetMs) ? clock.now() : xStats.onsetMs;
  return { xOnsetMs, overruns };
}

/** 400s indicate a runner bug (wrong ids, malformed payload) and must
 * surface instead of being retried into the void. */
function rejectOnClientBug(ack: PostResult, index: number): void {
  if (ack.status === 400) {
    throw new Error(
      `server rejected trial ${index}: ${JSON.stringify(ack.body)}`,
    );
  }
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}
