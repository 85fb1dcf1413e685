/**
 * Browser adapter: wires the Display/Clock/InputSource ports to a
 * canvas, requestAnimationFrame, and keydown events. All trial logic
 * lives in runner.ts; this file only draws and forwards events, so the
 * node test suite covers the runner against fakes and this adapter
 * stays thin enough to review by eye.
 */

import { SessionClient } from "./client.js";
import { centerImage, fixationForPlacement } from "./geometry.js";
import { runSession } from "./runner.js";
import type {
  Clock,
  Display,
  InputSource,
  Progress,
  SessionSummary,
  StimulusImage,
  TrialView,
} from "./types.js";

export class CanvasDisplay implements Display {
  private readonly ctx: CanvasRenderingContext2D;
  private readonly bitmaps = new Map<string, ImageBitmap>();

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly fixationRadius = 4,
  ) {
    const ctx = canvas.getContext("2d");
    if (ctx === null) {
      throw new Error("2d canvas context unavailable");
    }
    this.ctx = ctx;
    // match the window so centering math tracks resizes each frame
    const fit = () => {
      canvas.width = window.innerWidth;
      canvas.height = window.innerHeight;
    };
    fit();
    window.addEventListener("resize", fit);
  }

  async prepare(view: TrialView, images: StimulusImage[]): Promise<void> {
    void view;
    for (const image of images) {
      if (!this.bitmaps.has(image.id)) {
        // copy pins the bytes to a plain ArrayBuffer, which Blob requires
        const bytes = new Uint8Array(image.bytes);
        const blob = new Blob([bytes], { type: "image/png" });
        this.bitmaps.set(image.id, await createImageBitmap(blob));
      }
    }
  }

  drawStimulus(image: StimulusImage, view: TrialView, frame: number): void {
    void view;
    void frame;
    const bitmap = this.bitmaps.get(image.id);
    if (bitmap === undefined) {
      throw new Error(`stimulus ${image.id} was not prepared`);
    }
    const viewport = { width: this.canvas.width, height: this.canvas.height };
    const placement = centerImage(viewport, bitmap.width, bitmap.height);
    const dot = fixationForPlacement(placement, this.fixationRadius);
    this.clear();
    this.ctx.drawImage(bitmap, placement.x, placement.y);
    this.ctx.beginPath();
    this.ctx.arc(dot.cx, dot.cy, dot.radius, 0, 2 * Math.PI);
    this.ctx.fillStyle = "#e33";
    this.ctx.fill();
  }

  drawBlank(): void {
    this.clear();
  }

  showPrompt(
    view: TrialView,
    keys: [string, string],
    progress: Progress | null,
  ): void {
    this.clear();
    const lines = [
      `Did the last image match the first (${keys[0]}) or the second (${keys[1]})?`,
      progress === null
        ? `trial ${view.index + 1}`
        : `trial ${view.index + 1} of ${progress.n_trials}`,
    ];
    this.text(lines);
  }

  showSummary(summary: SessionSummary): void {
    this.clear();
    this.text([
      summary.done ? "Session complete." : "Session paused.",
      `${summary.answered} answered, ${summary.skipped} skipped of ${summary.nTrials}.`,
    ]);
  }

  private clear(): void {
    this.ctx.fillStyle = "#808080";
    this.ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
  }

  private text(lines: string[]): void {
    this.ctx.fillStyle = "#111";
    this.ctx.font = "16px sans-serif";
    this.ctx.textAlign = "center";
    const cx = this.canvas.width / 2;
    const cy = this.canvas.height / 2;
    lines.forEach((line, i) => this.ctx.fillText(line, cx, cy + 24 * i));
  }
}

export class FrameClock implements Clock {
  readonly frameMs: number;

  constructor(refreshHz = 60) {
    this.frameMs = 1000 / refreshHz;
  }

  now(): number {
    return performance.now();
  }

  nextFrame(): Promise<number> {
    return new Promise((resolve) => requestAnimationFrame(resolve));
  }
}

export class KeyboardInput implements InputSource {
  onKey(listener: (key: string, timeMs: number) => void): () => void {
    const handler = (event: KeyboardEvent) => {
      listener(event.key, performance.now());
    };
    window.addEventListener("keydown", handler);
    return () => window.removeEventListener("keydown", handler);
  }
}

export interface AttachOptions {
  serverUrl: string;
  sessionId: string;
  keys?: [string, string];
  refreshHz?: number;
}

/** Mount the runner on a full-window canvas and run the session. */
export function attachRunner(
  root: HTMLElement,
  opts: AttachOptions,
): Promise<SessionSummary> {
  const canvas = document.createElement("canvas");
  root.appendChild(canvas);
  return runSession({
    client: new SessionClient(opts.serverUrl),
    sessionId: opts.sessionId,
    display: new CanvasDisplay(canvas),
    clock: new FrameClock(opts.refreshHz ?? 60),
    input: new KeyboardInput(),
    keys: opts.keys,
  });
}
