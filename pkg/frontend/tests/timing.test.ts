import { describe, expect, it } from "vitest";

import { framesFor, presentForFrames } from "../src/timing.js";
import { FakeClock } from "./fakes.js";

describe("framesFor", () => {
  it("maps 500 ms at 60 Hz to 30 frames", () => {
    expect(framesFor(500, 1000 / 60)).toBe(30);
  });

  it("maps 0 ms to zero frames so segments run back-to-back", () => {
    expect(framesFor(0, 1000 / 60)).toBe(0);
  });

  it("shows at least one frame for any positive duration", () => {
    expect(framesFor(1, 1000 / 60)).toBe(1);
  });
});

describe("presentForFrames", () => {
  it("draws exactly the requested frames and holds 500 ms to one frame", async () => {
    const clock = new FakeClock();
    const drawn: number[] = [];
    const stats = await presentForFrames((f) => drawn.push(f), 30, clock);
    expect(drawn).toEqual(Array.from({ length: 30 }, (_, i) => i));
    expect(stats.frames).toBe(30);
    // last frame stays visible one period beyond its callback
    const displayedMs = stats.elapsedMs + clock.frameMs;
    expect(Math.abs(displayedMs - 500)).toBeLessThanOrEqual(clock.frameMs);
    expect(stats.overrunFrames).toBe(0);
  });

  it("keeps the frame count and reports a missed vsync as an overrun", async () => {
    const clock = new FakeClock();
    clock.missVsyncAt(10);
    const drawn: number[] = [];
    const stats = await presentForFrames((f) => drawn.push(f), 30, clock);
    expect(drawn.length).toBe(30);
    expect(stats.overrunFrames).toBe(1);
  });

  it("zero frames returns immediately without touching the clock", async () => {
    const clock = new FakeClock();
    const before = clock.now();
    const stats = await presentForFrames(() => {
      throw new Error("must not draw");
    }, 0, clock);
    expect(stats.frames).toBe(0);
    expect(clock.now()).toBe(before);
  });

  it("back-to-back segments leave no gap when the blank is zero frames", async () => {
    const clock = new FakeClock();
    const first = await presentForFrames(() => {}, 3, clock);
    await presentForFrames(() => {}, 0, clock);
    const second = await presentForFrames(() => {}, 3, clock);
    const firstEnd = first.onsetMs + 3 * clock.frameMs;
    expect(second.onsetMs).toBeCloseTo(firstEnd, 6);
  });
});
