import { describe, expect, it } from "vitest";

import { centerImage, fixationForPlacement } from "../src/geometry.js";

describe("centerImage", () => {
  it("centers a small image in a larger viewport", () => {
    const p = centerImage({ width: 800, height: 600 }, 512, 512);
    expect(p).toEqual({ x: 144, y: 44, width: 512, height: 512 });
  });

  it("clamps to the origin when the image exceeds the viewport", () => {
    const p = centerImage({ width: 400, height: 300 }, 512, 512);
    expect(p.x).toBe(0);
    expect(p.y).toBe(0);
  });

  it("recenters when the viewport changes size", () => {
    const before = centerImage({ width: 800, height: 600 }, 200, 200);
    const after = centerImage({ width: 1000, height: 700 }, 200, 200);
    expect(after.x - before.x).toBe(100);
    expect(after.y - before.y).toBe(50);
  });
});

describe("fixationForPlacement", () => {
  it("pins the dot to the image center", () => {
    const p = centerImage({ width: 800, height: 600 }, 512, 512);
    const dot = fixationForPlacement(p, 5);
    expect(dot).toEqual({ cx: 400, cy: 300, radius: 5 });
  });

  it("stays at the image center across a resize", () => {
    const small = fixationForPlacement(
      centerImage({ width: 800, height: 600 }, 256, 256),
    );
    const wide = fixationForPlacement(
      centerImage({ width: 1600, height: 600 }, 256, 256),
    );
    // viewport center moved; the dot tracks the recentered image
    expect(small.cx).toBe(400);
    expect(wide.cx).toBe(800);
    expect(small.cy).toBe(wide.cy);
  });
});
