/** Pan/zoom arithmetic for the overlay viewer. */

import { describe, expect, it } from "vitest";

import {
  MAX_SCALE, bboxParam, clampViewport, fullView, panBy, scaleFor, zoomAt,
} from "../src/viewport.js";

const SLIDE_W = 1000;
const SLIDE_H = 800;

describe("clamping", () => {
  it("keeps an inside viewport unchanged", () => {
    const vp = { x: 100, y: 50, w: 200, h: 160 };
    expect(clampViewport(vp, SLIDE_W, SLIDE_H)).toEqual(vp);
  });

  it("pushes an out-of-range origin back inside", () => {
    expect(clampViewport({ x: -30, y: -5, w: 200, h: 160 }, SLIDE_W, SLIDE_H))
      .toEqual({ x: 0, y: 0, w: 200, h: 160 });
    expect(clampViewport({ x: 950, y: 790, w: 200, h: 160 }, SLIDE_W, SLIDE_H))
      .toEqual({ x: 800, y: 640, w: 200, h: 160 });
  });

  it("shrinks a viewport larger than the slide", () => {
    expect(clampViewport({ x: 0, y: 0, w: 5000, h: 5000 }, SLIDE_W, SLIDE_H))
      .toEqual({ x: 0, y: 0, w: SLIDE_W, h: SLIDE_H });
  });

  it("panning stops at the slide edge", () => {
    const vp = { x: 700, y: 0, w: 200, h: 160 };
    expect(panBy(vp, 500, -50, SLIDE_W, SLIDE_H))
      .toEqual({ x: 800, y: 0, w: 200, h: 160 });
  });
});

describe("zoom", () => {
  const canvas = { w: 500, h: 400 };

  it("keeps the slide point under the cursor fixed", () => {
    const vp = { x: 100, y: 100, w: 400, h: 320 };
    const px = 125;
    const py = 300;
    const anchorX = vp.x + (px / canvas.w) * vp.w;
    const anchorY = vp.y + (py / canvas.h) * vp.h;
    const zoomed = zoomAt(vp, 2, px, py, canvas.w, canvas.h, SLIDE_W, SLIDE_H);
    expect(zoomed.w).toBeCloseTo(200, 9);
    expect(zoomed.x + (px / canvas.w) * zoomed.w).toBeCloseTo(anchorX, 9);
    expect(zoomed.y + (py / canvas.h) * zoomed.h).toBeCloseTo(anchorY, 9);
  });

  it("zooming out never leaves the slide", () => {
    let vp = { x: 400, y: 300, w: 100, h: 80 };
    for (let i = 0; i < 12; i += 1) {
      vp = zoomAt(vp, 0.5, 250, 200, canvas.w, canvas.h, SLIDE_W, SLIDE_H);
      expect(vp.x).toBeGreaterThanOrEqual(0);
      expect(vp.y).toBeGreaterThanOrEqual(0);
      expect(vp.x + vp.w).toBeLessThanOrEqual(SLIDE_W + 1e-9);
      expect(vp.y + vp.h).toBeLessThanOrEqual(SLIDE_H + 1e-9);
    }
    expect(vp.w).toBe(SLIDE_W);
    expect(vp.h).toBe(SLIDE_H);
  });

  it("zooming in bottoms out at a 16-pixel window", () => {
    let vp = fullView(SLIDE_W, SLIDE_H);
    for (let i = 0; i < 30; i += 1) {
      vp = zoomAt(vp, 4, 250, 200, canvas.w, canvas.h, SLIDE_W, SLIDE_H);
    }
    expect(vp.w).toBe(16);
    expect(vp.h).toBe(16);
  });
});

describe("tile parameters", () => {
  it("bboxParam floors the origin and covers the far edge", () => {
    expect(bboxParam({ x: 10.3, y: 2.7, w: 5.1, h: 3.2 })).toBe("10,2,6,4");
    expect(bboxParam({ x: 0, y: 0, w: 140, h: 140 })).toBe("0,0,140,140");
  });

  it("bboxParam never collapses below one pixel", () => {
    expect(bboxParam({ x: 5, y: 5, w: 0.2, h: 0.01 })).toBe("5,5,1,1");
  });

  it("scaleFor fills the canvas but respects the server cap", () => {
    expect(scaleFor({ x: 0, y: 0, w: 200, h: 160 }, 400)).toBe(2);
    expect(scaleFor({ x: 0, y: 0, w: 16, h: 16 }, 400)).toBe(MAX_SCALE);
    expect(scaleFor({ x: 0, y: 0, w: 0, h: 0 }, 400)).toBe(1);
  });
});
