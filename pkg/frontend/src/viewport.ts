/** Pan/zoom arithmetic for the overlay viewer, all in slide pixels. */

export interface Viewport {
  x: number;
  y: number;
  w: number;
  h: number;
}

export const MAX_SCALE = 8;
const MIN_VIEW = 16; // never zoom tighter than a 16-pixel window

export function fullView(slideW: number, slideH: number): Viewport {
  return { x: 0, y: 0, w: slideW, h: slideH };
}

/** Keep the viewport inside the slide without changing its size. */
export function clampViewport(vp: Viewport, slideW: number, slideH: number): Viewport {
  const w = Math.min(vp.w, slideW);
  const h = Math.min(vp.h, slideH);
  return {
    x: Math.min(Math.max(vp.x, 0), slideW - w),
    y: Math.min(Math.max(vp.y, 0), slideH - h),
    w,
    h,
  };
}

export function panBy(
  vp: Viewport,
  dx: number,
  dy: number,
  slideW: number,
  slideH: number,
): Viewport {
  return clampViewport({ ...vp, x: vp.x + dx, y: vp.y + dy }, slideW, slideH);
}

/**
 * Zoom by `factor` about the canvas point (px, py), keeping the slide
 * coordinate under the cursor fixed.  factor > 1 zooms in.
 */
export function zoomAt(
  vp: Viewport,
  factor: number,
  px: number,
  py: number,
  canvasW: number,
  canvasH: number,
  slideW: number,
  slideH: number,
): Viewport {
  const anchorX = vp.x + (px / canvasW) * vp.w;
  const anchorY = vp.y + (py / canvasH) * vp.h;
  const w = Math.min(slideW, Math.max(MIN_VIEW, vp.w / factor));
  const h = Math.min(slideH, Math.max(MIN_VIEW, vp.h / factor));
  return clampViewport(
    {
      x: anchorX - (px / canvasW) * w,
      y: anchorY - (py / canvasH) * h,
      w,
      h,
    },
    slideW,
    slideH,
  );
}

/** bbox query value for the overlay endpoint: integer x,y,w,h. */
export function bboxParam(vp: Viewport): string {
  const x = Math.floor(vp.x);
  const y = Math.floor(vp.y);
  const w = Math.max(1, Math.ceil(vp.x + vp.w) - x);
  const h = Math.max(1, Math.ceil(vp.y + vp.h) - y);
  return `${x},${y},${w},${h}`;
}

/** Tile scale so the viewport fills the canvas, capped at the server max. */
export function scaleFor(vp: Viewport, canvasW: number): number {
  if (vp.w <= 0) {
    return 1;
  }
  return Math.min(MAX_SCALE, canvasW / vp.w);
}
