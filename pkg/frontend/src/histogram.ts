/**
 * Geometry for the per-marker histogram of nucleus mean intensities.
 *
 * The histogram shows the same statistic the gate thresholds act on,
 * so dragging the threshold line moves through actual nucleus means.
 */

export interface Bar {
  x: number;
  y: number;
  w: number;
  h: number;
}

/** Bars scaled so the tallest bin fills the plot height. */
export function bars(counts: readonly number[], width: number, height: number): Bar[] {
  const n = counts.length;
  if (n === 0) {
    return [];
  }
  const peak = Math.max(...counts, 1);
  const barWidth = width / n;
  return counts.map((count, i) => {
    const h = (count / peak) * height;
    return { x: i * barWidth, y: height - h, w: barWidth, h };
  });
}

/** Pixel x of an intensity value on the histogram's edge scale. */
export function valueToX(
  value: number,
  edges: readonly number[],
  width: number,
): number {
  const lo = edges[0];
  const hi = edges[edges.length - 1];
  if (hi <= lo) {
    return 0;
  }
  const frac = (value - lo) / (hi - lo);
  return Math.min(width, Math.max(0, frac * width));
}

/** Intensity value at a pixel x — inverse of valueToX inside the plot. */
export function xToValue(
  x: number,
  edges: readonly number[],
  width: number,
): number {
  const lo = edges[0];
  const hi = edges[edges.length - 1];
  if (width <= 0) {
    return lo;
  }
  const frac = Math.min(1, Math.max(0, x / width));
  return lo + frac * (hi - lo);
}
