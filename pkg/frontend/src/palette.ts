/**
 * Legend colors matching the tints the service bakes into overlay tiles.
 *
 * Counts and class membership always come from the service; these
 * constants exist only so legend swatches match the rendered pixels.
 */

export type Rgb = readonly [number, number, number];

export const CLASS_PALETTE: readonly Rgb[] = [
  [31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40],
  [148, 103, 189], [140, 86, 75], [227, 119, 194], [127, 127, 127],
  [188, 189, 34], [23, 190, 207], [174, 199, 232], [255, 187, 120],
  [152, 223, 138], [255, 152, 150],
];

export const EXCLUDED_TINT: Rgb = [60, 60, 60];
export const UNASSIGNED_TINT: Rgb = [200, 200, 200];
export const GATE_POSITIVE_TINT: Rgb = [0, 200, 0];
export const GATE_NEGATIVE_TINT: Rgb = [120, 120, 120];

export function cssColor(rgb: Rgb): string {
  return `rgb(${rgb[0]}, ${rgb[1]}, ${rgb[2]})`;
}

export interface LegendEntry {
  name: string;
  color: string;
  count: number;
}

/**
 * Legend rows for the class layer: the classes in server order followed
 * by the excluded and unassigned buckets.  `counts` is the service's
 * class-count response verbatim.
 */
export function legendEntries(
  classNames: readonly string[],
  counts: Record<string, number>,
): LegendEntry[] {
  const rows: LegendEntry[] = classNames.map((name, i) => ({
    name,
    color: cssColor(CLASS_PALETTE[i % CLASS_PALETTE.length]),
    count: counts[name] ?? 0,
  }));
  rows.push({
    name: "excluded",
    color: cssColor(EXCLUDED_TINT),
    count: counts["excluded"] ?? 0,
  });
  rows.push({
    name: "unassigned",
    color: cssColor(UNASSIGNED_TINT),
    count: counts["unassigned"] ?? 0,
  });
  return rows;
}
