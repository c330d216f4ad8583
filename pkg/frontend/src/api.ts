/**
 * Typed client for the tuning service.  Every number shown in the UI
 * comes through here; the browser never gates nuclei itself.
 */

export interface SlideSummary {
  slide_id: string;
  patient_id: string;
  site: string;
  disease: string;
  microns_per_pixel: number;
  nucleus_count: number;
  version: number;
}

export interface SlideDetail extends SlideSummary {
  markers: string[];
  has_images: boolean;
  width: number | null;
  height: number | null;
}

export interface HistogramDoc {
  slide_id: string;
  marker: string;
  bins: number;
  counts: number[];
  edges: number[];
  min: number;
  max: number;
  threshold: number | null;
  version: number;
}

export interface ThresholdDoc {
  slide_id: string;
  version: number;
  thresholds: Record<string, number>;
}

export interface ClassCountsDoc {
  slide_id: string;
  version: number;
  counts: Record<string, number>;
}

export interface NucleusRow {
  nucleus_id: number;
  cx: number;
  cy: number;
  area: number;
  gate_bits_hex: string;
  outcome: "assigned" | "excluded" | "unassigned";
  class: string | null;
  step: number | null;
}

export type PutThresholdsResult =
  | { kind: "ok"; doc: ThresholdDoc }
  | { kind: "conflict"; message: string }
  | { kind: "invalid"; message: string };

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchFn(this.base + path);
    if (!response.ok) {
      throw new ApiError(response.status, await response.text());
    }
    return (await response.json()) as T;
  }

  listSlides(): Promise<SlideSummary[]> {
    return this.getJson("/api/slides");
  }

  slideDetail(slideId: string): Promise<SlideDetail> {
    return this.getJson(`/api/slides/${encodeURIComponent(slideId)}`);
  }

  histogram(slideId: string, marker: string, bins = 64): Promise<HistogramDoc> {
    return this.getJson(
      `/api/slides/${encodeURIComponent(slideId)}/channels/` +
        `${encodeURIComponent(marker)}/histogram?bins=${bins}`,
    );
  }

  thresholds(slideId: string): Promise<ThresholdDoc> {
    return this.getJson(`/api/slides/${encodeURIComponent(slideId)}/thresholds`);
  }

  classCounts(slideId: string): Promise<ClassCountsDoc> {
    return this.getJson(`/api/slides/${encodeURIComponent(slideId)}/classes`);
  }

  nuclei(slideId: string, bbox?: string): Promise<{ nuclei: NucleusRow[] }> {
    const query = bbox ? `?bbox=${encodeURIComponent(bbox)}` : "";
    return this.getJson(`/api/slides/${encodeURIComponent(slideId)}/nuclei${query}`);
  }

  async rulesText(): Promise<string> {
    const response = await this.fetchFn(`${this.base}/api/rules`);
    if (!response.ok) {
      throw new ApiError(response.status, await response.text());
    }
    return response.text();
  }

  /**
   * Optimistic-concurrency threshold update.  409 (another tuner moved
   * the slide) and 422 (bad marker names) come back as values so the
   * caller can merge or report without a try/catch ladder.
   */
  async putThresholds(
    slideId: string,
    version: number,
    updates: Record<string, number>,
  ): Promise<PutThresholdsResult> {
    const response = await this.fetchFn(
      `${this.base}/api/slides/${encodeURIComponent(slideId)}/thresholds`,
      {
        method: "PUT",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ version, thresholds: updates }),
      },
    );
    if (response.status === 409) {
      return { kind: "conflict", message: await response.text() };
    }
    if (response.status === 422) {
      return { kind: "invalid", message: await response.text() };
    }
    if (!response.ok) {
      throw new ApiError(response.status, await response.text());
    }
    return { kind: "ok", doc: (await response.json()) as ThresholdDoc };
  }

  /** URL for one overlay tile; the browser fetches it as an <img>. */
  overlayUrl(slideId: string, layer: string, bbox?: string, scale?: number): string {
    const params = new URLSearchParams({ layer });
    if (bbox !== undefined) {
      params.set("bbox", bbox);
    }
    if (scale !== undefined) {
      params.set("scale", String(scale));
    }
    return (
      `${this.base}/api/slides/${encodeURIComponent(slideId)}/overlay?` +
      params.toString()
    );
  }
}
