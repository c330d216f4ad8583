/**
 * The tuning loop, DOM-free: load a slide, push drafts, absorb
 * conflicts, undo.  main.ts renders around these calls; tests drive
 * them directly against a stand-in server.
 */

import type { ApiClient, SlideDetail } from "./api.js";
import type { TunerState } from "./state.js";

export type SaveResult =
  /** Nothing to send. */
  | { kind: "clean" }
  /** Draft committed; counts refreshed. */
  | { kind: "saved" }
  /** 409: server values adopted, draft kept on top — save again. */
  | { kind: "rebased"; message: string }
  /** 422: the server refused the update. */
  | { kind: "rejected"; message: string }
  /** Network failure: nothing lost, draft still flagged unsaved. */
  | { kind: "offline"; message: string };

/**
 * Fetch fresh class counts and show them unless they are stale.
 * Counts *newer* than our thresholds mean another tuner committed, so
 * adopt their values (our draft stays on top).
 */
export async function refreshCounts(state: TunerState, api: ApiClient): Promise<boolean> {
  if (state.slideId === null) {
    return false;
  }
  const slideId = state.slideId;
  const doc = await api.classCounts(slideId);
  if (state.slideId !== slideId) {
    return false;
  }
  const applied = state.applyCounts(doc);
  if (state.countsAhead()) {
    const current = await api.thresholds(slideId);
    if (state.slideId === slideId && current.version > state.serverVersion) {
      state.conflictReceived(current, "Slide was updated by another tuner.");
    }
  }
  return applied;
}

/** Send the current draft; on success the committed state becomes undoable. */
export async function saveDraft(state: TunerState, api: ApiClient): Promise<SaveResult> {
  const update = state.takeUpdate();
  if (update === null || state.slideId === null) {
    return { kind: "clean" };
  }
  const slideId = state.slideId;
  try {
    const result = await api.putThresholds(slideId, update.version, update.thresholds);
    if (state.slideId !== slideId) {
      return { kind: "clean" }; // user switched slides mid-flight
    }
    if (result.kind === "ok") {
      state.commitSucceeded(result.doc);
      await refreshCounts(state, api);
      return { kind: "saved" };
    }
    if (result.kind === "conflict") {
      const current = await api.thresholds(slideId);
      state.conflictReceived(
        current,
        "Another tuner changed this slide; your edit sits on top of their values.",
      );
      await refreshCounts(state, api);
      return { kind: "rebased", message: result.message };
    }
    return { kind: "rejected", message: result.message };
  } catch (err) {
    return { kind: "offline", message: String(err) };
  }
}

/**
 * Revert to the previous committed state.  Re-gating is deterministic,
 * so once the restore commits the counts match the prior response
 * exactly.  Returns null when there is nothing to undo.
 */
export async function undoLast(state: TunerState, api: ApiClient): Promise<SaveResult | null> {
  const restore = state.beginUndo();
  if (restore === null) {
    return null;
  }
  if (Object.keys(restore).length === 0) {
    return { kind: "clean" }; // already at the target values
  }
  return saveDraft(state, api);
}

/** Reset state for a slide and pull its documents. */
export async function openSlide(
  state: TunerState,
  api: ApiClient,
  slideId: string,
): Promise<SlideDetail | null> {
  state.selectSlide(slideId);
  const detail = await api.slideDetail(slideId);
  const thresholds = await api.thresholds(slideId);
  if (state.slideId !== slideId) {
    return null;
  }
  state.applyThresholdDoc(thresholds);
  state.marker = detail.markers[0] ?? null;
  await refreshCounts(state, api);
  return detail;
}
