/**
 * UI state machine for one tuning session.
 *
 * The server is the single source of truth: this class only tracks the
 * last documents it saw plus the user's unsaved draft edits.  All
 * gating happens server-side; a draft becomes real only when a PUT
 * commits and the new version comes back.
 */

import type { ClassCountsDoc, ThresholdDoc } from "./api.js";
import type { Viewport } from "./viewport.js";

export interface PendingUpdate {
  version: number;
  thresholds: Record<string, number>;
}

interface CommittedState {
  version: number;
  thresholds: Record<string, number>;
  counts: ClassCountsDoc | null;
}

export class TunerState {
  slideId: string | null = null;
  marker: string | null = null;
  viewport: Viewport | null = null;
  layer = "class-labels";

  serverVersion = -1;
  serverThresholds: Record<string, number> = {};
  /** Unsaved edits, keyed by marker; absent key = clean. */
  draft: Record<string, number> = {};
  lastCounts: ClassCountsDoc | null = null;
  conflictMessage: string | null = null;

  private undoStack: CommittedState[] = [];
  /** Set while a restore from beginUndo is awaiting its commit. */
  private suppressNextPush = false;

  selectSlide(slideId: string): void {
    this.slideId = slideId;
    this.marker = null;
    this.viewport = null;
    this.serverVersion = -1;
    this.serverThresholds = {};
    this.draft = {};
    this.lastCounts = null;
    this.conflictMessage = null;
    this.undoStack = [];
    this.suppressNextPush = false;
  }

  /** Adopt a freshly fetched thresholds document (initial load/reload). */
  applyThresholdDoc(doc: ThresholdDoc): void {
    this.serverVersion = doc.version;
    this.serverThresholds = { ...doc.thresholds };
  }

  /** Record a slider drag; dragging back to the saved value is clean. */
  dragValue(marker: string, value: number): void {
    // a fresh edit turns any pending restore into a normal draft
    this.suppressNextPush = false;
    if (this.serverThresholds[marker] === value) {
      delete this.draft[marker];
    } else {
      this.draft[marker] = value;
    }
  }

  isDirty(marker: string): boolean {
    return marker in this.draft;
  }

  dirtyMarkers(): string[] {
    return Object.keys(this.draft).sort();
  }

  /** Value the slider should show: draft if present, else saved. */
  displayedValue(marker: string): number | undefined {
    return this.draft[marker] ?? this.serverThresholds[marker];
  }

  /**
   * The PUT body for the current draft, based on the last version this
   * client saw — so the committed version can only be serverVersion + 1.
   */
  takeUpdate(): PendingUpdate | null {
    if (Object.keys(this.draft).length === 0) {
      return null;
    }
    return { version: this.serverVersion, thresholds: { ...this.draft } };
  }

  /**
   * A PUT committed: remember the old state for undo, adopt the new.
   * A commit that *is* an undo must not push, or repeated undos would
   * bounce between the last two states instead of walking back.
   */
  commitSucceeded(doc: ThresholdDoc): void {
    if (this.suppressNextPush) {
      this.suppressNextPush = false;
    } else {
      this.undoStack.push({
        version: this.serverVersion,
        thresholds: { ...this.serverThresholds },
        counts: this.lastCounts,
      });
    }
    this.applyThresholdDoc(doc);
    this.conflictMessage = null;
    for (const [marker, value] of Object.entries(this.draft)) {
      if (this.serverThresholds[marker] === value) {
        delete this.draft[marker];
      }
    }
  }

  /**
   * A PUT bounced with 409: another tuner moved the slide.  Adopt the
   * server's values, keep the draft on top so the user's drag is not
   * lost, and surface a banner message.
   */
  conflictReceived(serverDoc: ThresholdDoc, message: string): void {
    // a collided undo becomes a plain edit on top of the other tuner
    this.suppressNextPush = false;
    this.applyThresholdDoc(serverDoc);
    this.conflictMessage = message;
    for (const [marker, value] of Object.entries(this.draft)) {
      if (this.serverThresholds[marker] === value) {
        delete this.draft[marker];
      }
    }
  }

  clearConflict(): void {
    this.conflictMessage = null;
  }

  /** Stale count responses (older than what we show) are discarded. */
  applyCounts(doc: ClassCountsDoc): boolean {
    if (this.lastCounts !== null && doc.version < this.lastCounts.version) {
      return false;
    }
    this.lastCounts = doc;
    return true;
  }

  /** Counts newer than our thresholds mean another tuner committed. */
  countsAhead(): boolean {
    return this.lastCounts !== null && this.lastCounts.version > this.serverVersion;
  }

  canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  /**
   * Thresholds that restore the previous committed state.  The caller
   * sends them as a normal draft; determinism of server-side re-gating
   * guarantees the counts come back exactly as before.
   */
  beginUndo(): Record<string, number> | null {
    const target = this.undoStack.pop();
    if (target === undefined) {
      return null;
    }
    const restore: Record<string, number> = {};
    for (const [marker, value] of Object.entries(target.thresholds)) {
      if (this.serverThresholds[marker] !== value) {
        restore[marker] = value;
      }
    }
    this.draft = restore;
    this.suppressNextPush = Object.keys(restore).length > 0;
    return restore;
  }

  /** Sanity checks wired to a debug panel; empty list = healthy. */
  invariantViolations(): string[] {
    const problems: string[] = [];
    if (this.lastCounts !== null && this.slideId !== null &&
        this.lastCounts.slide_id !== this.slideId) {
      problems.push("counts belong to a different slide");
    }
    for (const marker of Object.keys(this.draft)) {
      if (!(marker in this.serverThresholds) && this.serverVersion >= 0) {
        problems.push(`draft for unknown marker ${marker}`);
      }
    }
    return problems;
  }
}
