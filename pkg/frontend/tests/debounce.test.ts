/** Trailing-edge debounce used to coalesce slider drags into one PUT. */

import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { DEFAULT_DEBOUNCE_MS, debounce } from "../src/debounce.js";

beforeEach(() => {
  vi.useFakeTimers();
});

afterEach(() => {
  vi.useRealTimers();
});

describe("debounce", () => {
  it("fires once with the last arguments of a burst", () => {
    const calls: number[] = [];
    const run = debounce((v: number) => calls.push(v), 150);
    run(1);
    vi.advanceTimersByTime(50);
    run(2);
    vi.advanceTimersByTime(50);
    run(3);
    expect(calls).toEqual([]);
    vi.advanceTimersByTime(150);
    expect(calls).toEqual([3]);
  });

  it("waits the default 150 ms, not less", () => {
    const fn = vi.fn();
    const run = debounce(fn);
    expect(DEFAULT_DEBOUNCE_MS).toBe(150);
    run();
    vi.advanceTimersByTime(149);
    expect(fn).not.toHaveBeenCalled();
    vi.advanceTimersByTime(1);
    expect(fn).toHaveBeenCalledTimes(1);
  });

  it("fires separately for separate bursts", () => {
    const calls: string[] = [];
    const run = debounce((v: string) => calls.push(v), 100);
    run("a");
    vi.advanceTimersByTime(100);
    run("b");
    vi.advanceTimersByTime(100);
    expect(calls).toEqual(["a", "b"]);
  });

  it("flush runs a pending call immediately and only once", () => {
    const fn = vi.fn();
    const run = debounce(fn, 150);
    run(7);
    run.flush();
    expect(fn).toHaveBeenCalledTimes(1);
    expect(fn).toHaveBeenCalledWith(7);
    vi.advanceTimersByTime(500);
    expect(fn).toHaveBeenCalledTimes(1);
  });

  it("flush without a pending call does nothing", () => {
    const fn = vi.fn();
    const run = debounce(fn, 150);
    run.flush();
    expect(fn).not.toHaveBeenCalled();
  });

  it("cancel drops the pending call", () => {
    const fn = vi.fn();
    const run = debounce(fn, 150);
    run();
    run.cancel();
    vi.advanceTimersByTime(500);
    expect(fn).not.toHaveBeenCalled();
  });

  it("pending reflects whether a call is waiting", () => {
    const run = debounce(() => {}, 150);
    expect(run.pending()).toBe(false);
    run();
    expect(run.pending()).toBe(true);
    vi.advanceTimersByTime(150);
    expect(run.pending()).toBe(false);
  });

  it("keeps working after flush and cancel", () => {
    const fn = vi.fn();
    const run = debounce(fn, 150);
    run(1);
    run.cancel();
    run(2);
    run.flush();
    run(3);
    vi.advanceTimersByTime(150);
    expect(fn.mock.calls).toEqual([[2], [3]]);
  });
});
