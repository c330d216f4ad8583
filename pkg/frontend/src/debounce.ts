/** Trailing-edge debounce so threshold drags coalesce into one PUT. */

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  /** Run a pending call immediately. */
  flush(): void;
  /** Drop a pending call without running it. */
  cancel(): void;
  pending(): boolean;
}

export const DEFAULT_DEBOUNCE_MS = 150;

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number = DEFAULT_DEBOUNCE_MS,
): Debounced<A> {
  let timer: ReturnType<typeof setTimeout> | null = null;
  let lastArgs: A | null = null;

  const fire = () => {
    timer = null;
    if (lastArgs !== null) {
      const args = lastArgs;
      lastArgs = null;
      fn(...args);
    }
  };

  const wrapped = (...args: A) => {
    lastArgs = args;
    if (timer !== null) {
      clearTimeout(timer);
    }
    timer = setTimeout(fire, waitMs);
  };

  wrapped.flush = () => {
    if (timer !== null) {
      clearTimeout(timer);
      fire();
    }
  };
  wrapped.cancel = () => {
    if (timer !== null) {
      clearTimeout(timer);
      timer = null;
    }
    lastArgs = null;
  };
  wrapped.pending = () => timer !== null;
  return wrapped;
}
