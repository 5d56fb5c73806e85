/** Trailing-edge debouncer plus sequence-numbered stale-response dropping.
 *
 * Slider drags fire continuously; we coalesce them so at most one request is
 * in flight per settle window, and a response is applied only if no newer
 * request superseded it.
 */

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  cancel(): void;
  flush(): void;
}

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
): Debounced<A> {
  let timer: ReturnType<typeof setTimeout> | null = null;
  let lastArgs: A | null = null;

  const wrapped = (...args: A) => {
    lastArgs = args;
    if (timer !== null) clearTimeout(timer);
    timer = setTimeout(() => {
      timer = null;
      if (lastArgs) fn(...lastArgs);
      lastArgs = null;
    }, waitMs);
  };
  wrapped.cancel = () => {
    if (timer !== null) clearTimeout(timer);
    timer = null;
    lastArgs = null;
  };
  wrapped.flush = () => {
    if (timer !== null) {
      clearTimeout(timer);
      timer = null;
      if (lastArgs) fn(...lastArgs);
      lastArgs = null;
    }
  };
  return wrapped;
}

/** Applies the callback only for the newest dispatched request. */
export class LatestOnly<T> {
  private seq = 0;

  async dispatch(fired: Promise<T>, apply: (value: T) => void, onError?: (err: unknown) => void) {
    const ticket = ++this.seq;
    try {
      const value = await fired;
      if (ticket === this.seq) apply(value);
    } catch (err) {
      if (ticket === this.seq && onError) onError(err);
    }
  }

  invalidate(): void {
    this.seq++;
  }
}
