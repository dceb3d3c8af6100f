// Trailing-edge debounce: rapid calls collapse into one invocation with the
// latest arguments after the quiet period. flush() fires a pending call
// immediately (used on drag release so exactly one final request goes out).

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  flush(): void;
  cancel(): void;
  pending(): boolean;
}

type Timers = {
  setTimeout(fn: () => void, ms: number): ReturnType<typeof setTimeout>;
  clearTimeout(id: ReturnType<typeof setTimeout>): void;
};

export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  waitMs: number,
  timers: Timers = globalThis,
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
    if (timer !== null) timers.clearTimeout(timer);
    timer = timers.setTimeout(fire, waitMs);
  };
  wrapped.flush = () => {
    if (timer !== null) {
      timers.clearTimeout(timer);
      fire();
    }
  };
  wrapped.cancel = () => {
    if (timer !== null) timers.clearTimeout(timer);
    timer = null;
    lastArgs = null;
  };
  wrapped.pending = () => timer !== null;
  return wrapped;
}
