/** Latest-wins frame requester.
 *
 * At most one render request is in flight; newer camera states overwrite the
 * pending one instead of queueing, so the request count can never exceed the
 * response count by more than one no matter how fast the user drags. After a
 * failure, attempts back off exponentially until one succeeds.
 */

import { buildRenderQuery, type RenderParams } from "./api";

export interface StreamHooks {
  onFrame(blob: Blob, latencyMs: number): void;
  onError(error: Error): void;
  /** Clock override for tests; defaults to performance.now. */
  now?(): number;
  /** Sleep override for tests; defaults to setTimeout. */
  wait?(ms: number): Promise<void>;
}

export const BACKOFF_BASE_MS = 250;
export const BACKOFF_MAX_MS = 4000;

const sleep = (ms: number): Promise<void> =>
  new Promise((resolve) => setTimeout(resolve, ms));

export class FrameStream {
  private pending: RenderParams | null = null;
  private lastParams: RenderParams | null = null;
  private inFlight = false;
  private errorStreak = 0;
  private sent = 0;
  private answered = 0;

  constructor(private readonly fetchFrame: (query: string) => Promise<Blob>,
              private readonly hooks: StreamHooks) {}

  get requestCount(): number {
    return this.sent;
  }

  get responseCount(): number {
    return this.answered;
  }

  /** Ask for a frame; supersedes any not-yet-started request. */
  request(params: RenderParams): void {
    this.pending = params;
    void this.pump();
  }

  /** Re-issue the last parameters, skipping the backoff delay. */
  retry(): void {
    if (this.lastParams !== null && this.pending === null) {
      this.errorStreak = 0;
      this.request(this.lastParams);
    }
  }

  private async pump(): Promise<void> {
    if (this.inFlight || this.pending === null) {
      return;
    }
    this.inFlight = true;
    try {
      while (this.pending !== null) {
        if (this.errorStreak > 0) {
          const wait = this.hooks.wait ?? sleep;
          const ms = Math.min(BACKOFF_BASE_MS * 2 ** (this.errorStreak - 1),
                              BACKOFF_MAX_MS);
          await wait(ms);
        }
        const params = this.pending;
        this.pending = null;
        this.lastParams = params;
        this.sent += 1;
        const now = this.hooks.now ?? (() => performance.now());
        const started = now();
        try {
          const blob = await this.fetchFrame(buildRenderQuery(params));
          this.answered += 1;
          this.errorStreak = 0;
          this.hooks.onFrame(blob, now() - started);
        } catch (error) {
          this.answered += 1;
          this.errorStreak += 1;
          this.hooks.onError(
            error instanceof Error ? error : new Error(String(error)));
        }
      }
    } finally {
      this.inFlight = false;
    }
  }
}
