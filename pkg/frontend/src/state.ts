/** Label submission queue: one attempt per pair, retries on network
 * failure with backoff, and exact dedupe so a double-click can never send
 * a second request for the same pair. */

import { ApiClient, LabelChoice, SubmitStatus } from "./api.js";

export type SubmitOutcome = SubmitStatus | "duplicate" | "failed";

export interface SubmitterOptions {
  retries?: number;
  backoffMs?: number;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export class LabelSubmitter {
  private readonly attempted = new Set<string>();
  private readonly retries: number;
  private readonly backoffMs: number;
  private readonly sleep: (ms: number) => Promise<void>;

  constructor(
    private readonly api: ApiClient,
    options: SubmitterOptions = {},
  ) {
    this.retries = options.retries ?? 5;
    this.backoffMs = options.backoffMs ?? 500;
    this.sleep = options.sleep ?? defaultSleep;
  }

  /** True when this pair was already handed to submit(). */
  has(pairId: string): boolean {
    return this.attempted.has(pairId);
  }

  /**
   * Deliver one label. The first call per pair wins locally; later calls
   * return "duplicate" without any network traffic. Network failures retry
   * with linear backoff, so an offline-then-online label is delivered
   * exactly once.
   */
  async submit(pairId: string, choice: LabelChoice): Promise<SubmitOutcome> {
    if (this.attempted.has(pairId)) {
      return "duplicate";
    }
    this.attempted.add(pairId);
    for (let attempt = 0; ; attempt++) {
      try {
        const report = await this.api.submitLabels([
          { pair_id: pairId, label: choice },
        ]);
        return report.results[0]?.status ?? "failed";
      } catch {
        if (attempt >= this.retries) {
          // allow a manual retry later: the label was never acknowledged
          this.attempted.delete(pairId);
          return "failed";
        }
        await this.sleep(this.backoffMs * (attempt + 1));
      }
    }
  }
}
