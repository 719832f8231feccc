/** Application wiring: status polling, the card queue with optimistic
 * advance, keyboard shortcuts, and submission through the dedupe queue. */

import { ApiClient, LabelChoice, QueryItem, SessionView } from "./api.js";
import { LabelSubmitter, SubmitterOptions } from "./state.js";
import { renderDashboard, renderPairCard } from "./ui.js";

export interface AppOptions {
  pollIntervalMs?: number;
  queryBatch?: number;
  submitter?: SubmitterOptions;
}

export class AnnotationApp {
  readonly api: ApiClient;
  readonly submitter: LabelSubmitter;
  private readonly doc: Document;
  private readonly cardHost: HTMLElement;
  private readonly dashboard: HTMLElement;
  private queue: QueryItem[] = [];
  private current: QueryItem | null = null;
  private lastView: SessionView | null = null;
  private stale = false;
  private timer: ReturnType<typeof setInterval> | null = null;
  private readonly pollIntervalMs: number;
  private readonly queryBatch: number;
  private keyHandler: ((event: KeyboardEvent) => void) | null = null;

  constructor(root: HTMLElement, api: ApiClient, options: AppOptions = {}) {
    this.api = api;
    this.doc = root.ownerDocument;
    this.submitter = new LabelSubmitter(api, options.submitter);
    this.pollIntervalMs = options.pollIntervalMs ?? 2000;
    this.queryBatch = options.queryBatch ?? 8;
    const cardHost = root.querySelector("[data-role=card-host]");
    const dashboard = root.querySelector("[data-role=dashboard]");
    if (!cardHost || !dashboard) {
      throw new Error("root element is missing card host or dashboard");
    }
    this.cardHost = cardHost as HTMLElement;
    this.dashboard = dashboard as HTMLElement;
  }

  /** Start polling and keyboard handling. */
  start(): void {
    this.keyHandler = (event: KeyboardEvent) => {
      if (event.key === "y") this.choose("similar");
      if (event.key === "n") this.choose("dissimilar");
    };
    this.doc.addEventListener("keydown", this.keyHandler);
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), this.pollIntervalMs);
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    if (this.keyHandler) this.doc.removeEventListener("keydown", this.keyHandler);
    this.timer = null;
    this.keyHandler = null;
  }

  view(): SessionView | null {
    return this.lastView;
  }

  currentPairId(): string | null {
    return this.current ? this.current.pair_id : null;
  }

  /** One poll round: session status plus a queue top-up. */
  async refresh(): Promise<void> {
    try {
      const view = await this.api.session();
      this.lastView = view;
      this.stale = false;
      if (view.pending_count > 0 && !this.current && !this.queue.length) {
        const queries = await this.api.queries(this.queryBatch);
        this.queue = queries.queries.filter(
          (q) => !this.submitter.has(q.pair_id));
      }
    } catch {
      this.stale = true; // keep the last snapshot on screen
    }
    if (this.lastView) {
      renderDashboard(this.dashboard, this.lastView, this.stale);
    }
    if (!this.current) {
      this.showNextCard();
    }
  }

  private showNextCard(): void {
    this.current = null;
    while (this.queue.length) {
      const item = this.queue.shift() as QueryItem;
      if (this.submitter.has(item.pair_id)) continue;
      this.current = item;
      break;
    }
    this.cardHost.textContent = "";
    if (this.current) {
      this.cardHost.appendChild(renderPairCard(
        this.doc, this.current,
        (pairId, choice) => void this.submit(pairId, choice)));
    } else {
      const idle = this.doc.createElement("p");
      idle.className = "idle-note";
      const phase = this.lastView ? this.lastView.phase : "starting";
      idle.textContent = phase === "done"
        ? "Session complete."
        : "No pair waiting - the model is retraining or selecting.";
      this.cardHost.appendChild(idle);
    }
  }

  /** Label the card currently on screen. */
  choose(choice: LabelChoice): void {
    if (this.current) {
      void this.submit(this.current.pair_id, choice);
    }
  }

  private async submit(pairId: string, choice: LabelChoice): Promise<void> {
    if (this.current && this.current.pair_id === pairId) {
      // optimistic advance; duplicates are filtered by the submitter
      this.showNextCard();
    }
    const outcome = await this.submitter.submit(pairId, choice);
    if (outcome === "conflict") {
      // someone answered first; nothing to re-post
      return;
    }
    if (outcome === "failed") {
      // redelivery on the next poll: put the pair back in front
      void this.refresh();
    }
  }
}

export function createApp(root: HTMLElement, api: ApiClient,
                          options: AppOptions = {}): AnnotationApp {
  return new AnnotationApp(root, api, options);
}

declare global {
  interface Window {
    annealApp?: AnnotationApp;
  }
}

/* Auto-boot in a real browser page (skipped under tests). */
if (typeof document !== "undefined" && document.getElementById("app-root")) {
  const root = document.getElementById("app-root") as HTMLElement;
  const app = createApp(root, new ApiClient(""));
  window.annealApp = app;
  app.start();
}
