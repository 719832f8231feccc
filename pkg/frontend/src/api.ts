/** Typed client for the annotation session API. */

export interface HistoryRow {
  iteration: number;
  bits: number;
  map_at_5: number;
  labeled_pairs: number;
  transitive_pairs: number;
}

export interface SessionView {
  iteration: number;
  bits_spent: number;
  budget_bits: number;
  pending_count: number;
  answered_count: number;
  phase: string;
  error: string | null;
  strategy: string;
  seed: number;
  history: HistoryRow[];
}

export interface ImageView {
  id: number;
  features: number[];
  asset_uri?: string;
}

export interface QueryItem {
  pair_id: string;
  image_a: ImageView;
  image_b: ImageView;
}

export interface QueriesView {
  queries: QueryItem[];
  active: boolean;
}

/** The only two labels this client is able to emit. */
export type LabelChoice = "similar" | "dissimilar";
export const LABEL_CHOICES: readonly LabelChoice[] = ["similar", "dissimilar"];

export type SubmitStatus = "accepted" | "conflict" | "not_found" | "invalid";

export interface SubmitReport {
  results: { pair_id: string; status: SubmitStatus }[];
  accepted: number;
  rejected: number;
}

export class ApiClient {
  constructor(private readonly baseUrl: string = "") {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await fetch(this.baseUrl + path);
    if (!response.ok) {
      throw new Error(`GET ${path} failed: ${response.status}`);
    }
    return (await response.json()) as T;
  }

  session(): Promise<SessionView> {
    return this.getJson<SessionView>("/api/session");
  }

  queries(limit: number): Promise<QueriesView> {
    return this.getJson<QueriesView>(`/api/queries?limit=${limit}`);
  }

  async submitLabels(
    labels: { pair_id: string; label: LabelChoice }[],
  ): Promise<SubmitReport> {
    for (const item of labels) {
      if (!LABEL_CHOICES.includes(item.label)) {
        throw new Error(`refusing to send invalid label ${item.label}`);
      }
    }
    const response = await fetch(this.baseUrl + "/api/labels", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(labels),
    });
    if (!response.ok) {
      throw new Error(`POST /api/labels failed: ${response.status}`);
    }
    return (await response.json()) as SubmitReport;
  }
}
