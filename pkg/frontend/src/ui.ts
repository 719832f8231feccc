/** DOM building blocks: the pair card with its two actions and the live
 * progress dashboard. All displayed numbers come straight from the latest
 * server payload; the client never does its own bit accounting. */

import { LabelChoice, QueryItem, SessionView } from "./api.js";
import { drawCurve } from "./chart.js";
import { renderGlyph } from "./glyph.js";

export type ChoiceHandler = (pairId: string, choice: LabelChoice) => void;

function imagePane(doc: Document, side: "a" | "b",
                   item: QueryItem): HTMLElement {
  const image = side === "a" ? item.image_a : item.image_b;
  const pane = doc.createElement("figure");
  pane.className = "pane";
  const caption = doc.createElement("figcaption");
  caption.textContent = `image ${image.id}`;
  if (image.asset_uri) {
    const img = doc.createElement("img");
    img.src = image.asset_uri;
    img.alt = `image ${image.id}`;
    // a broken asset must not block annotation: fall back to the glyph
    img.addEventListener("error", () => {
      const glyph = doc.createElement("div");
      renderGlyph(glyph, image.features);
      pane.replaceChild(glyph, img);
    });
    pane.appendChild(img);
  } else {
    const glyph = doc.createElement("div");
    renderGlyph(glyph, image.features);
    pane.appendChild(glyph);
  }
  pane.appendChild(caption);
  return pane;
}

/** The interactive card: two images (or glyph fallbacks) and exactly two
 * actions. Keyboard: y = similar, n = dissimilar (wired by the app). */
export function renderPairCard(doc: Document, item: QueryItem,
                               onChoice: ChoiceHandler): HTMLElement {
  const card = doc.createElement("section");
  card.className = "pair-card";
  card.dataset.pairId = item.pair_id;

  const images = doc.createElement("div");
  images.className = "pair-images";
  images.appendChild(imagePane(doc, "a", item));
  images.appendChild(imagePane(doc, "b", item));
  card.appendChild(images);

  const actions = doc.createElement("div");
  actions.className = "pair-actions";
  const mk = (choice: LabelChoice, text: string) => {
    const button = doc.createElement("button");
    button.className = `choice choice-${choice}`;
    button.dataset.choice = choice;
    button.textContent = text;
    button.addEventListener("click", () => onChoice(item.pair_id, choice));
    return button;
  };
  actions.appendChild(mk("similar", "Similar (y)"));
  actions.appendChild(mk("dissimilar", "Dissimilar (n)"));
  card.appendChild(actions);
  return card;
}

export function renderDashboard(root: HTMLElement, view: SessionView,
                                stale: boolean): void {
  const set = (selector: string, text: string) => {
    const el = root.querySelector(selector);
    if (el) el.textContent = text;
  };
  // every number below is echoed from the server payload verbatim
  set("[data-field=bits]", String(view.bits_spent));
  set("[data-field=budget]", String(view.budget_bits));
  set("[data-field=iteration]", String(view.iteration));
  set("[data-field=pending]", String(view.pending_count));
  set("[data-field=answered]", String(view.answered_count));
  const spent = view.budget_bits > 0
    ? Math.min(100, Math.round(100 * (view.bits_spent / view.budget_bits)))
    : 0;
  set("[data-field=budget-percent]", `${spent}%`);
  const phaseLabel =
    view.phase === "training" ? "retraining"
    : view.phase === "waiting" ? (view.pending_count ? "awaiting labels"
                                                     : "retraining")
    : view.phase;
  set("[data-field=phase]", stale ? `${phaseLabel} (stale)` : phaseLabel);
  const badge = root.querySelector("[data-field=stale]") as HTMLElement | null;
  if (badge) badge.hidden = !stale;

  const canvas = root.querySelector("canvas.map-chart");
  if (canvas) {
    drawCurve(canvas as HTMLCanvasElement, view.history);
  }
  const historyEl = root.querySelector("[data-field=history]");
  if (historyEl) {
    historyEl.textContent = view.history
      .map((r) => `#${r.iteration} ${r.bits}b map=${r.map_at_5.toFixed(3)}`)
      .join("  ");
  }
}
