/** Deterministic feature glyphs: when no image asset exists, a pair member
 * is rendered as a 4x4 color grid derived from its first 16 feature values,
 * so synthetic datasets stay annotatable. */

export const GLYPH_CELLS = 16;
export const GLYPH_GRID = 4;

/** Squash an unbounded feature value into [0, 1). */
function squash(value: number): number {
  return 0.5 * (Math.tanh(value / 2.0) + 1.0);
}

/** One CSS color per grid cell; purely a function of the features. */
export function glyphColors(features: number[]): string[] {
  const colors: string[] = [];
  for (let i = 0; i < GLYPH_CELLS; i++) {
    const value = features[i % Math.max(features.length, 1)] ?? 0;
    const t = squash(value);
    const hue = Math.round(240 - 240 * t); // blue (low) .. red (high)
    const light = Math.round(30 + 45 * t);
    colors.push(`hsl(${hue}, 70%, ${light}%)`);
  }
  return colors;
}

/** Render the grid into a container element as sized divs (no canvas
 * dependency, works in any DOM). */
export function renderGlyph(container: HTMLElement, features: number[]): void {
  container.textContent = "";
  container.classList.add("glyph");
  for (const color of glyphColors(features)) {
    const cell = container.ownerDocument.createElement("div");
    cell.className = "glyph-cell";
    cell.style.backgroundColor = color;
    container.appendChild(cell);
  }
}
