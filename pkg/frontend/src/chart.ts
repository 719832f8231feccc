/** Minimal canvas line chart for the mAP@5-versus-bits curve. */

import { HistoryRow } from "./api.js";

let contextAvailable: boolean | null = null;

function context2d(canvas: HTMLCanvasElement): CanvasRenderingContext2D | null {
  if (contextAvailable === false) {
    return null; // headless DOM (probed once); chart data stays on dataset
  }
  const ctx = canvas.getContext ? canvas.getContext("2d") : null;
  contextAvailable = ctx !== null;
  return ctx;
}

export function drawCurve(canvas: HTMLCanvasElement,
                          history: HistoryRow[]): void {
  canvas.dataset.points = String(history.length);
  const ctx = context2d(canvas);
  if (!ctx) {
    return;
  }
  const w = canvas.width;
  const h = canvas.height;
  const pad = 34;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.lineWidth = 1;
  ctx.strokeRect(pad, pad / 2, w - pad - 8, h - pad - pad / 2);
  if (!history.length) {
    return;
  }
  const bits = history.map((r) => r.bits);
  const lo = Math.min(...bits);
  const hi = Math.max(...bits);
  const spanX = hi - lo || 1;
  const x = (b: number) => pad + ((b - lo) / spanX) * (w - pad - 8);
  const y = (m: number) => pad / 2 + (1 - m) * (h - pad - pad / 2);

  ctx.strokeStyle = "#2a7ae2";
  ctx.lineWidth = 2;
  ctx.beginPath();
  history.forEach((row, i) => {
    if (i === 0) ctx.moveTo(x(row.bits), y(row.map_at_5));
    else ctx.lineTo(x(row.bits), y(row.map_at_5));
  });
  ctx.stroke();
  ctx.fillStyle = "#2a7ae2";
  for (const row of history) {
    ctx.beginPath();
    ctx.arc(x(row.bits), y(row.map_at_5), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  ctx.fillText(`${lo}`, pad, h - 6);
  ctx.fillText(`${hi} bits`, w - 60, h - 6);
  ctx.fillText("mAP@5 1.0", 2, pad / 2 + 10);
  ctx.fillText("0.0", 2, h - pad);
}
