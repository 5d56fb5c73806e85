/** Canvas renderers: DVH overlay (current solid, previous dashed) and the
 * axial slice heatmap. Pure drawing; every number comes from the engine. */

import type { DvhCurve } from "./api.js";

const PALETTE = [
  "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e",
  "#8c564b", "#e377c2", "#17becf", "#bcbd22",
];

export function structureColor(index: number): string {
  return PALETTE[index % PALETTE.length];
}

export interface DvhOverlay {
  current: Record<string, DvhCurve>;
  previous: Record<string, DvhCurve> | null;
}

export function drawDvhChart(canvas: HTMLCanvasElement, overlay: DvhOverlay): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const names = Object.keys(overlay.current).sort();
  let maxDose = 1;
  for (const name of names) {
    for (const d of overlay.current[name].dose_gy) maxDose = Math.max(maxDose, d);
    const prev = overlay.previous?.[name];
    if (prev) for (const d of prev.dose_gy) maxDose = Math.max(maxDose, d);
  }
  const ml = 42, mb = 28, mt = 8, mr = 8;
  const px = (dose: number) => ml + ((w - ml - mr) * dose) / maxDose;
  const py = (frac: number) => mt + (h - mt - mb) * (1 - frac);

  ctx.strokeStyle = "#888";
  ctx.lineWidth = 1;
  ctx.strokeRect(ml, mt, w - ml - mr, h - mt - mb);
  ctx.fillStyle = "#444";
  ctx.font = "10px sans-serif";
  ctx.fillText("dose [Gy]", w / 2 - 20, h - 8);
  ctx.save();
  ctx.translate(10, h / 2 + 24);
  ctx.rotate(-Math.PI / 2);
  ctx.fillText("volume [%]", 0, 0);
  ctx.restore();
  for (let f = 0; f <= 1.0001; f += 0.25) {
    ctx.fillText(`${Math.round(f * 100)}`, ml - 22, py(f) + 3);
  }
  for (let k = 0; k <= 4; k++) {
    const dose = (maxDose * k) / 4;
    ctx.fillText(dose.toFixed(0), px(dose) - 6, h - mb + 12);
  }

  const drawCurve = (curve: DvhCurve, color: string, dashed: boolean) => {
    ctx.strokeStyle = color;
    ctx.lineWidth = dashed ? 1 : 1.6;
    ctx.setLineDash(dashed ? [4, 3] : []);
    ctx.beginPath();
    curve.volume_fraction.forEach((f, i) => {
      const x = px(curve.dose_gy[i]);
      const y = py(f);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    ctx.setLineDash([]);
  };

  names.forEach((name, i) => {
    const prev = overlay.previous?.[name];
    if (prev) drawCurve(prev, structureColor(i), true);
    drawCurve(overlay.current[name], structureColor(i), false);
  });
}

export function drawSliceHeatmap(
  canvas: HTMLCanvasElement,
  slice: { rows: number; cols: number; values: number[][]; window: [number, number] },
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { rows, cols, values, window } = slice;
  const [lo, hi] = window;
  const span = hi - lo || 1;
  const cw = canvas.width / cols;
  const ch = canvas.height / rows;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const t = Math.min(1, Math.max(0, (values[r][c] - lo) / span));
      // blue -> green -> red ramp with a dark floor
      const red = Math.round(255 * Math.min(1, 2 * t));
      const green = Math.round(255 * (t < 0.5 ? 2 * t : 2 - 2 * t));
      const blue = Math.round(255 * Math.max(0, 1 - 2 * t));
      ctx.fillStyle = `rgb(${Math.round(red * 0.9)},${Math.round(green * 0.8)},${blue})`;
      ctx.fillRect(c * cw, r * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
}
