// Canvas heatmap layer. Rendering is split from the DOM: computeCells turns
// a row-major map into positioned, colored rectangles; draw() just blits
// them, so tests can verify alignment and color fidelity without a browser.

import { cssColor, probabilityToColor } from "./colormap.js";
import { cellRect, type ViewTransform } from "./court.js";
import type { GridDims } from "./types.js";

export interface CellPatch {
  x: number;
  y: number;
  w: number;
  h: number;
  color: string;
  value: number;
}

export class DimensionMismatch extends Error {}

export function computeCells(map: number[], grid: GridDims, t: ViewTransform): CellPatch[] {
  if (map.length !== grid.rows * grid.cols) {
    throw new DimensionMismatch(
      `map has ${map.length} values, grid needs ${grid.rows * grid.cols}`,
    );
  }
  const out: CellPatch[] = [];
  for (let i = 0; i < grid.rows; i++) {
    for (let j = 0; j < grid.cols; j++) {
      const v = map[i * grid.cols + j]; // row-major
      const rect = cellRect(i, j, grid.rows, grid.cols, t);
      out.push({ ...rect, color: cssColor(probabilityToColor(v)), value: v });
    }
  }
  return out;
}

export interface CanvasLike {
  fillStyle: string | CanvasGradient | CanvasPattern;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect?(x: number, y: number, w: number, h: number): void;
  fillText?(text: string, x: number, y: number): void;
}

export function drawHeatmap(
  ctx: CanvasLike,
  map: number[],
  grid: GridDims,
  t: ViewTransform,
): void {
  for (const cell of computeCells(map, grid, t)) {
    ctx.fillStyle = cell.color;
    // slight overlap hides antialiasing seams between cells
    ctx.fillRect(cell.x, cell.y, cell.w + 0.5, cell.h + 0.5);
  }
}

export function drawErrorOverlay(ctx: CanvasLike, message: string, t: ViewTransform): void {
  ctx.fillStyle = "rgba(255, 235, 235, 0.9)";
  ctx.fillRect(t.padPx, t.padPx, 13.4 * t.pxPerMeter, 6.1 * t.pxPerMeter);
  if (ctx.fillText) {
    ctx.fillStyle = "#aa0000";
    ctx.fillText(message, t.padPx + 10, t.padPx + 20);
  }
}
