// Court geometry and the court <-> canvas mapping. Court x runs along the
// length (drawn left to right), y along the width (drawn top to bottom).

export const COURT_LENGTH_M = 13.4;
export const COURT_WIDTH_M = 6.1;
export const COURT_MARGIN_M = 0.5;

export interface CourtPoint {
  x: number;
  y: number;
}

export function insideCourt(p: CourtPoint, margin = 0.0): boolean {
  return (
    p.x >= -margin &&
    p.x <= COURT_LENGTH_M + margin &&
    p.y >= -margin &&
    p.y <= COURT_WIDTH_M + margin
  );
}

export function clampToCourt(p: CourtPoint): CourtPoint {
  return {
    x: Math.min(COURT_LENGTH_M, Math.max(0, p.x)),
    y: Math.min(COURT_WIDTH_M, Math.max(0, p.y)),
  };
}

export interface ViewTransform {
  pxPerMeter: number;
  padPx: number;
}

export function courtToCanvas(p: CourtPoint, t: ViewTransform): { x: number; y: number } {
  return { x: t.padPx + p.x * t.pxPerMeter, y: t.padPx + p.y * t.pxPerMeter };
}

export function canvasToCourt(px: { x: number; y: number }, t: ViewTransform): CourtPoint {
  return { x: (px.x - t.padPx) / t.pxPerMeter, y: (px.y - t.padPx) / t.pxPerMeter };
}

/** Pixel rectangle of grid cell (i, j): i indexes the length axis. */
export function cellRect(
  i: number,
  j: number,
  rows: number,
  cols: number,
  t: ViewTransform,
): { x: number; y: number; w: number; h: number } {
  const cellLen = (COURT_LENGTH_M / rows) * t.pxPerMeter;
  const cellWid = (COURT_WIDTH_M / cols) * t.pxPerMeter;
  return { x: t.padPx + i * cellLen, y: t.padPx + j * cellWid, w: cellLen, h: cellWid };
}

export function cellCenter(i: number, j: number, rows: number, cols: number): CourtPoint {
  return {
    x: ((i + 0.5) * COURT_LENGTH_M) / rows,
    y: ((j + 0.5) * COURT_WIDTH_M) / cols,
  };
}
