// Monotone white-to-red ramp. Quantization is exactly 8-bit: encoding then
// decoding recovers the probability within 1/255.

export interface Rgb {
  r: number;
  g: number;
  b: number;
}

export function probabilityToColor(p: number): Rgb {
  const clamped = Math.min(1, Math.max(0, p));
  const v = Math.round(clamped * 255);
  return { r: 255, g: 255 - v, b: 255 - v };
}

export function colorToProbability(c: Rgb): number {
  return (255 - c.g) / 255;
}

export function cssColor(c: Rgb): string {
  return `rgb(${c.r}, ${c.g}, ${c.b})`;
}

export const RECOMMENDATION_COLORS: Record<string, string> = {
  "0.75": "#dda0dd", // plum
  "0.95": "#ff00ff", // magenta
};

export function recommendationColor(p: number): string {
  return RECOMMENDATION_COLORS[String(p)] ?? "#7744aa";
}
