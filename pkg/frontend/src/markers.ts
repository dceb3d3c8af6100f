// Recommendation markers derived from /recommend payloads: plum for the
// 0.75 level, magenta for 0.95, with hover text carrying the achieved
// probability and the fallback flag.

import { recommendationColor } from "./colormap.js";
import { isRecommendation, type RecommendResponse } from "./types.js";

export interface RecommendationMarker {
  level: number;
  x: number;
  y: number;
  color: string;
  achievedPc: number;
  fallback: boolean;
  hoverText: string;
}

export interface LevelNotice {
  level: number;
  message: string;
}

export function markersFromResponse(resp: RecommendResponse): {
  markers: RecommendationMarker[];
  notices: LevelNotice[];
} {
  const markers: RecommendationMarker[] = [];
  const notices: LevelNotice[] = [];
  for (const [levelStr, rec] of Object.entries(resp.recommendations)) {
    const level = Number(levelStr);
    if (isRecommendation(rec)) {
      markers.push({
        level,
        x: rec.x_rec,
        y: rec.y_rec,
        color: recommendationColor(level),
        achievedPc: rec.achieved_pc,
        fallback: rec.fallback,
        hoverText:
          `p=${level}: achieved P_c=${rec.achieved_pc.toFixed(3)}` +
          (rec.fallback ? " (fallback to cluster member)" : ""),
      });
    } else {
      notices.push({ level, message: `no qualifying position at p=${level}` });
    }
  }
  markers.sort((a, b) => a.level - b.level);
  notices.sort((a, b) => a.level - b.level);
  return { markers, notices };
}
