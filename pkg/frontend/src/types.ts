// Wire types for the control-map service (JSON bodies, schema_version 1).

export interface GridDims {
  rows: number;
  cols: number;
}

export interface MapResponse {
  schema_version: number;
  checkpoint_id: string;
  grid: GridDims;
  map: number[]; // row-major rows*cols probabilities in [0, 1]
}

export interface RecommendationRecord {
  x_rec: number;
  y_rec: number;
  achieved_pc: number;
  requested_p: number;
  cluster: number[][];
  candidates: number[][];
  fallback: boolean;
}

export interface RecommendationError {
  error: string;
  detail?: string;
}

export interface RecommendResponse {
  schema_version: number;
  checkpoint_id: string;
  sample_id: string;
  moved_player: number;
  recommendations: Record<string, RecommendationRecord | RecommendationError>;
}

export interface SamplePayload {
  sample_id: string;
  rally_id: string;
  frame: number;
  side: string;
  positions: number[][];
  velocities: number[][];
  target_cell: number[];
  label: number;
  poses: number[][][] | null;
  bboxes: number[][] | null;
}

export interface SampleSummary {
  sample_id: string;
  side: string;
  label: number;
  target_cell: number[];
}

export function isRecommendation(
  r: RecommendationRecord | RecommendationError,
): r is RecommendationRecord {
  return (r as RecommendationRecord).x_rec !== undefined;
}
