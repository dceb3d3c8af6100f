// Pure view-state transitions for the court explorer. The DOM layer feeds
// pointer events in; this module decides marker positions, which requests
// to issue, and what the current sample payload looks like after edits.

import { clampToCourt, insideCourt, type CourtPoint } from "./court.js";
import type { GridDims, MapResponse, SamplePayload } from "./types.js";

export type MarkerId = "player0" | "player1" | "shuttle";

export interface CourtViewState {
  sample: SamplePayload | null;
  grid: GridDims | null;
  heatmap: number[] | null; // exactly the last applied response map
  checkpointId: string | null;
  markers: Record<MarkerId, CourtPoint | null>;
  moved: Record<MarkerId, boolean>;
  thresholds: number[];
  requestInFlight: boolean;
  banner: string | null;
}

export function initialState(): CourtViewState {
  return {
    sample: null,
    grid: null,
    heatmap: null,
    checkpointId: null,
    markers: { player0: null, player1: null, shuttle: null },
    moved: { player0: false, player1: false, shuttle: false },
    thresholds: [0.75, 0.95],
    requestInFlight: false,
    banner: null,
  };
}

export function loadSample(state: CourtViewState, sample: SamplePayload, grid: GridDims): CourtViewState {
  const [ti, tj] = sample.target_cell;
  return {
    ...state,
    sample,
    grid,
    markers: {
      player0: { x: sample.positions[0][0], y: sample.positions[0][1] },
      player1: { x: sample.positions[1][0], y: sample.positions[1][1] },
      shuttle: {
        x: ((ti + 0.5) * 13.4) / grid.rows,
        y: ((tj + 0.5) * 6.1) / grid.cols,
      },
    },
    moved: { player0: false, player1: false, shuttle: false },
    heatmap: null,
    banner: null,
  };
}

export interface DragResult {
  state: CourtViewState;
  /** A /whatif should be scheduled (player moved inside the court). */
  scheduleRequest: boolean;
}

/** Apply a drag point: clamp outside positions, request only when inside. */
export function dragMarker(state: CourtViewState, id: MarkerId, raw: CourtPoint): DragResult {
  if (state.sample === null) return { state, scheduleRequest: false };
  const inside = insideCourt(raw);
  const pos = inside ? raw : clampToCourt(raw);
  const next: CourtViewState = {
    ...state,
    markers: { ...state.markers, [id]: pos },
    moved: { ...state.moved, [id]: true },
  };
  return { state: next, scheduleRequest: inside && id !== "shuttle" };
}

/** Player position overrides for /whatif (all player markers, moved or not). */
export function overridesFor(state: CourtViewState): Record<number, number[]> {
  const out: Record<number, number[]> = {};
  const p0 = state.markers.player0;
  const p1 = state.markers.player1;
  if (p0) out[0] = [p0.x, p0.y];
  if (p1) out[1] = [p1.x, p1.y];
  return out;
}

/** Current sample payload with edits applied: marker positions replace the
 * originals (moved players get zero velocity, mirroring the service rule)
 * and the shuttle marker re-bins the target cell. */
export function currentSamplePayload(state: CourtViewState): SamplePayload {
  if (!state.sample || !state.grid) throw new Error("no sample loaded");
  const s = state.sample;
  const grid = state.grid;
  const positions = [
    markerOr(s.positions[0], state.markers.player0),
    markerOr(s.positions[1], state.markers.player1),
  ];
  const velocities = s.velocities.map((v, i) =>
    state.moved[`player${i}` as MarkerId] ? [0, 0] : v,
  );
  let target = s.target_cell;
  const shuttle = state.markers.shuttle;
  if (shuttle && state.moved.shuttle) {
    target = pointToCell(shuttle, grid);
  }
  return { ...s, positions, velocities, target_cell: target };
}

function markerOr(orig: number[], m: CourtPoint | null): number[] {
  return m ? [m.x, m.y] : orig;
}

export function pointToCell(p: CourtPoint, grid: GridDims): number[] {
  const cellLen = 13.4 / grid.rows;
  const cellWid = 6.1 / grid.cols;
  const i = Math.min(grid.rows - 1, Math.max(0, Math.ceil(p.x / cellLen) - 1));
  const j = Math.min(grid.cols - 1, Math.max(0, Math.ceil(p.y / cellWid) - 1));
  return [i, j];
}

export function applyMapResponse(state: CourtViewState, resp: MapResponse): CourtViewState {
  return {
    ...state,
    heatmap: resp.map,
    grid: resp.grid,
    checkpointId: resp.checkpoint_id,
    banner: null,
  };
}

export function applyError(state: CourtViewState, message: string): CourtViewState {
  // non-blocking banner; the last valid map stays on screen
  return { ...state, banner: message };
}
