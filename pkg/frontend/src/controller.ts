// Headless interaction controller: drag events in, debounced what-if
// requests out, newest-response-wins state updates. The DOM layer only
// renders `state` and `recommendations` after each onChange tick.

import type { ApiClient } from "./api.js";
import { ServiceError } from "./api.js";
import type { CourtPoint } from "./court.js";
import { debounce, type Debounced } from "./debounce.js";
import { markersFromResponse, type LevelNotice, type RecommendationMarker } from "./markers.js";
import { ResponseSequencer } from "./sequencer.js";
import {
  applyError,
  applyMapResponse,
  currentSamplePayload,
  dragMarker,
  initialState,
  loadSample,
  overridesFor,
  type CourtViewState,
  type MarkerId,
} from "./state.js";
import type { GridDims, SamplePayload } from "./types.js";

export interface ControllerOptions {
  debounceMs?: number;
  timers?: { setTimeout: typeof setTimeout; clearTimeout: typeof clearTimeout };
  onChange?: () => void;
}

export class CourtController {
  state: CourtViewState = initialState();
  recommendations: RecommendationMarker[] = [];
  notices: LevelNotice[] = [];
  private sequencer = new ResponseSequencer();
  private scheduleWhatIf: Debounced<[]>;
  private onChange: () => void;
  private pendingRequests: Promise<void>[] = [];

  constructor(
    private api: ApiClient,
    opts: ControllerOptions = {},
  ) {
    this.onChange = opts.onChange ?? (() => {});
    this.scheduleWhatIf = debounce(
      () => this.issueWhatIf(),
      opts.debounceMs ?? 60,
      opts.timers ?? globalThis,
    );
  }

  load(sample: SamplePayload, grid: GridDims): void {
    this.state = loadSample(this.state, sample, grid);
    this.recommendations = [];
    this.notices = [];
    this.onChange();
  }

  onDragMove(id: MarkerId, raw: CourtPoint): void {
    const { state, scheduleRequest } = dragMarker(this.state, id, raw);
    this.state = state;
    if (scheduleRequest) this.scheduleWhatIf();
    this.onChange();
  }

  /** Release fires the pending debounced request immediately (exactly one
   * final /whatif per drag gesture). */
  onDragRelease(): void {
    this.scheduleWhatIf.flush();
  }

  private issueWhatIf(): void {
    const sample = this.state.sample;
    if (!sample) return;
    const seq = this.sequencer.issue();
    this.state = { ...this.state, requestInFlight: true };
    const req = this.api
      .whatif(sample, overridesFor(this.state))
      .then((resp) => {
        if (this.sequencer.accept(seq)) {
          this.state = applyMapResponse(this.state, resp);
        }
      })
      .catch((e) => {
        if (this.sequencer.accept(seq)) {
          this.state = applyError(this.state, e instanceof ServiceError ? `service: ${e.status}` : String(e));
        }
      })
      .finally(() => {
        this.state = { ...this.state, requestInFlight: false };
        this.onChange();
      });
    this.pendingRequests.push(req);
  }

  async refreshRecommendations(levels: number[]): Promise<void> {
    if (!this.state.sample) return;
    try {
      const resp = await this.api.recommend(currentSamplePayload(this.state), levels);
      const { markers, notices } = markersFromResponse(resp);
      this.recommendations = markers;
      this.notices = notices;
    } catch (e) {
      this.recommendations = [];
      if (e instanceof ServiceError && e.status === 422) {
        this.notices = levels.map((p) => ({ level: p, message: `no qualifying position at p=${p}` }));
      } else {
        this.state = applyError(this.state, String(e));
      }
    }
    this.onChange();
  }

  /** Settle all in-flight requests (test helper). */
  async drain(): Promise<void> {
    await Promise.allSettled(this.pendingRequests);
    this.pendingRequests = [];
  }
}
