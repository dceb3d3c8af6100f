// Thin JSON client for the control-map service. The fetch function is
// injectable so tests can run against a scripted mock.

import type { MapResponse, RecommendResponse, SamplePayload, SampleSummary } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  constructor(
    public status: number,
    public body: unknown,
  ) {
    super(`service error ${status}`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = fetch.bind(globalThis),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    const payload = await resp.json();
    if (!resp.ok) throw new ServiceError(resp.status, payload);
    return payload as T;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path);
    const payload = await resp.json();
    if (!resp.ok) throw new ServiceError(resp.status, payload);
    return payload as T;
  }

  infer(sample: SamplePayload): Promise<MapResponse> {
    return this.post("/infer", { schema_version: 1, sample });
  }

  whatif(sample: SamplePayload, overrides: Record<number, number[]>): Promise<MapResponse> {
    return this.post("/whatif", { schema_version: 1, sample, overrides });
  }

  recommend(sample: SamplePayload, pLevels: number[], n = 5): Promise<RecommendResponse> {
    return this.post("/recommend", { schema_version: 1, sample, p_levels: pLevels, n });
  }

  samples(): Promise<{ samples: SampleSummary[] }> {
    return this.get("/samples");
  }

  async sampleRecord(id: string): Promise<SamplePayload> {
    const body = await this.get<{ sample: SamplePayload }>(`/samples/${encodeURIComponent(id)}`);
    return body.sample;
  }
}
