"""HTTP service for inference, what-if exploration, and recommendations.

All bodies are JSON with a schema_version field. Responses embed the
checkpoint id so clients can detect model swaps. The loaded model is
immutable; every request is a pure function of (state, body).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, field_validator

from .dataset import GameStateSample, read_samples, sample_from_record, sample_to_record
from .geometry import OutOfCourt
from .infer import Pipeline, load_pipeline, predict_map, whatif_map
from .positioning import NoQualifyingCells, recommend, sweep_receiver

SCHEMA_VERSION = 1


class SamplePayload(BaseModel):
    sample_id: str = "adhoc"
    rally_id: str = "adhoc"
    frame: int = 0
    side: str = "A"
    positions: list[list[float]] = Field(..., min_length=2, max_length=2)
    velocities: list[list[float]] = Field(..., min_length=2, max_length=2)
    target_cell: list[int] = Field(..., min_length=2, max_length=2)
    label: int = 0
    poses: Optional[list[list[list[float]]]] = None
    bboxes: Optional[list[list[float]]] = None

    @field_validator("positions", "velocities")
    @classmethod
    def _pairs(cls, v):
        for item in v:
            if len(item) != 2:
                raise ValueError("expected [x, y] pairs")
        return v

    @field_validator("poses")
    @classmethod
    def _poses(cls, v):
        if v is None:
            return v
        if len(v) != 2:
            raise ValueError("expected poses for exactly 2 players")
        for pose in v:
            if len(pose) != 17:
                raise ValueError(f"expected 17 keypoints, got {len(pose)}")
            for kp in pose:
                if len(kp) != 3:
                    raise ValueError("each keypoint is [x, y, confidence]")
        return v

    def to_sample(self) -> GameStateSample:
        return sample_from_record(
            {
                "sample_id": self.sample_id,
                "rally_id": self.rally_id,
                "frame": self.frame,
                "side": self.side,
                "positions": self.positions,
                "velocities": self.velocities,
                "target_cell": self.target_cell,
                "label": self.label,
                "poses": self.poses,
                "bboxes": self.bboxes,
            }
        )


class InferRequest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    sample: Optional[SamplePayload] = None
    sample_id: Optional[str] = None


class WhatIfRequest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    sample: Optional[SamplePayload] = None
    sample_id: Optional[str] = None
    overrides: dict[int, list[float]] = Field(default_factory=dict)


class RecommendRequest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    sample: Optional[SamplePayload] = None
    sample_id: Optional[str] = None
    p_levels: list[float] = Field(default_factory=lambda: [0.75, 0.95])
    n: int = 5
    fixed_player: int = 0


class ServiceState:
    def __init__(self, pipeline: Pipeline | None = None, samples: list[GameStateSample] | None = None):
        self.pipeline = pipeline
        self.samples = {s.sample_id: s for s in (samples or [])}


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="courtcontrol service")

    @app.exception_handler(RequestValidationError)
    async def _validation(request: Request, exc: RequestValidationError):
        details = [
            {"loc": [str(l) for l in err["loc"]], "msg": err["msg"]} for err in exc.errors()
        ]
        return JSONResponse(status_code=400, content={"error": "validation", "details": details})

    def _require_model() -> Pipeline:
        if state.pipeline is None:
            raise _NoModel()
        return state.pipeline

    class _NoModel(Exception):
        pass

    @app.exception_handler(_NoModel)
    async def _no_model(request: Request, exc: _NoModel):
        return JSONResponse(status_code=409, content={"error": "no_model_loaded"})

    @app.exception_handler(OutOfCourt)
    async def _out_of_court(request: Request, exc: OutOfCourt):
        return JSONResponse(status_code=400, content={"error": "out_of_court", "detail": str(exc)})

    def _resolve(sample: SamplePayload | None, sample_id: str | None):
        if sample is not None:
            return sample.to_sample(), None
        if sample_id is not None:
            s = state.samples.get(sample_id)
            if s is None:
                return None, JSONResponse(status_code=404, content={"error": "unknown_sample", "sample_id": sample_id})
            return s, None
        return None, JSONResponse(
            status_code=400, content={"error": "validation", "details": [{"loc": ["sample"], "msg": "sample or sample_id required"}]}
        )

    def _map_body(pipeline: Pipeline, control_map: np.ndarray) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "checkpoint_id": pipeline.checkpoint_id,
            "grid": {"rows": pipeline.grid.rows, "cols": pipeline.grid.cols},
            "map": [float(v) for v in control_map.reshape(-1)],
        }

    @app.get("/healthz")
    async def healthz():
        pipeline = _require_model()
        return {"checkpoint_id": pipeline.checkpoint_id}

    @app.get("/model/info")
    async def model_info():
        pipeline = _require_model()
        return {
            "schema_version": SCHEMA_VERSION,
            "checkpoint_id": pipeline.checkpoint_id,
            "metadata": pipeline.metadata,
        }

    @app.get("/samples")
    async def samples():
        _require_model()
        return {
            "schema_version": SCHEMA_VERSION,
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "side": s.side,
                    "label": s.label,
                    "target_cell": [s.target.i, s.target.j],
                }
                for s in state.samples.values()
            ],
        }

    @app.get("/samples/{sample_id}")
    async def sample_record(sample_id: str):
        _require_model()
        s = state.samples.get(sample_id)
        if s is None:
            return JSONResponse(status_code=404, content={"error": "unknown_sample", "sample_id": sample_id})
        return {"schema_version": SCHEMA_VERSION, "sample": sample_to_record(s)}

    @app.post("/infer")
    async def infer(req: InferRequest):
        pipeline = _require_model()
        sample, err = _resolve(req.sample, req.sample_id)
        if err:
            return err
        return _map_body(pipeline, predict_map(pipeline, sample))

    @app.post("/whatif")
    async def whatif(req: WhatIfRequest):
        pipeline = _require_model()
        sample, err = _resolve(req.sample, req.sample_id)
        if err:
            return err
        overrides = {int(k): (float(v[0]), float(v[1])) for k, v in req.overrides.items()}
        for idx in overrides:
            if idx not in (0, 1):
                return JSONResponse(
                    status_code=400,
                    content={"error": "validation", "details": [{"loc": ["overrides", str(idx)], "msg": "player index must be 0 or 1"}]},
                )
        return _map_body(pipeline, whatif_map(pipeline, sample, overrides))

    @app.post("/recommend")
    async def recommend_endpoint(req: RecommendRequest):
        pipeline = _require_model()
        if not all(0 < p < 1 for p in req.p_levels) or req.n < 1:
            return JSONResponse(
                status_code=400,
                content={"error": "validation", "details": [{"loc": ["p_levels"], "msg": "need 0 < p < 1 and n >= 1"}]},
            )
        sample, err = _resolve(req.sample, req.sample_id)
        if err:
            return err
        sweep = sweep_receiver(pipeline, sample, req.fixed_player)
        actual = sample.positions[sweep.moved_player]
        results = {}
        any_ok = False
        for p in req.p_levels:
            try:
                rec = recommend(sweep, actual, p, req.n, grid=pipeline.grid)
                results[str(p)] = rec.to_dict()
                any_ok = True
            except NoQualifyingCells as e:
                results[str(p)] = {"error": "no_qualifying_cells", "detail": str(e)}
        body = {
            "schema_version": SCHEMA_VERSION,
            "checkpoint_id": pipeline.checkpoint_id,
            "sample_id": sample.sample_id,
            "moved_player": sweep.moved_player,
            "recommendations": results,
        }
        if not any_ok:
            return JSONResponse(status_code=422, content=body)
        return body

    return app


def build_service(checkpoint_path, samples_path=None) -> FastAPI:
    pipeline = load_pipeline(checkpoint_path)
    samples = read_samples(samples_path) if samples_path else []
    return create_app(ServiceState(pipeline, samples))
