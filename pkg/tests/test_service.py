import pytest
from fastapi.testclient import TestClient

from courtcontrol.checkpoint import save_checkpoint
from courtcontrol.dataset import SyntheticOracle, sample_to_record, synth_generate
from courtcontrol.encoder import EncoderConfig, fit_standardization
from courtcontrol.geometry import CourtGrid
from courtcontrol.infer import build_model_config, load_pipeline, pipeline_metadata
from courtcontrol.model import ControlModel
from courtcontrol.service import ServiceState, create_app

GRID = CourtGrid(rows=16, cols=8)


@pytest.fixture(scope="module")
def service():
    samples = synth_generate(SyntheticOracle(), 10, seed=1, grid=GRID)
    cfg = EncoderConfig(standardization=fit_standardization(samples), pose_embed_dim=4)
    mc = build_model_config(GRID, cfg, (2, 4, 8), 8)
    model = ControlModel(mc).init_params(0)
    import tempfile, os

    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "model.ckpt")
        save_checkpoint(model.param_arrays(), pipeline_metadata(GRID, cfg, mc, {"note": "test"}), path)
        pipeline = load_pipeline(path)
        state = ServiceState(pipeline, samples)
        client = TestClient(create_app(state))
        yield client, pipeline, samples


@pytest.fixture()
def empty_service():
    return TestClient(create_app(ServiceState(None, [])))


def _payload(sample):
    rec = sample_to_record(sample)
    return {k: rec[k] for k in (
        "sample_id", "rally_id", "frame", "side", "positions", "velocities",
        "target_cell", "label", "poses", "bboxes",
    )}


class TestInfer:
    def test_valid_sample_returns_map(self, service):
        client, pipeline, samples = service
        r = client.post("/infer", json={"schema_version": 1, "sample": _payload(samples[0])})
        assert r.status_code == 200
        body = r.json()
        assert body["grid"] == {"rows": 16, "cols": 8}
        assert body["checkpoint_id"] == pipeline.checkpoint_id
        assert len(body["map"]) == 16 * 8
        assert all(0.0 <= v <= 1.0 for v in body["map"])

    def test_infer_by_id(self, service):
        client, _, samples = service
        r = client.post("/infer", json={"sample_id": samples[3].sample_id})
        assert r.status_code == 200

    def test_unknown_id_404(self, service):
        client, _, _ = service
        r = client.post("/infer", json={"sample_id": "nope"})
        assert r.status_code == 404

    def test_malformed_pose_400_with_field_path(self, service):
        client, _, samples = service
        bad = _payload(samples[0])
        bad["poses"] = [bad["poses"][0][:16], bad["poses"][1]]
        r = client.post("/infer", json={"sample": bad})
        assert r.status_code == 400
        detail = r.json()["details"]
        assert any("poses" in d["loc"] for d in detail)

    def test_no_model_409(self, empty_service):
        r = empty_service.post("/infer", json={"sample_id": "x"})
        assert r.status_code == 409

    def test_deterministic_repeat(self, service):
        client, _, samples = service
        body = {"sample": _payload(samples[1])}
        a = client.post("/infer", json=body).json()
        b = client.post("/infer", json=body).json()
        assert a == b


class TestWhatIf:
    def test_identity_override_matches_infer(self, service):
        client, _, samples = service
        s = samples[0]
        base = client.post("/infer", json={"sample": _payload(s)}).json()["map"]
        same = client.post(
            "/whatif",
            json={"sample": _payload(s), "overrides": {"1": [s.positions[1].x, s.positions[1].y]}},
        ).json()["map"]
        assert same == base  # bitwise identical through JSON floats

    def test_moving_player_changes_map(self, service):
        client, _, samples = service
        s = samples[0]
        base = client.post("/infer", json={"sample": _payload(s)}).json()["map"]
        moved = client.post(
            "/whatif", json={"sample": _payload(s), "overrides": {"1": [1.0, 1.0]}}
        ).json()["map"]
        assert moved != base

    def test_out_of_court_400(self, service):
        client, _, samples = service
        r = client.post(
            "/whatif", json={"sample": _payload(samples[0]), "overrides": {"0": [-5.0, 0.0]}}
        )
        assert r.status_code == 400
        assert r.json()["error"] == "out_of_court"

    def test_bad_player_index_400(self, service):
        client, _, samples = service
        r = client.post(
            "/whatif", json={"sample": _payload(samples[0]), "overrides": {"2": [1.0, 1.0]}}
        )
        assert r.status_code == 400


class TestRecommend:
    def test_two_levels_reported(self, service):
        client, _, samples = service
        r = client.post(
            "/recommend",
            json={"sample": _payload(samples[0]), "p_levels": [0.45, 0.5], "n": 5},
        )
        assert r.status_code == 200
        recs = r.json()["recommendations"]
        assert set(recs) == {"0.45", "0.5"}
        ok = [v for v in recs.values() if "x_rec" in v]
        assert ok, "expected at least one level to qualify on an untrained model"

    def test_impossible_level_422(self, service):
        client, _, samples = service
        r = client.post(
            "/recommend", json={"sample": _payload(samples[0]), "p_levels": [0.999]}
        )
        assert r.status_code == 422
        assert r.json()["recommendations"]["0.999"]["error"] == "no_qualifying_cells"

    def test_repeat_identical(self, service):
        client, _, samples = service
        body = {"sample": _payload(samples[2]), "p_levels": [0.45]}
        assert client.post("/recommend", json=body).json() == client.post("/recommend", json=body).json()

    def test_invalid_p_400(self, service):
        client, _, _ = service
        r = client.post("/recommend", json={"sample_id": "x", "p_levels": [1.5]})
        assert r.status_code == 400


class TestMeta:
    def test_healthz(self, service):
        client, pipeline, _ = service
        assert client.get("/healthz").json() == {"checkpoint_id": pipeline.checkpoint_id}

    def test_healthz_409_when_empty(self, empty_service):
        assert empty_service.get("/healthz").status_code == 409

    def test_samples_listing(self, service):
        client, _, samples = service
        body = client.get("/samples").json()
        assert len(body["samples"]) == len(samples)
        assert body["samples"][0]["sample_id"] == samples[0].sample_id

    def test_sample_record_fetch(self, service):
        client, _, samples = service
        body = client.get(f"/samples/{samples[0].sample_id}").json()
        assert body["sample"]["sample_id"] == samples[0].sample_id
        assert len(body["sample"]["positions"]) == 2
        assert client.get("/samples/zzz").status_code == 404

    def test_model_info_exposes_layout(self, service):
        client, _, _ = service
        meta = client.get("/model/info").json()["metadata"]
        assert meta["encoder"]["variant"] == "full"
        assert meta["grid"]["rows"] == 16
        assert "tensors" in meta


def test_whatif_latency_at_default_model_size():
    """p50 of /whatif stays within the 50 ms interactive budget."""
    import time

    grid = CourtGrid()  # full 112x56
    samples = synth_generate(SyntheticOracle(), 4, seed=5, grid=grid)
    cfg = EncoderConfig(standardization=fit_standardization(samples), pose_embed_dim=4)
    mc = build_model_config(grid, cfg, (4, 8, 16), 16)
    model = ControlModel(mc).init_params(0)
    from courtcontrol.infer import Pipeline

    state = ServiceState(Pipeline(model, cfg, grid, {}, "latency00000"), samples)
    client = TestClient(create_app(state))
    body = {"sample_id": samples[0].sample_id, "overrides": {"1": [3.0, 3.0]}}
    client.post("/whatif", json=body)  # warm
    times = []
    for _ in range(11):
        t0 = time.perf_counter()
        r = client.post("/whatif", json=body)
        times.append(time.perf_counter() - t0)
        assert r.status_code == 200
    p50 = sorted(times)[len(times) // 2]
    assert p50 <= 0.050, f"p50 {p50 * 1e3:.1f} ms over budget"
