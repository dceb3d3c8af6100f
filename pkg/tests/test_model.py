import numpy as np
import pytest

from courtcontrol import autodiff as ad
from courtcontrol.checkpoint import (
    CheckpointMismatch,
    CorruptCheckpoint,
    checkpoint_id,
    load_checkpoint,
    save_checkpoint,
)
from courtcontrol.geometry import CourtGrid
from courtcontrol.model import (
    ControlModel,
    DegeneratePoseWarning,
    ModelConfig,
    SKELETON_EDGES,
    gcn_forward,
    pose_adjacency,
    receptive_row_radius,
    standardize_pose,
    unet_forward,
)

SMALL = ModelConfig(rows=16, cols=8, in_channels=5, widths=(2, 4, 8), gcn_hidden=6, pose_dim=3)


def _pose(rng=None):
    rng = rng or np.random.default_rng(0)
    kp = rng.uniform(0, 100, size=(17, 2))
    conf = rng.uniform(0.5, 1.0, size=(17, 1))
    return np.concatenate([kp, conf], axis=1)


class TestPoseGraph:
    def test_adjacency_symmetric_normalized(self):
        a = pose_adjacency()
        assert a.shape == (17, 17)
        assert np.allclose(a, a.T)
        assert np.isfinite(a).all()
        assert len(SKELETON_EDGES) == 16

    def test_standardize_centers_and_scales(self):
        kp = _pose()
        feats = standardize_pose(kp)
        # reconstruct: hips midpoint maps to 0, torso length to 1
        conf = kp[:, 2:3]
        xy = feats[:, :2] / np.where(conf > 0, conf, 1.0)
        hips = 0.5 * (xy[11] + xy[12])
        shoulders = 0.5 * (xy[5] + xy[6])
        assert np.allclose(hips, 0, atol=1e-9)
        assert np.linalg.norm(shoulders - hips) == pytest.approx(1.0)

    def test_zero_confidence_zeroes_features(self):
        kp = _pose()
        kp[3, 2] = 0.0
        feats = standardize_pose(kp)
        assert feats[3].tolist() == [0.0, 0.0, 0.0]

    def test_degenerate_pose_warns_and_falls_back(self):
        kp = np.zeros((17, 3))
        kp[:, 2] = 1.0
        with pytest.warns(DegeneratePoseWarning):
            feats = standardize_pose(kp)
        assert np.isfinite(feats).all()


class TestGcn:
    def test_zero_pose_zero_biases_gives_zero_embedding(self):
        model = ControlModel(SMALL, dtype=np.float64).init_params(0)
        emb = gcn_forward(np.zeros((17, 3)), model)
        assert np.allclose(emb, 0.0)

    def test_deterministic(self):
        model = ControlModel(SMALL, dtype=np.float64).init_params(1)
        kp = _pose()
        a = gcn_forward(kp, model)
        b = gcn_forward(kp, model)
        assert a.tobytes() == b.tobytes()

    def test_swapping_nonadjacent_keypoints_changes_embedding(self):
        model = ControlModel(SMALL, dtype=np.float64).init_params(2)
        kp = _pose()
        swapped = kp.copy()
        swapped[[0, 15]] = swapped[[15, 0]]  # nose <-> left ankle: not adjacent
        a = gcn_forward(kp, model)
        b = gcn_forward(swapped, model)
        assert not np.allclose(a, b)

    def test_embedding_dim(self):
        model = ControlModel(SMALL, dtype=np.float64).init_params(3)
        assert gcn_forward(_pose(), model).shape == (SMALL.pose_dim,)


class TestUnet:
    def test_zero_params_give_half_everywhere(self):
        model = ControlModel(SMALL, dtype=np.float64).init_params(0)
        model.set_params({k: np.zeros_like(v) for k, v in model.param_arrays().items()})
        out = unet_forward(np.zeros((5, 16, 8)), model)
        assert out.shape == (16, 8)
        assert np.allclose(out, 0.5)

    def test_output_in_open_unit_interval(self):
        rng = np.random.default_rng(4)
        for seed in range(5):
            model = ControlModel(SMALL).init_params(seed)
            x = rng.standard_normal((5, 16, 8)).astype(np.float32)
            out = unet_forward(x, model)
            assert (out > 0).all() and (out < 1).all()

    def test_batch_of_identical_inputs(self):
        model = ControlModel(SMALL).init_params(9)
        x = np.random.default_rng(1).standard_normal((1, 16, 8, 5)).astype(np.float32)
        with ad.no_grad():
            out = model.unet(ad.constant(np.repeat(x, 2, axis=0)))
        assert out.data[0].tobytes() == out.data[1].tobytes()

    def test_channel_mismatch(self):
        model = ControlModel(SMALL).init_params(0)
        with pytest.raises(ad.ShapeMismatch):
            unet_forward(np.zeros((4, 16, 8)), model)

    def test_parameter_count_stable(self):
        model = ControlModel(SMALL).init_params(0)
        again = ControlModel(SMALL).init_params(7)
        assert model.n_params() == again.n_params()
        assert sorted(model.params) == sorted(again.params)

    def test_mirror_equivariance_with_mirrored_weights(self):
        # mirror-symmetric ops: flipping input cols and kernel width axis
        # must mirror the output exactly
        model = ControlModel(SMALL, dtype=np.float64).init_params(11)
        mirrored = model.mirrored()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 16, 8, 5))
        with ad.no_grad():
            out = model.unet(ad.constant(x)).data
            out_m = mirrored.unet(ad.constant(x[:, :, ::-1, :].copy())).data
        assert np.allclose(out_m, out[:, :, ::-1, :], atol=1e-12)

    def test_receptive_radius_covers_architecture(self):
        r = receptive_row_radius(ModelConfig(in_channels=13, widths=(4, 8, 16)))
        # 10 3x3 convs across strides 1/2/4 reach at least 20 rows
        assert 20 <= r <= 32


class TestCheckpoint:
    def _model(self):
        return ControlModel(SMALL).init_params(5)

    def test_round_trip_bit_identical(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model.param_arrays(), {"note": "t"}, path)
        params, meta = load_checkpoint(path)
        assert meta["note"] == "t"
        for k, v in model.param_arrays().items():
            assert params[k].tobytes() == v.astype("<f4").tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model.param_arrays(), {}, path)
        data = path.read_bytes()
        for cut in (5, 12, len(data) // 2, len(data) - 3):
            (tmp_path / "bad.ckpt").write_bytes(data[:cut])
            with pytest.raises(CorruptCheckpoint):
                load_checkpoint(tmp_path / "bad.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTBADGER" + b"\x00" * 64)
        with pytest.raises(CorruptCheckpoint, match="magic"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        model = self._model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model.param_arrays(), {}, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CorruptCheckpoint, match="trailing"):
            load_checkpoint(path)

    def test_manifest_shape_mismatch(self, tmp_path):
        import json
        import struct

        model = self._model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model.param_arrays(), {}, path)
        raw = path.read_bytes()
        (meta_len,) = struct.unpack("<Q", raw[10:18])
        meta = json.loads(raw[18 : 18 + meta_len])
        meta["tensors"][0]["shape"] = [1, 1]
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        edited = raw[:10] + struct.pack("<Q", len(blob)) + blob + raw[18 + meta_len :]
        (tmp_path / "edit.ckpt").write_bytes(edited)
        with pytest.raises(CorruptCheckpoint, match="shape"):
            load_checkpoint(tmp_path / "edit.ckpt")

    def test_grid_mismatch_is_explicit(self, tmp_path):
        from courtcontrol.encoder import EncoderConfig
        from courtcontrol.infer import build_model_config, load_pipeline, pipeline_metadata

        grid = CourtGrid(rows=16, cols=8)
        enc = EncoderConfig(variant="minus_pose")
        mc = build_model_config(grid, enc, (2, 4, 8), 6)
        model = ControlModel(mc).init_params(0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model.param_arrays(), pipeline_metadata(grid, enc, mc, {}), path)
        load_pipeline(path, expected_grid=grid)  # fine
        with pytest.raises(CheckpointMismatch, match="grid"):
            load_pipeline(path, expected_grid=CourtGrid())

    def test_checkpoint_id_stable(self, tmp_path):
        model = self._model()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model.param_arrays(), {"k": 1}, p1)
        save_checkpoint(model.param_arrays(), {"k": 1}, p2)
        assert checkpoint_id(p1) == checkpoint_id(p2)
        assert len(checkpoint_id(p1)) == 12
