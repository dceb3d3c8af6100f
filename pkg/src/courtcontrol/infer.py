"""Checkpoint loading and batched map prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointMismatch, checkpoint_id, load_checkpoint
from .dataset import GameStateSample
from .encoder import EncodedBatch, EncoderConfig, encode_batch
from .geometry import CourtGrid
from .model import ControlModel, ModelConfig


@dataclass
class Pipeline:
    """A loaded model plus everything needed to encode samples for it."""

    model: ControlModel
    encoder_cfg: EncoderConfig
    grid: CourtGrid
    metadata: dict
    checkpoint_id: str


def build_model_config(grid: CourtGrid, encoder_cfg: EncoderConfig, widths, gcn_hidden: int) -> ModelConfig:
    return ModelConfig(
        rows=grid.rows,
        cols=grid.cols,
        in_channels=encoder_cfg.n_channels,
        widths=tuple(widths),
        gcn_hidden=gcn_hidden,
        pose_dim=encoder_cfg.pose_embed_dim,
        use_pose_gcn=encoder_cfg.uses_pose,
    )


def pipeline_metadata(grid: CourtGrid, encoder_cfg: EncoderConfig, model_cfg: ModelConfig, training: dict) -> dict:
    return {
        "format": 1,
        "grid": {
            "rows": grid.rows,
            "cols": grid.cols,
            "length_m": grid.length_m,
            "width_m": grid.width_m,
        },
        "encoder": encoder_cfg.to_dict(),
        "model": {
            "widths": list(model_cfg.widths),
            "gcn_hidden": model_cfg.gcn_hidden,
            "pose_dim": model_cfg.pose_dim,
            "in_channels": model_cfg.in_channels,
        },
        "training": training,
    }


def load_pipeline(path, expected_grid: CourtGrid | None = None) -> Pipeline:
    params, meta = load_checkpoint(path)
    g = meta["grid"]
    grid = CourtGrid(g["length_m"], g["width_m"], g["rows"], g["cols"])
    if expected_grid is not None and (grid.rows, grid.cols) != (expected_grid.rows, expected_grid.cols):
        raise CheckpointMismatch(
            f"checkpoint grid {grid.rows}x{grid.cols} != runtime grid "
            f"{expected_grid.rows}x{expected_grid.cols}"
        )
    encoder_cfg = EncoderConfig.from_dict(meta["encoder"])
    m = meta["model"]
    model_cfg = ModelConfig(
        rows=grid.rows,
        cols=grid.cols,
        in_channels=m["in_channels"],
        widths=tuple(m["widths"]),
        gcn_hidden=m["gcn_hidden"],
        pose_dim=m["pose_dim"],
        use_pose_gcn=encoder_cfg.uses_pose,
    )
    if model_cfg.in_channels != encoder_cfg.n_channels:
        raise CheckpointMismatch(
            f"model expects {model_cfg.in_channels} channels, encoder layout has {encoder_cfg.n_channels}"
        )
    model = ControlModel(model_cfg).set_params(params)
    return Pipeline(model, encoder_cfg, grid, meta, checkpoint_id(path))


def forward_batch(model: ControlModel, batch: EncodedBatch) -> ad.Tensor:
    """Assemble the full input inside the graph and run the U-Net."""
    static = ad.constant(np.ascontiguousarray(batch.static, dtype=model.dtype))
    if batch.pose_feats is not None:
        b, p, n, f = batch.pose_feats.shape
        emb_flat = model.gcn_embed(batch.pose_feats.reshape(b * p, n, f))
        emb = _reshape_pairs(emb_flat, b, p)
        pose_channels = ad.stamp_outer(emb, batch.stamps.astype(model.dtype))
        x = ad.concat_channels(static, pose_channels)
    else:
        x = static
    return model.unet(x)


def _reshape_pairs(emb_flat: ad.Tensor, b: int, p: int) -> ad.Tensor:
    """(B*P, D) -> (B, P, D) while keeping the tape connected."""
    d = emb_flat.shape[1]
    out_data = emb_flat.data.reshape(b, p, d)
    needs = emb_flat.requires_grad or emb_flat._parents

    def bwd(g):
        emb_flat._accum(g.reshape(b * p, d))

    if needs:
        return ad.Tensor(out_data, requires_grad=True, _parents=(emb_flat,), _backward=bwd)
    return ad.Tensor(out_data)


def predict_maps(pipeline: Pipeline, samples: list[GameStateSample], batch_size: int = 64) -> np.ndarray:
    """(N, rows, cols) control maps, inference mode."""
    out = np.empty((len(samples), pipeline.grid.rows, pipeline.grid.cols), dtype=np.float32)
    with ad.no_grad(), ad.finite_checks(False):
        for k in range(0, len(samples), batch_size):
            chunk = samples[k : k + batch_size]
            batch = encode_batch(chunk, pipeline.encoder_cfg, pipeline.grid, dtype=pipeline.model.dtype)
            maps = forward_batch(pipeline.model, batch)
            out[k : k + len(chunk)] = maps.data[..., 0]
    if not np.isfinite(out).all():
        raise ad.NonFiniteValue("prediction produced non-finite values")
    return out


def predict_map(pipeline: Pipeline, sample: GameStateSample) -> np.ndarray:
    return predict_maps(pipeline, [sample])[0]


def whatif_map(pipeline: Pipeline, sample: GameStateSample, overrides: dict[int, tuple[float, float]]) -> np.ndarray:
    """Re-encode with overridden player positions and predict.

    A player whose override differs from their actual position gets a
    zeroed velocity (we do not invent motion for hypothetical spots);
    an override equal to the actual position changes nothing.
    """
    import dataclasses

    from .geometry import CourtPoint

    positions = list(sample.positions)
    velocities = list(sample.velocities)
    for idx, (x, y) in overrides.items():
        if idx not in (0, 1):
            raise ValueError(f"player index must be 0 or 1, got {idx}")
        moved = (positions[idx].x, positions[idx].y) != (x, y)
        positions[idx] = CourtPoint(x, y)
        if moved:
            velocities[idx] = (0.0, 0.0)
    modified = dataclasses.replace(
        sample, positions=tuple(positions), velocities=tuple(velocities)
    )
    return predict_map(pipeline, modified)
