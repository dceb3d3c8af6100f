"""Game state -> network input channels.

Every spatial feature is a truncated Gaussian stamp at the player's
position (distances in cell units, zero beyond 3 sigma):

* position channel: 0.5 * stamp per player, so the map stays in [0, 1];
* velocity / bbox channels: the scalar value times a peak-1 stamp;
* pose channels: the GCN embedding components times the same peak-1 stamp,
  assembled inside the model so gradients reach the pose encoder.

The horizontal flip mirrors the width axis: y positions, stamp columns,
target column, pose left/right identities and x offsets, and the sign of
the y velocity.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .dataset import GameStateSample
from .geometry import CellIndex, CourtGrid, CourtPoint, OutOfCourt
from .model import FLIP_KEYPOINT_PERM, standardize_pose

VARIANTS = ("full", "minus_velocity", "minus_pose", "minus_pose_plus_bbox")


@dataclass(frozen=True)
class Standardization:
    """Training-set scaling for raw-valued channels.

    vy keeps a zero mean so the horizontal flip (which negates vy) commutes
    with standardization.
    """

    vx_mean: float = 0.0
    vx_std: float = 1.0
    vy_std: float = 1.0
    bbox_h_mean: float = 0.0
    bbox_h_std: float = 1.0
    bbox_w_mean: float = 0.0
    bbox_w_std: float = 1.0

    def velocity(self, v: tuple[float, float]) -> tuple[float, float]:
        return ((v[0] - self.vx_mean) / self.vx_std, v[1] / self.vy_std)

    def bbox(self, hw: tuple[float, float]) -> tuple[float, float]:
        return ((hw[0] - self.bbox_h_mean) / self.bbox_h_std, (hw[1] - self.bbox_w_mean) / self.bbox_w_std)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(**d)


def fit_standardization(samples: list[GameStateSample]) -> Standardization:
    vx = np.array([v[0] for s in samples for v in s.velocities])
    vy = np.array([v[1] for s in samples for v in s.velocities])
    hs = np.array([b[0] for s in samples if s.bboxes for b in s.bboxes])
    ws = np.array([b[1] for s in samples if s.bboxes for b in s.bboxes])

    def std(a):
        if a.size < 2:
            return 1.0
        v = float(a.std())
        return v if v > 1e-9 else 1.0

    return Standardization(
        vx_mean=float(vx.mean()) if vx.size else 0.0,
        vx_std=std(vx),
        vy_std=std(vy),
        bbox_h_mean=float(hs.mean()) if hs.size else 0.0,
        bbox_h_std=std(hs),
        bbox_w_mean=float(ws.mean()) if ws.size else 0.0,
        bbox_w_std=std(ws),
    )


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "full"
    sigma_cells: float = 3.0
    pose_embed_dim: int = 4
    flip_enabled: bool = True
    standardization: Standardization | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sigma_cells <= 0 or self.pose_embed_dim < 1:
            raise ValueError("sigma_cells must be > 0 and pose_embed_dim >= 1")

    @property
    def uses_pose(self) -> bool:
        return self.variant in ("full", "minus_velocity")

    @property
    def uses_velocity(self) -> bool:
        return self.variant != "minus_velocity"

    @property
    def uses_bbox(self) -> bool:
        return self.variant == "minus_pose_plus_bbox"

    def static_channel_names(self) -> list[str]:
        names = ["position"]
        if self.uses_velocity:
            names += ["p0_vx", "p0_vy", "p1_vx", "p1_vy"]
        if self.uses_bbox:
            names += ["p0_bh", "p0_bw", "p1_bh", "p1_bw"]
        return names

    def channel_names(self) -> list[str]:
        names = self.static_channel_names()
        if self.uses_pose:
            names += [f"p{p}_pose{d}" for p in (0, 1) for d in range(self.pose_embed_dim)]
        return names

    @property
    def n_channels(self) -> int:
        return len(self.channel_names())

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "sigma_cells": self.sigma_cells,
            "pose_embed_dim": self.pose_embed_dim,
            "flip_enabled": self.flip_enabled,
            "standardization": self.standardization.to_dict() if self.standardization else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        std = d.get("standardization")
        return cls(
            variant=d["variant"],
            sigma_cells=d["sigma_cells"],
            pose_embed_dim=d["pose_embed_dim"],
            flip_enabled=d.get("flip_enabled", True),
            standardization=Standardization.from_dict(std) if std else None,
        )


# -- stamps ------------------------------------------------------------------


def _cell_coords(grid: CourtGrid, pt: CourtPoint) -> tuple[float, float]:
    """Continuous position in cell units (cell centers at integers)."""
    return (pt.x / grid.cell_length - 0.5, pt.y / grid.cell_width - 0.5)


def gaussian_stamp(
    grid: CourtGrid, pt: CourtPoint, sigma: float, dtype=np.float64, margin: float = 0.5
) -> np.ndarray:
    """Peak-1 Gaussian at the player's position, exactly 0 beyond 3 sigma."""
    pi, pj = _cell_coords(grid, pt)
    if not (-margin <= pt.x <= grid.length_m + margin) or not (
        -margin <= pt.y <= grid.width_m + margin
    ):
        raise OutOfCourt(f"({pt.x:.3f}, {pt.y:.3f}) beyond the {margin} m court margin")
    out = np.zeros((grid.rows, grid.cols), dtype=dtype)
    reach = 3.0 * sigma
    i0 = max(0, int(math.floor(pi - reach)))
    i1 = min(grid.rows, int(math.ceil(pi + reach)) + 1)
    j0 = max(0, int(math.floor(pj - reach)))
    j1 = min(grid.cols, int(math.ceil(pj + reach)) + 1)
    if i0 >= i1 or j0 >= j1:
        return out
    ii = np.arange(i0, i1, dtype=dtype)[:, None]
    jj = np.arange(j0, j1, dtype=dtype)[None, :]
    d2 = (ii - pi) ** 2 + (jj - pj) ** 2
    patch = np.exp(-d2 / (2.0 * sigma * sigma))
    patch[d2 > reach * reach] = 0.0
    out[i0:i1, j0:j1] = patch
    return out


def centered_stamp_patch(sigma: float, dtype=np.float32) -> np.ndarray:
    """Stamp for a player exactly at a cell center (used by grid sweeps)."""
    r = int(math.ceil(3.0 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    patch = np.exp(-d2 / (2.0 * sigma * sigma))
    patch[d2 > (3.0 * sigma) ** 2] = 0.0
    return patch.astype(dtype)


# -- channel encoders ---------------------------------------------------------


def encode_positions(players, cfg: EncoderConfig, grid: CourtGrid, dtype=np.float64) -> np.ndarray:
    """Two-player Gaussian mixture map with 0.5/0.5 weights."""
    out = np.zeros((grid.rows, grid.cols), dtype=dtype)
    for pt in players:
        out += 0.5 * gaussian_stamp(grid, pt, cfg.sigma_cells, dtype=dtype)
    return out


def encode_velocities(players, velocities, cfg: EncoderConfig, grid: CourtGrid, dtype=np.float64) -> np.ndarray:
    """(4, rows, cols): per player, vx and vy times the peak-1 stamp."""
    std = cfg.standardization or Standardization()
    out = np.zeros((4, grid.rows, grid.cols), dtype=dtype)
    for p, (pt, v) in enumerate(zip(players, velocities)):
        stamp = gaussian_stamp(grid, pt, cfg.sigma_cells, dtype=dtype)
        sv = std.velocity(v)
        out[2 * p] = sv[0] * stamp
        out[2 * p + 1] = sv[1] * stamp
    return out


def encode_bbox_ablation(bboxes, players, cfg: EncoderConfig, grid: CourtGrid, dtype=np.float64) -> np.ndarray:
    """(4, rows, cols): per player, standardized box height/width stamps."""
    std = cfg.standardization or Standardization()
    out = np.zeros((4, grid.rows, grid.cols), dtype=dtype)
    for p, (pt, hw) in enumerate(zip(players, bboxes)):
        if hw[0] <= 0 or hw[1] <= 0:
            raise ValueError(f"nonpositive bbox {hw}")
        stamp = gaussian_stamp(grid, pt, cfg.sigma_cells, dtype=dtype)
        sh, sw = std.bbox(hw)
        out[2 * p] = sh * stamp
        out[2 * p + 1] = sw * stamp
    return out


def encode_pose_stamp(pose_embeddings: np.ndarray, players, cfg: EncoderConfig, grid: CourtGrid, dtype=np.float64) -> np.ndarray:
    """(2*D, rows, cols): embedding components spread over player stamps.

    Inference-time counterpart of the in-graph fusion; both use the same
    stamps, so values match the trained path exactly.
    """
    d = cfg.pose_embed_dim
    out = np.zeros((2 * d, grid.rows, grid.cols), dtype=dtype)
    for p, pt in enumerate(players):
        stamp = gaussian_stamp(grid, pt, cfg.sigma_cells, dtype=dtype)
        for k in range(d):
            out[p * d + k] = pose_embeddings[p, k] * stamp
    return out


# -- encoded samples ----------------------------------------------------------


@dataclass
class EncodedSample:
    """Numeric inputs for one sample: static channels plus pose inputs."""

    static: np.ndarray  # (rows, cols, n_static)
    stamps: np.ndarray | None  # (2, rows, cols) peak-1 supports
    pose_feats: np.ndarray | None  # (2, 17, 3) standardized pose features
    target: CellIndex
    label: int


@dataclass
class EncodedBatch:
    static: np.ndarray  # (B, rows, cols, n_static)
    stamps: np.ndarray | None  # (B, 2, rows, cols)
    pose_feats: np.ndarray | None  # (B, 2, 17, 3)
    rows_idx: np.ndarray  # (B,) target rows
    cols_idx: np.ndarray
    labels: np.ndarray  # (B,) float

    def __len__(self):
        return self.static.shape[0]


def encode_sample(sample: GameStateSample, cfg: EncoderConfig, grid: CourtGrid, dtype=np.float32) -> EncodedSample:
    chans = [encode_positions(sample.positions, cfg, grid, dtype=dtype)]
    if cfg.uses_velocity:
        chans.extend(encode_velocities(sample.positions, sample.velocities, cfg, grid, dtype=dtype))
    if cfg.uses_bbox:
        if sample.bboxes is None:
            raise ValueError(f"sample {sample.sample_id} has no bboxes for variant {cfg.variant}")
        chans.extend(encode_bbox_ablation(sample.bboxes, sample.positions, cfg, grid, dtype=dtype))
    static = np.stack(chans, axis=-1).astype(dtype)

    stamps = None
    pose_feats = None
    if cfg.uses_pose:
        if sample.poses is None:
            raise ValueError(f"sample {sample.sample_id} has no poses for variant {cfg.variant}")
        stamps = np.stack(
            [gaussian_stamp(grid, pt, cfg.sigma_cells, dtype=dtype) for pt in sample.positions]
        )
        pose_feats = np.stack([standardize_pose(p) for p in sample.poses]).astype(dtype)
    return EncodedSample(static, stamps, pose_feats, sample.target, sample.label)


def encode_batch(samples: list[GameStateSample], cfg: EncoderConfig, grid: CourtGrid, dtype=np.float32) -> EncodedBatch:
    enc = [encode_sample(s, cfg, grid, dtype=dtype) for s in samples]
    return collate(enc)


def collate(enc: list[EncodedSample]) -> EncodedBatch:
    return EncodedBatch(
        static=np.stack([e.static for e in enc]),
        stamps=np.stack([e.stamps for e in enc]) if enc[0].stamps is not None else None,
        pose_feats=np.stack([e.pose_feats for e in enc]) if enc[0].pose_feats is not None else None,
        rows_idx=np.array([e.target.i for e in enc]),
        cols_idx=np.array([e.target.j for e in enc]),
        labels=np.array([float(e.label) for e in enc]),
    )


def horizontal_flip(sample: GameStateSample, grid: CourtGrid) -> GameStateSample:
    """Mirror the sample about the court centerline (width axis)."""
    flip_pt = lambda p: CourtPoint(p.x, grid.width_m - p.y)
    flip_v = lambda v: (v[0], -v[1])
    poses = None
    if sample.poses is not None:
        poses = tuple(
            np.column_stack([-p[FLIP_KEYPOINT_PERM, 0], p[FLIP_KEYPOINT_PERM, 1], p[FLIP_KEYPOINT_PERM, 2]])
            for p in sample.poses
        )
    oracle = None
    if sample.oracle is not None:
        oracle = dict(sample.oracle)
        if "true_velocities" in oracle:
            oracle["true_velocities"] = [[v[0], -v[1]] for v in oracle["true_velocities"]]
    return dataclasses.replace(
        sample,
        positions=tuple(flip_pt(p) for p in sample.positions),
        velocities=tuple(flip_v(v) for v in sample.velocities),
        target=CellIndex(sample.target.i, grid.cols - 1 - sample.target.j),
        poses=poses,
        oracle=oracle,
    )


def flip_encoded(e: EncodedSample, cfg: EncoderConfig, grid: CourtGrid) -> EncodedSample:
    """Mirror an encoded sample directly (equals encode(horizontal_flip(s)))."""
    static = e.static[:, ::-1, :].copy()
    names = cfg.static_channel_names()
    for k, name in enumerate(names):
        if name.endswith("_vy"):
            static[:, :, k] = -static[:, :, k]
    stamps = e.stamps[:, :, ::-1].copy() if e.stamps is not None else None
    pose_feats = None
    if e.pose_feats is not None:
        pose_feats = e.pose_feats[:, FLIP_KEYPOINT_PERM, :].copy()
        pose_feats[:, :, 0] = -pose_feats[:, :, 0]
    return EncodedSample(static, stamps, pose_feats, CellIndex(e.target.i, grid.cols - 1 - e.target.j), e.label)
