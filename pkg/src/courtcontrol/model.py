"""Pose-graph encoder and the 3-level U-Net that predicts control maps.

The network takes the encoded game state (position / velocity / pose or
bbox channels over the court grid) and outputs a per-cell control
probability in (0, 1). Pose keypoints go through a small graph convolution
over the fixed 17-joint skeleton; the pooled embedding is stamped at the
player's location by the feature encoder before entering the U-Net.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor

N_KEYPOINTS = 17

# COCO order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
SKELETON_EDGES = [
    (0, 1), (0, 2), (1, 3), (2, 4),
    (5, 6), (11, 12), (5, 11), (6, 12),
    (5, 7), (7, 9), (6, 8), (8, 10),
    (11, 13), (13, 15), (12, 14), (14, 16),
]

KP_LEFT_SHOULDER, KP_RIGHT_SHOULDER = 5, 6
KP_LEFT_HIP, KP_RIGHT_HIP = 11, 12

# left/right identity swap used by the horizontal flip augmentation
FLIP_KEYPOINT_PERM = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15]


class DegeneratePoseWarning(UserWarning):
    """Torso length collapsed; pose was scaled by 1 instead."""


def pose_adjacency() -> np.ndarray:
    """Symmetrically normalized skeleton adjacency with self-loops."""
    a = np.eye(N_KEYPOINTS)
    for i, j in SKELETON_EDGES:
        a[i, j] = 1.0
        a[j, i] = 1.0
    deg = a.sum(axis=1)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return (a * d_inv_sqrt[None, :]) * d_inv_sqrt[:, None]


_ADJACENCY = pose_adjacency()


def standardize_pose(keypoints: np.ndarray) -> np.ndarray:
    """Center keypoints on the hip midpoint and scale by torso length.

    keypoints: (17, 3) of (x, y, confidence). Returns (17, 3) features
    (x_std * c, y_std * c, c) so zero-confidence joints contribute nothing.
    """
    kp = np.asarray(keypoints, dtype=float)
    if kp.shape != (N_KEYPOINTS, 3):
        raise ShapeMismatch(f"pose must be (17, 3), got {kp.shape}")
    hips = 0.5 * (kp[KP_LEFT_HIP, :2] + kp[KP_RIGHT_HIP, :2])
    shoulders = 0.5 * (kp[KP_LEFT_SHOULDER, :2] + kp[KP_RIGHT_SHOULDER, :2])
    torso = float(np.linalg.norm(shoulders - hips))
    if torso < 1e-6:
        warnings.warn("torso length ~ 0; using unit scale", DegeneratePoseWarning)
        torso = 1.0
    conf = kp[:, 2:3]
    xy = (kp[:, :2] - hips) / torso
    return np.concatenate([xy * conf, conf], axis=1)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults sized for single-core CPUs."""

    rows: int = 112
    cols: int = 56
    in_channels: int = 13
    widths: tuple[int, int, int] = (4, 8, 16)
    gcn_hidden: int = 16
    pose_dim: int = 4
    use_pose_gcn: bool = True

    def __post_init__(self):
        if self.rows % 4 or self.cols % 4:
            raise ValueError("grid dims must be divisible by 4 (two 2x2 pools)")


def _conv_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    c1, c2, c3 = cfg.widths
    return [
        ("enc1a", cfg.in_channels, c1),
        ("enc1b", c1, c1),
        ("enc2a", c1, c2),
        ("enc2b", c2, c2),
        ("enc3a", c2, c3),
        ("enc3b", c3, c3),
        ("dec2a", c3 + c2, c2),
        ("dec2b", c2, c2),
        ("dec1a", c2 + c1, c1),
        ("dec1b", c1, c1),
    ]


class ControlModel:
    """Parameter container plus forward passes for GCN and U-Net."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    # -- parameters -------------------------------------------------------

    def init_params(self, seed: int) -> "ControlModel":
        rng = np.random.default_rng(seed)

        def kaiming(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        p = {}
        if self.cfg.use_pose_gcn:
            h, d = self.cfg.gcn_hidden, self.cfg.pose_dim
            p["gcn.l1.w"] = kaiming((3, h), 3)
            p["gcn.l1.b"] = np.zeros(h)
            p["gcn.l2.w"] = kaiming((h, d), h)
            p["gcn.l2.b"] = np.zeros(d)
        for name, ci, co in _conv_shapes(self.cfg):
            p[f"unet.{name}.w"] = kaiming((3, 3, ci, co), 9 * ci)
            p[f"unet.{name}.b"] = np.zeros(co)
        c1 = self.cfg.widths[0]
        p["unet.head.w"] = kaiming((c1, 1), c1)
        p["unet.head.b"] = np.zeros(1)
        self.params = {k: ad.param(v.astype(self.dtype), name=k) for k, v in p.items()}
        return self

    def set_params(self, arrays: dict[str, np.ndarray]) -> "ControlModel":
        self.params = {k: ad.param(np.asarray(v, dtype=self.dtype), name=k) for k, v in arrays.items()}
        return self

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    # -- forward passes ---------------------------------------------------

    def gcn_embed(self, pose_feats: np.ndarray) -> Tensor:
        """Standardized pose features (B, 17, 3) -> embeddings (B, D)."""
        if not self.cfg.use_pose_gcn:
            raise ShapeMismatch("model configured without a pose encoder")
        x = ad.constant(np.asarray(pose_feats, dtype=self.dtype))
        adj = _ADJACENCY.astype(self.dtype)
        h = ad.relu(ad.add_bias(ad.matmul(ad.fixed_matmul(adj, x), self.params["gcn.l1.w"]),
                                self.params["gcn.l1.b"]))
        h = ad.relu(ad.add_bias(ad.matmul(ad.fixed_matmul(adj, h), self.params["gcn.l2.w"]),
                                self.params["gcn.l2.b"]))
        return ad.mean_nodes(h)

    def unet_logits(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.in_channels:
            raise ShapeMismatch(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[-1]}"
            )
        p = self.params

        def block(t, name):
            t = ad.relu(ad.conv3x3(t, p[f"unet.{name}a.w"], p[f"unet.{name}a.b"]))
            return ad.relu(ad.conv3x3(t, p[f"unet.{name}b.w"], p[f"unet.{name}b.b"]))

        e1 = block(x, "enc1")
        e2 = block(ad.avg_pool2x2(e1), "enc2")
        e3 = block(ad.avg_pool2x2(e2), "enc3")
        d2 = block(ad.concat_channels(ad.upsample2x(e3), e2), "dec2")
        d1 = block(ad.concat_channels(ad.upsample2x(d2), e1), "dec1")
        return ad.conv1x1(d1, p["unet.head.w"], p["unet.head.b"])

    def unet(self, x: Tensor) -> Tensor:
        """(B, H, W, C) input -> (B, H, W, 1) probability maps."""
        return ad.sigmoid(self.unet_logits(x))

    def mirrored(self) -> "ControlModel":
        """Copy with conv kernels flipped along the width axis (for the
        mirror-equivariance check)."""
        arrays = {}
        for k, t in self.params.items():
            arrays[k] = t.data[:, ::-1].copy() if k.endswith(".w") and t.data.ndim == 4 else t.data.copy()
        out = ControlModel(self.cfg, self.dtype)
        return out.set_params(arrays)


def gcn_forward(keypoints: np.ndarray, model: ControlModel) -> np.ndarray:
    """Embed one raw pose (17, 3) -> (D,) without recording gradients."""
    feats = standardize_pose(keypoints)[None]
    with ad.no_grad():
        return model.gcn_embed(feats).data[0]


def unet_forward(input_chw: np.ndarray, model: ControlModel) -> np.ndarray:
    """Channels-first (C, rows, cols) input -> (rows, cols) control map."""
    x = np.asarray(input_chw, dtype=model.dtype)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (C, rows, cols), got {x.shape}")
    with ad.no_grad():
        out = model.unet(ad.constant(x.transpose(1, 2, 0)[None]))
    return out.data[0, :, :, 0]


_RECEPTIVE_CACHE: dict[tuple, int] = {}


def receptive_row_radius(cfg: ModelConfig) -> int:
    """Worst-case row extent of one output pixel's receptive field.

    Measured numerically (float64 gradient support with strictly positive
    weights) so crop-based sweep evaluation stays exact. Cached per
    architecture; the grid size does not change the answer as long as the
    field fits.
    """
    key = (cfg.widths, cfg.in_channels)
    if key in _RECEPTIVE_CACHE:
        return _RECEPTIVE_CACHE[key]
    probe_cfg = ModelConfig(
        rows=max(64, cfg.rows), cols=8, in_channels=1,
        widths=cfg.widths, use_pose_gcn=False,
    )
    model = ControlModel(probe_cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    arrays = {}
    for name, ci, co in _conv_shapes(probe_cfg):
        arrays[f"unet.{name}.w"] = rng.uniform(0.01, 0.02, size=(3, 3, ci, co))
        arrays[f"unet.{name}.b"] = np.full(co, 0.01)
    arrays["unet.head.w"] = rng.uniform(0.01, 0.02, size=(probe_cfg.widths[0], 1))
    arrays["unet.head.b"] = np.zeros(1)
    model.set_params(arrays)

    # all-positive weights on pre-sigmoid logits: gradient support is the
    # exact receptive field (no cancellation, no saturation)
    x = ad.param(np.ones((1, probe_cfg.rows, probe_cfg.cols, 1)))
    out = model.unet_logits(x)
    center = probe_cfg.rows // 2
    seed = np.zeros_like(out.data)
    seed[0, center, probe_cfg.cols // 2, 0] = 1.0
    out.backward(seed=seed)
    touched = np.nonzero(np.abs(x.grad[0, :, :, 0]).sum(axis=1) > 0)[0]
    radius = int(max(center - touched.min(), touched.max() - center))
    _RECEPTIVE_CACHE[key] = radius
    return radius
