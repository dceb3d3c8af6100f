"""Loss functions, Adam, the training loop, and the ablation harness.

The objective is a focal term evaluated at the single supervised pixel plus
a weighted L1 spatial-continuity penalty over the whole map. The continuity
sum deliberately keeps the source index ranges (anchors exclude the last
row and column), so boundary differences are not counted.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import GameStateSample, split_dataset
from .encoder import (
    EncodedBatch,
    EncoderConfig,
    collate,
    encode_sample,
    fit_standardization,
    flip_encoded,
)
from .geometry import CellIndex, CourtGrid
from .infer import build_model_config, forward_batch
from .model import ControlModel

P_CLAMP = 1e-7


class OutOfBounds(IndexError):
    pass


class MapTooSmall(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    """Training hit NaN/Inf; message carries the offending batch."""


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.8
    gamma: float = 3.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1 or self.gamma < 0:
            raise ValueError("need alpha in (0,1] and gamma >= 0")


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.03
    focal: FocalConfig = field(default_factory=FocalConfig)

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-6
    epochs: int = 30
    batch: int = 16
    seed: int = 0
    precision: str = "f32"  # "f32" | "f64"
    flip: bool = True
    variant: str = "full"
    val_fraction: float = 0.1
    widths: tuple[int, int, int] = (4, 8, 16)
    gcn_hidden: int = 16
    pose_embed_dim: int = 4
    sigma_cells: float = 3.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1:
            raise ValueError("need lr > 0, batch >= 1, epochs >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


# -- losses -------------------------------------------------------------------


def focal_loss(p: float, y: int, cfg: FocalConfig = FocalConfig()) -> float:
    """-alpha * (1 - p_t)^gamma * log(p_t), with p clamped away from {0, 1}."""
    p = min(max(float(p), P_CLAMP), 1.0 - P_CLAMP)
    pt = p if y == 1 else 1.0 - p
    return -cfg.alpha * (1.0 - pt) ** cfg.gamma * math.log(pt)


def focal_at_target(control_map: np.ndarray, loc, y: int, cfg: FocalConfig = FocalConfig()) -> float:
    """Focal loss at exactly one pixel; nothing else enters."""
    i, j = (loc.i, loc.j) if isinstance(loc, CellIndex) else (loc[0], loc[1])
    rows, cols = control_map.shape
    if not (0 <= i < rows and 0 <= j < cols):
        raise OutOfBounds(f"target ({i}, {j}) outside {rows}x{cols} map")
    return focal_loss(float(control_map[i, j]), y, cfg)


def continuity_loss(control_map: np.ndarray) -> float:
    """L1 neighbor differences; anchors exclude the last row and column."""
    m = np.asarray(control_map, dtype=float)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise MapTooSmall(f"need at least 2x2, got {m.shape}")
    dcol = np.abs(m[:-1, 1:] - m[:-1, :-1]).sum()
    drow = np.abs(m[1:, :-1] - m[:-1, :-1]).sum()
    return float(dcol + drow)


def total_loss(control_map: np.ndarray, loc, y: int, cfg: LossConfig = LossConfig()) -> float:
    return focal_at_target(control_map, loc, y, cfg.focal) + cfg.mu * continuity_loss(control_map)


def batch_loss_graph(maps: ad.Tensor, batch: EncodedBatch, cfg: LossConfig) -> ad.Tensor:
    """Mean over the batch of focal-at-target + mu * continuity, on the tape."""
    p = ad.gather_pixels(maps, batch.rows_idx, batch.cols_idx)
    p = ad.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
    y = batch.labels.astype(maps.dtype)
    pt = ad.add(ad.mul(p, ad.constant(y)), ad.mul(ad.rsub_const(1.0, p), ad.constant(1.0 - y)))
    g = cfg.focal.gamma
    if g == 0:
        fl = ad.scale(ad.log(pt), -cfg.focal.alpha)
    else:
        fl = ad.scale(ad.mul(ad.power(ad.rsub_const(1.0, pt), g), ad.log(pt)), -cfg.focal.alpha)
    per_sample = ad.add(fl, ad.scale(ad.continuity_sums(maps), cfg.mu))
    return ad.tmean(per_sample)


def batch_loss_values(maps: np.ndarray, batch: EncodedBatch, cfg: LossConfig) -> np.ndarray:
    """Same objective computed without the tape (validation metric)."""
    p = maps[np.arange(len(batch)), batch.rows_idx, batch.cols_idx]
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    y = batch.labels
    pt = np.where(y > 0.5, p, 1.0 - p)
    fl = -cfg.focal.alpha * (1.0 - pt) ** cfg.focal.gamma * np.log(pt)
    dcol = np.abs(maps[:, :-1, 1:] - maps[:, :-1, :-1]).sum(axis=(1, 2))
    drow = np.abs(maps[:, 1:, :-1] - maps[:, :-1, :-1]).sum(axis=(1, 2))
    return fl + cfg.mu * (dcol + drow)


# -- Adam ----------------------------------------------------------------------


def adam_step(
    theta: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], dict]:
    """One bias-corrected Adam update; pure, returns new theta and state."""
    if state is None:
        state = {
            "t": 0,
            "m": {k: np.zeros_like(v) for k, v in theta.items()},
            "v": {k: np.zeros_like(v) for k, v in theta.items()},
        }
    if set(theta) != set(grads):
        raise ad.ShapeMismatch("gradient keys do not match parameters")
    t = state["t"] + 1
    new_theta, new_m, new_v = {}, {}, {}
    for k in sorted(theta):
        if theta[k].shape != grads[k].shape:
            raise ad.ShapeMismatch(f"{k}: param {theta[k].shape} vs grad {grads[k].shape}")
        g = grads[k]
        m = beta1 * state["m"][k] + (1 - beta1) * g
        v = beta2 * state["v"][k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_theta[k] = theta[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_theta, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """In-place optimizer over the model's parameter tensors."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    l1_all: float
    l1_hit: float | None
    l1_drop: float | None
    n_hit: int
    n_drop: int
    curve: list[dict] | None = None
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_l1(model: ControlModel, encoder_cfg: EncoderConfig, grid: CourtGrid,
                samples: list[GameStateSample], batch_size: int = 64) -> EvalReport:
    """Mean |y - p(target)| overall and per class."""
    if not samples:
        raise ValueError("test set is empty")
    errs = np.empty(len(samples))
    labels = np.array([s.label for s in samples])
    with ad.no_grad(), ad.finite_checks(False):
        for k in range(0, len(samples), batch_size):
            chunk = samples[k : k + batch_size]
            batch = collate([encode_sample(s, encoder_cfg, grid, dtype=model.dtype) for s in chunk])
            maps = forward_batch(model, batch).data[..., 0]
            p = maps[np.arange(len(chunk)), batch.rows_idx, batch.cols_idx]
            errs[k : k + len(chunk)] = np.abs(batch.labels - p)
    hit = errs[labels == 1]
    drop = errs[labels == 0]
    return EvalReport(
        l1_all=float(errs.mean()),
        l1_hit=float(hit.mean()) if hit.size else None,
        l1_drop=float(drop.mean()) if drop.size else None,
        n_hit=int(hit.size),
        n_drop=int(drop.size),
    )


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: ControlModel
    encoder_cfg: EncoderConfig
    report: EvalReport
    train_cfg: TrainConfig
    loss_cfg: LossConfig
    grid: CourtGrid


def _stratified_indices(labels: list[int], fraction: float, rng) -> set[int]:
    picked = set()
    for label in (0, 1):
        idx = [i for i, l in enumerate(labels) if l == label]
        n = math.floor(fraction * len(idx))
        perm = rng.permutation(len(idx))
        picked.update(idx[k] for k in perm[:n])
    return picked


def train(
    samples: list[GameStateSample],
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    grid: CourtGrid | None = None,
    log=None,
) -> TrainResult:
    """Train on samples (a seeded 10% validation slice picks the best epoch)."""
    if not samples:
        raise ValueError("training set is empty")
    grid = grid or CourtGrid()
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.dtype

    val_pick = _stratified_indices([s.label for s in samples], cfg.val_fraction, rng)
    train_samples = [s for i, s in enumerate(samples) if i not in val_pick]
    val_samples = [s for i, s in enumerate(samples) if i in val_pick]
    if not train_samples:
        train_samples, val_samples = list(samples), []

    std = fit_standardization(train_samples)
    encoder_cfg = EncoderConfig(
        variant=cfg.variant,
        sigma_cells=cfg.sigma_cells,
        pose_embed_dim=cfg.pose_embed_dim,
        flip_enabled=cfg.flip,
        standardization=std,
    )

    model_cfg = build_model_config(grid, encoder_cfg, cfg.widths, cfg.gcn_hidden)
    model = ControlModel(model_cfg, dtype=dtype).init_params(cfg.seed)
    opt = Adam(model.params, cfg.lr)

    curve = []
    best = (math.inf, -1, None)
    n = len(train_samples)
    with ad.finite_checks(False):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for bi, k in enumerate(range(0, n, cfg.batch)):
                idx = order[k : k + cfg.batch]
                # encoded lazily: caching a full-grid dataset would cost GBs
                items = [encode_sample(train_samples[i], encoder_cfg, grid, dtype=dtype) for i in idx]
                if cfg.flip:
                    items += [flip_encoded(e, encoder_cfg, grid) for e in list(items)]
                batch = collate(items)
                maps = forward_batch(model, batch)
                loss = batch_loss_graph(maps, batch, loss_cfg)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise NonFiniteLoss(f"epoch {epoch} batch {bi}: loss={val}")
                loss.backward()
                opt.step()
                model.zero_grad()
                total += val * len(items)
            denom = n * (2 if cfg.flip else 1)
            train_loss = total / denom
            val_loss = (
                _mean_loss(model, val_samples, encoder_cfg, grid, loss_cfg, cfg.batch)
                if val_samples
                else train_loss
            )
            curve.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
            if log:
                log(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f}")
            if val_loss < best[0]:
                best = (val_loss, epoch, {k: t.data.copy() for k, t in model.params.items()})

    if best[2] is not None:
        model.set_params(best[2])
    report = EvalReport(
        l1_all=math.nan, l1_hit=None, l1_drop=None, n_hit=0, n_drop=0,
        curve=curve, best_epoch=best[1],
    )
    return TrainResult(model, encoder_cfg, report, cfg, loss_cfg, grid)


def _mean_loss(model: ControlModel, samples: list, encoder_cfg: EncoderConfig,
               grid: CourtGrid, loss_cfg: LossConfig, batch_size: int) -> float:
    total = 0.0
    with ad.no_grad():
        for k in range(0, len(samples), batch_size):
            enc = [encode_sample(s, encoder_cfg, grid, dtype=model.dtype) for s in samples[k : k + batch_size]]
            batch = collate(enc)
            maps = forward_batch(model, batch)
            total += float(batch_loss_values(maps.data[..., 0], batch, loss_cfg).sum())
    return total / len(samples)


# -- ablation harness -----------------------------------------------------------------


@dataclass
class AblationResult:
    """Per-variant, per-seed evaluation reports plus the mean table."""

    variants: list[str]
    seeds: list[int]
    reports: dict  # variant -> {seed -> EvalReport}

    def mean_l1(self, variant: str, key: str = "l1_all") -> float:
        vals = [getattr(self.reports[variant][s], key) for s in self.seeds]
        return float(np.mean([v for v in vals if v is not None]))

    def to_dict(self) -> dict:
        return {
            "variants": self.variants,
            "seeds": self.seeds,
            "reports": {
                v: {str(s): self.reports[v][s].to_dict() for s in self.seeds}
                for v in self.variants
            },
            "mean_l1_all": {v: self.mean_l1(v) for v in self.variants},
        }


def ablation_run(
    samples: list[GameStateSample],
    variants: list[str],
    seeds: list[int],
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    grid: CourtGrid | None = None,
    hit_train_ratio: float = 0.8,
    drop_train_ratio: float = 0.5,
    log=None,
) -> AblationResult:
    """Train every variant on identical seeded splits and compare L1."""
    if not variants:
        raise ValueError("variant list is empty")
    grid = grid or CourtGrid()
    reports: dict = {v: {} for v in variants}
    for seed in seeds:
        train_set, test_set = split_dataset(samples, hit_train_ratio, drop_train_ratio, seed)
        for variant in variants:
            run_cfg = dataclasses.replace(cfg, variant=variant, seed=seed)
            if log:
                log(f"ablation: variant={variant} seed={seed} ({len(train_set)} train)")
            result = train(train_set, run_cfg, loss_cfg, grid)
            reports[variant][seed] = evaluate_l1(result.model, result.encoder_cfg, grid, test_set)
    return AblationResult(list(variants), list(seeds), reports)
