"""Receiver-placement sweeps and the positioning recommender.

The sweep asks: with the teammate fixed at their actual spot, what is the
control probability at the target cell if the receiver stood at grid cell
(i, j)? Hypothetical placements use a zeroed velocity and keep the actual
pose. Two exact shortcuts keep the 6272-cell sweep fast on one CPU core:

* stamps truncate to exactly 0 beyond 3 sigma and the U-Net has a finite
  receptive field, so candidates farther than (receptive radius + stamp
  radius) from the target all share one "receiver absent" value;
* each forward pass runs on a pool-aligned row window that provably
  contains everything that can influence the target pixel.

Recommendations follow the largest single-linkage cluster of the n nearest
qualifying cells; the reported position is the mean of the cluster's cell
centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import GameStateSample
from .encoder import Standardization, centered_stamp_patch, gaussian_stamp
from .geometry import CellIndex, CourtGrid, CourtPoint, cell_to_court, court_to_cell
from .infer import Pipeline
from .model import receptive_row_radius


class NoQualifyingCells(ValueError):
    """No grid cell reaches the requested control probability."""


@dataclass
class SweepResult:
    values: np.ndarray  # (rows, cols) P_c per candidate receiver cell
    target: CellIndex
    moved_player: int
    fixed_player: int
    checkpoint_id: str
    n_evaluated: int
    row_window: tuple[int, int]


@dataclass
class CandidateSet:
    cells: list[CellIndex]
    distances_m: list[float]
    threshold: float
    n_requested: int

    @property
    def short(self) -> bool:
        return len(self.cells) < self.n_requested


@dataclass
class Recommendation:
    x_rec: float
    y_rec: float
    achieved_pc: float
    requested_p: float
    cluster: list[CellIndex]
    candidates: CandidateSet
    fallback: bool

    def to_dict(self) -> dict:
        return {
            "x_rec": self.x_rec,
            "y_rec": self.y_rec,
            "achieved_pc": self.achieved_pc,
            "requested_p": self.requested_p,
            "cluster": [[c.i, c.j] for c in self.cluster],
            "candidates": [[c.i, c.j] for c in self.candidates.cells],
            "candidate_distances_m": self.candidates.distances_m,
            "short_candidate_set": self.candidates.short,
            "fallback": self.fallback,
        }


def _np_conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    bsz, h, wdt, ci = x.shape
    co = w.shape[3]
    xp = np.zeros((bsz, h + 2, wdt + 2, ci), x.dtype)
    xp[:, 1 : h + 1, 1 : wdt + 1] = x
    out = np.zeros((bsz, h, wdt, co), x.dtype)
    o2 = out.reshape(-1, co)
    tmp = np.empty_like(o2)
    wk = w.reshape(9, ci, co)
    for k in range(9):
        dy, dx = divmod(k, 3)
        np.matmul(xp[:, dy : dy + h, dx : dx + wdt].reshape(-1, ci), wk[k], out=tmp)
        o2 += tmp
    o2 += b
    return out


def _np_block(x: np.ndarray, arrays: dict, name: str) -> np.ndarray:
    h = _np_conv3(x, arrays[f"unet.{name}a.w"], arrays[f"unet.{name}a.b"])
    np.maximum(h, 0, out=h)
    h = _np_conv3(h, arrays[f"unet.{name}b.w"], arrays[f"unet.{name}b.b"])
    np.maximum(h, 0, out=h)
    return h


def _np_pool(x: np.ndarray) -> np.ndarray:
    bsz, h, wdt, c = x.shape
    return x.reshape(bsz, h // 2, 2, wdt // 2, 2, c).mean(axis=(2, 4))


def _np_up(x: np.ndarray) -> np.ndarray:
    bsz, h, wdt, c = x.shape
    out = np.empty((bsz, 2 * h, 2 * wdt, c), x.dtype)
    out.reshape(bsz, h, 2, wdt, 2, c)[:] = x[:, :, None, :, None, :]
    return out


def _pixel_forward(arrays: dict, x: np.ndarray, t: int, tj: int) -> np.ndarray:
    """Probability at output pixel (t, tj) for a batch of window inputs.

    The encoder runs over the whole window; each decoder stage runs only on
    the rows the next stage consumes (a 3x3 conv corrupts one slice-edge
    row per side unless the edge is a genuine boundary, so every slice
    carries a margin that is computed and then discarded). Matches the full
    forward pass exactly up to GEMM rounding.
    """
    bsz, h, wdt, _ = x.shape
    e1 = _np_block(x, arrays, "enc1")
    e2 = _np_block(_np_pool(e1), arrays, "enc2")
    e3 = _np_block(_np_pool(e2), arrays, "enc3")
    hp = h // 2

    c, d = max(0, t - 2), min(h - 1, t + 2)  # dec1 rows consumed downstream
    p0, p1 = c // 2, d // 2  # dec2 rows feeding up()
    a, b = max(0, p0 - 2), min(hp - 1, p1 + 2)  # dec2 slice incl. margins
    q0, q1 = a // 2, b // 2  # e3 rows feeding up()

    u3 = _np_up(e3[:, q0 : q1 + 1])
    d2in = np.concatenate([u3[:, a - 2 * q0 : b - 2 * q0 + 1], e2[:, a : b + 1]], axis=3)
    d2s = _np_block(d2in, arrays, "dec2")  # rows a..b, valid p0..p1

    u2 = _np_up(d2s[:, p0 - a : p1 - a + 1])
    d1in = np.concatenate([u2[:, c - 2 * p0 : d - 2 * p0 + 1], e1[:, c : d + 1]], axis=3)
    d1s = _np_block(d1in, arrays, "dec1")  # rows c..d, valid at t

    logits = d1s[:, t - c, tj, :] @ arrays["unet.head.w"] + arrays["unet.head.b"]
    return (1.0 / (1.0 + np.exp(-logits)))[:, 0]


def _paste(buf: np.ndarray, patch: np.ndarray, i: int, j: int, chans, scale) -> None:
    """Add scale*patch centered at (i, j) into buf[..., chans], clipped."""
    r = patch.shape[0] // 2
    h, w = buf.shape[0], buf.shape[1]
    a0, a1 = max(0, i - r), min(h, i + r + 1)
    b0, b1 = max(0, j - r), min(w, j + r + 1)
    if a0 >= a1 or b0 >= b1:
        return
    pp = patch[a0 - (i - r) : a1 - (i - r), b0 - (j - r) : b1 - (j - r)]
    if np.ndim(scale) == 0:
        buf[a0:a1, b0:b1, chans] += scale * pp
    else:
        buf[a0:a1, b0:b1, chans] += pp[:, :, None] * np.asarray(scale)[None, None, :]


def sweep_receiver(
    pipeline: Pipeline,
    sample: GameStateSample,
    fixed_player: int = 0,
    chunk_size: int = 96,
) -> SweepResult:
    """Evaluate P_c(target) for every receiver cell, teammate fixed."""
    grid, cfg, model = pipeline.grid, pipeline.encoder_cfg, pipeline.model
    if fixed_player not in (0, 1):
        raise ValueError("fixed_player must be 0 or 1")
    moved = 1 - fixed_player
    dtype = model.dtype
    ti, tj = sample.target.i, sample.target.j
    std = cfg.standardization or Standardization()

    names = cfg.static_channel_names()
    n_static = len(names)
    base = np.zeros((grid.rows, grid.cols, cfg.n_channels), dtype=dtype)

    fixed_stamp = gaussian_stamp(grid, sample.positions[fixed_player], cfg.sigma_cells, dtype=dtype)
    base[:, :, 0] = 0.5 * fixed_stamp
    if cfg.uses_velocity:
        sv = std.velocity(sample.velocities[fixed_player])
        base[:, :, names.index(f"p{fixed_player}_vx")] = sv[0] * fixed_stamp
        base[:, :, names.index(f"p{fixed_player}_vy")] = sv[1] * fixed_stamp
        # moved player's velocity is zeroed for hypothetical placements
    moved_bbox = None
    if cfg.uses_bbox:
        if sample.bboxes is None:
            raise ValueError("variant needs bboxes but the sample has none")
        fh, fw = std.bbox(sample.bboxes[fixed_player])
        base[:, :, names.index(f"p{fixed_player}_bh")] = fh * fixed_stamp
        base[:, :, names.index(f"p{fixed_player}_bw")] = fw * fixed_stamp
        moved_bbox = std.bbox(sample.bboxes[moved])

    emb = None
    if cfg.uses_pose:
        if sample.poses is None:
            raise ValueError("variant needs poses but the sample has none")
        from .model import standardize_pose

        feats = np.stack([standardize_pose(p) for p in sample.poses]).astype(dtype)
        with ad.no_grad():
            emb = pipeline.model.gcn_embed(feats).data  # (2, D)
        d = cfg.pose_embed_dim
        off = n_static + fixed_player * d
        base[:, :, off : off + d] = fixed_stamp[:, :, None] * emb[fixed_player][None, None, :]

    patch = centered_stamp_patch(cfg.sigma_cells, dtype=dtype)
    stamp_radius = patch.shape[0] // 2
    recv_radius = receptive_row_radius(model.cfg)
    cutoff = recv_radius + stamp_radius

    crop_r = recv_radius + 1
    r0 = max(0, 4 * ((ti - crop_r) // 4))
    r1 = min(grid.rows, 4 * math.ceil((ti + crop_r + 1) / 4))
    window = np.ascontiguousarray(base[r0:r1])
    t_local = ti - r0

    zero_vel = std.velocity((0.0, 0.0)) if cfg.uses_velocity else None

    def moving_channel_writes(buf2d, ci, cj):
        _paste(buf2d, patch, ci, cj, 0, 0.5)
        if zero_vel is not None:
            # standardized zero velocity (mean subtraction) is not raw zero
            _paste(buf2d, patch, ci, cj, names.index(f"p{moved}_vx"), zero_vel[0])
            _paste(buf2d, patch, ci, cj, names.index(f"p{moved}_vy"), zero_vel[1])
        if emb is not None:
            d = cfg.pose_embed_dim
            off = n_static + moved * d
            _paste(buf2d, patch, ci, cj, slice(off, off + d), emb[moved])
        if moved_bbox is not None:
            _paste(buf2d, patch, ci, cj, names.index(f"p{moved}_bh"), moved_bbox[0])
            _paste(buf2d, patch, ci, cj, names.index(f"p{moved}_bw"), moved_bbox[1])

    arrays = model.param_arrays()
    far_value = float(_pixel_forward(arrays, window[None], t_local, tj)[0])

    cand = [
        (i, j)
        for i in range(max(0, ti - cutoff), min(grid.rows, ti + cutoff + 1))
        for j in range(max(0, tj - cutoff), min(grid.cols, tj + cutoff + 1))
    ]
    values = np.full((grid.rows, grid.cols), far_value, dtype=np.float32)
    buf = np.empty((min(chunk_size, len(cand)),) + window.shape, dtype=dtype)
    for k in range(0, len(cand), chunk_size):
        block = cand[k : k + chunk_size]
        buf[: len(block)] = window
        for b, (ci, cj) in enumerate(block):
            moving_channel_writes(buf[b], ci - r0, cj)
        out = _pixel_forward(arrays, buf[: len(block)], t_local, tj)
        for b, (ci, cj) in enumerate(block):
            values[ci, cj] = out[b]

    if not np.isfinite(values).all():
        raise ad.NonFiniteValue("sweep produced non-finite probabilities")
    return SweepResult(
        values=values,
        target=sample.target,
        moved_player=moved,
        fixed_player=fixed_player,
        checkpoint_id=pipeline.checkpoint_id,
        n_evaluated=len(cand) + 1,
        row_window=(r0, r1),
    )


def select_candidates(
    sweep: SweepResult, actual: CourtPoint, p: float, n: int = 5, grid: CourtGrid | None = None
) -> CandidateSet:
    """The n qualifying cells nearest the actual position (ties: row, col)."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    grid = grid or CourtGrid()
    qual = np.argwhere(sweep.values >= p)
    if qual.size == 0:
        raise NoQualifyingCells(f"no cell reaches P_c >= {p}")
    cx = (qual[:, 0] + 0.5) * grid.cell_length
    cy = (qual[:, 1] + 0.5) * grid.cell_width
    dist = np.hypot(cx - actual.x, cy - actual.y)
    order = sorted(range(len(qual)), key=lambda k: (dist[k], int(qual[k, 0]), int(qual[k, 1])))
    picked = order[:n]
    return CandidateSet(
        cells=[CellIndex(int(qual[k, 0]), int(qual[k, 1])) for k in picked],
        distances_m=[float(dist[k]) for k in picked],
        threshold=p,
        n_requested=n,
    )


def hierarchical_cluster(cells: list[CellIndex], cut_distance: float = 3.0) -> list[list[CellIndex]]:
    """Agglomerative single-linkage clustering in cell units.

    Merges while the smallest inter-cluster distance is <= cut_distance;
    ties resolve to the lowest cluster indices, so the merge order is
    deterministic.
    """
    if not cells:
        raise ValueError("need at least one cell")
    clusters: list[list[int] | None] = [[k] for k in range(len(cells))]
    pts = np.array([[c.i, c.j] for c in cells], dtype=float)

    def linkage(a: list[int], b: list[int]) -> float:
        return min(float(np.hypot(*(pts[i] - pts[j]))) for i in a for j in b)

    while True:
        best = None
        for a in range(len(clusters)):
            if clusters[a] is None:
                continue
            for b in range(a + 1, len(clusters)):
                if clusters[b] is None:
                    continue
                d = linkage(clusters[a], clusters[b])
                if best is None or d < best[0] - 1e-12:
                    best = (d, a, b)
        if best is None or best[0] > cut_distance:
            break
        _, a, b = best
        clusters[a] = clusters[a] + clusters[b]
        clusters[b] = None

    out = []
    for members in clusters:
        if members is not None:
            group = sorted((cells[k] for k in members), key=lambda c: (c.i, c.j))
            out.append(group)
    out.sort(key=lambda g: (g[0].i, g[0].j))
    return out


def recommend(
    sweep: SweepResult,
    actual: CourtPoint,
    p: float,
    n: int = 5,
    cut_distance: float = 3.0,
    grid: CourtGrid | None = None,
) -> Recommendation:
    """Centroid of the largest cluster of qualifying candidate cells."""
    grid = grid or CourtGrid()
    candidates = select_candidates(sweep, actual, p, n, grid)
    clusters = hierarchical_cluster(candidates.cells, cut_distance)

    def centroid(c):
        pts = [cell_to_court(grid, cell) for cell in c]
        return (
            float(np.mean([q.x for q in pts])),
            float(np.mean([q.y for q in pts])),
        )

    def sort_key(c):
        cx, cy = centroid(c)
        return (-len(c), math.hypot(cx - actual.x, cy - actual.y), c[0].i, c[0].j)

    largest = min(clusters, key=sort_key)
    x_rec, y_rec = centroid(largest)
    rec_cell = court_to_cell(grid, CourtPoint(x_rec, y_rec))
    achieved = float(sweep.values[rec_cell.i, rec_cell.j])
    fallback = False
    if achieved < p - 0.05:
        # centroid of a non-convex qualifying set may fall below p; fall
        # back to the member nearest the centroid
        member = min(
            largest,
            key=lambda c: (
                math.hypot((c.i + 0.5) * grid.cell_length - x_rec, (c.j + 0.5) * grid.cell_width - y_rec),
                c.i,
                c.j,
            ),
        )
        ctr = cell_to_court(grid, member)
        x_rec, y_rec = ctr.x, ctr.y
        achieved = float(sweep.values[member.i, member.j])
        fallback = True
    return Recommendation(
        x_rec=x_rec,
        y_rec=y_rec,
        achieved_pc=achieved,
        requested_p=p,
        cluster=largest,
        candidates=candidates,
        fallback=fallback,
    )


def recommend_both_levels(
    pipeline: Pipeline,
    sample: GameStateSample,
    fixed_player: int = 0,
    n: int = 5,
    levels: tuple[float, ...] = (0.75, 0.95),
    cut_distance: float = 3.0,
) -> dict[float, Recommendation]:
    """One sweep, a recommendation per threshold; unreachable levels are
    omitted (empty result raises NoQualifyingCells)."""
    sweep = sweep_receiver(pipeline, sample, fixed_player)
    actual = sample.positions[sweep.moved_player]
    out = {}
    for p in levels:
        try:
            out[p] = recommend(sweep, actual, p, n, cut_distance, pipeline.grid)
        except NoQualifyingCells:
            continue
    if not out:
        raise NoQualifyingCells(f"no cell reaches any of the levels {levels}")
    return out
