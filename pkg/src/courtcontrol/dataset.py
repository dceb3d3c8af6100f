"""Annotation CSV parsing, supervised sample extraction, and synthetic data.

Real data arrives as per-rally CSV files (shuttlecock events, player boxes,
optional poses) plus a calibration file mapping image pixels to court
meters. The synthetic generator replaces the external dataset for tests and
benchmarks: a documented logistic reachability oracle assigns each target a
control probability and labels are drawn from it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import CellIndex, CourtGrid, CourtPoint, Homography, apply_homography, court_to_cell

SHUTTLE_STATUSES = ("Frying", "Hit", "Fault", "Drop", "Misjudge")
_STATUS_ALIASES = {"Flying": "Frying"}
N_POSE_FIELDS = 2 + 17 * 3


class ParseError(ValueError):
    def __init__(self, path, line: int, column: int | None, reason: str):
        self.path = str(path)
        self.line = line
        self.column = column
        self.reason = reason
        where = f"{path}:{line}" + (f":{column}" if column is not None else "")
        super().__init__(f"{where}: {reason}")


class DuplicateFrame(ParseError):
    pass


class AmbiguousReceiver(ValueError):
    """No player close enough to the shuttle to attribute the event."""


class InsufficientFrames(ValueError):
    """Track too short to estimate a velocity."""


@dataclass(frozen=True)
class ShuttleEvent:
    frame: int
    visibility: int
    x: float
    y: float
    status: str


@dataclass(frozen=True)
class PlayerBox:
    frame: int
    player_id: int
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class PoseRow:
    frame: int
    player_id: int
    keypoints: tuple  # 17 triples (x, y, confidence)

    def array(self) -> np.ndarray:
        return np.array(self.keypoints, dtype=float)


@dataclass
class GameStateSample:
    """One supervised example: receiving-team state plus the target cell."""

    sample_id: str
    rally_id: str
    frame: int
    side: str  # "A" (rows 0..rows/2-1) or "B"
    positions: tuple[CourtPoint, CourtPoint]
    velocities: tuple[tuple[float, float], tuple[float, float]]
    target: CellIndex
    label: int
    poses: tuple[np.ndarray, np.ndarray] | None = None  # (17, 3) back-view px
    bboxes: tuple[tuple[float, float], tuple[float, float]] | None = None  # (h, w) px
    oracle: dict | None = None  # generator truth: p_star, true velocities
    game_id: str | None = None


# -- CSV parsing -----------------------------------------------------------


def _rows(path):
    with open(path) as f:
        lines = f.read().splitlines()
    start = 0
    if lines:
        first = lines[0].split(",")[0].strip()
        try:
            int(first)
        except ValueError:
            start = 1  # header
    for lineno in range(start, len(lines)):
        line = lines[lineno]
        if line.strip():
            yield lineno + 1, line


def parse_shuttle_csv(path) -> list[ShuttleEvent]:
    """`frame,visibility,x,y,status` rows; frames strictly increasing."""
    events = []
    last_frame = -1
    for lineno, line in _rows(path):
        parts = line.split(",")
        if len(parts) != 5:
            raise ParseError(path, lineno, None, f"expected 5 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            visibility = int(parts[1])
            x = float(parts[2])
            y = float(parts[3])
        except ValueError as e:
            raise ParseError(path, lineno, None, str(e)) from None
        status = _STATUS_ALIASES.get(parts[4].strip(), parts[4].strip())
        if frame < 0:
            raise ParseError(path, lineno, 1, "negative frame number")
        if frame == last_frame:
            raise DuplicateFrame(path, lineno, 1, f"duplicate frame {frame}")
        if frame < last_frame:
            raise ParseError(path, lineno, 1, f"frames must increase ({frame} after {last_frame})")
        if visibility not in (0, 1):
            raise ParseError(path, lineno, 2, f"visibility must be 0/1, got {visibility}")
        if status not in SHUTTLE_STATUSES:
            raise ParseError(path, lineno, 5, f"unknown status {parts[4].strip()!r}")
        events.append(ShuttleEvent(frame, visibility, x, y, status))
        last_frame = frame
    return events


def serialize_shuttle_csv(events: list[ShuttleEvent]) -> str:
    return "".join(
        f"{e.frame},{e.visibility},{e.x!r},{e.y!r},{e.status}\n" for e in events
    )


def parse_player_csv(path) -> list[PlayerBox]:
    """`frame,player_id,x,y,w,h` box rows (top view, px)."""
    boxes = []
    seen = set()
    for lineno, line in _rows(path):
        parts = line.split(",")
        if len(parts) != 6:
            raise ParseError(path, lineno, None, f"expected 6 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            pid = int(parts[1])
            x, y, w, h = (float(p) for p in parts[2:])
        except ValueError as e:
            raise ParseError(path, lineno, None, str(e)) from None
        if frame < 0:
            raise ParseError(path, lineno, 1, "negative frame number")
        if pid not in (0, 1, 2, 3):
            raise ParseError(path, lineno, 2, f"player_id must be 0..3, got {pid}")
        if w <= 0 or h <= 0:
            raise ParseError(path, lineno, 5, "nonpositive box")
        if (frame, pid) in seen:
            raise DuplicateFrame(path, lineno, 1, f"duplicate box for player {pid} at frame {frame}")
        seen.add((frame, pid))
        boxes.append(PlayerBox(frame, pid, x, y, w, h))
    return boxes


def serialize_player_csv(boxes: list[PlayerBox]) -> str:
    return "".join(
        f"{b.frame},{b.player_id},{b.x!r},{b.y!r},{b.w!r},{b.h!r}\n" for b in boxes
    )


def parse_pose_csv(path) -> list[PoseRow]:
    """`frame,player_id,kp0x,kp0y,kp0c,...,kp16x,kp16y,kp16c` rows."""
    rows = []
    seen = set()
    for lineno, line in _rows(path):
        parts = line.split(",")
        if len(parts) != N_POSE_FIELDS:
            raise ParseError(
                path, lineno, None,
                f"keypoint count: expected {N_POSE_FIELDS} fields (17 keypoints), got {len(parts)}",
            )
        try:
            frame = int(parts[0])
            pid = int(parts[1])
            vals = [float(p) for p in parts[2:]]
        except ValueError as e:
            raise ParseError(path, lineno, None, str(e)) from None
        if pid not in (0, 1, 2, 3):
            raise ParseError(path, lineno, 2, f"player_id must be 0..3, got {pid}")
        kps = tuple((vals[k], vals[k + 1], vals[k + 2]) for k in range(0, 51, 3))
        for k, (_, _, c) in enumerate(kps):
            if not 0.0 <= c <= 1.0:
                raise ParseError(path, lineno, 2 + 3 * k + 3, f"confidence {c} outside [0,1]")
        if (frame, pid) in seen:
            raise DuplicateFrame(path, lineno, 1, f"duplicate pose for player {pid} at frame {frame}")
        seen.add((frame, pid))
        rows.append(PoseRow(frame, pid, kps))
    return rows


def serialize_pose_csv(rows: list[PoseRow]) -> str:
    out = []
    for r in rows:
        flat = ",".join(f"{v!r}" for kp in r.keypoints for v in kp)
        out.append(f"{r.frame},{r.player_id},{flat}\n")
    return "".join(out)


# -- tracks and sample extraction -------------------------------------------


class PlayerTrack:
    """Per-player court positions derived from boxes + calibration."""

    def __init__(self, player_id: int, positions: dict[int, CourtPoint]):
        self.player_id = player_id
        self.positions = positions

    @classmethod
    def from_boxes(cls, boxes: list[PlayerBox], player_id: int, calibration: Homography | None):
        pos = {}
        for b in boxes:
            if b.player_id != player_id:
                continue
            cx, cy = b.center
            if calibration is not None:
                cx, cy = apply_homography(calibration, (cx, cy))
            pos[b.frame] = CourtPoint(cx, cy)
        return cls(player_id, pos)


def compute_velocity(track: PlayerTrack, frame: int, fps: float = 30.0, window: int = 2) -> tuple[float, float]:
    """Central difference over +-window frames, one-sided at rally edges."""
    if len(track.positions) < 2:
        raise InsufficientFrames(f"player {track.player_id} has {len(track.positions)} frames")
    lo, hi = frame - window, frame + window
    if lo in track.positions and hi in track.positions:
        a, b, dt = track.positions[lo], track.positions[hi], 2 * window
    elif frame in track.positions and hi in track.positions:
        a, b, dt = track.positions[frame], track.positions[hi], window
    elif lo in track.positions and frame in track.positions:
        a, b, dt = track.positions[lo], track.positions[frame], window
    else:
        raise InsufficientFrames(
            f"player {track.player_id}: no position pair around frame {frame}"
        )
    return ((b.x - a.x) * fps / dt, (b.y - a.y) * fps / dt)


@dataclass
class Rally:
    rally_id: str
    shuttle: list[ShuttleEvent]
    boxes: list[PlayerBox]
    poses: list[PoseRow] | None = None
    game_id: str | None = None


def _side_of_row(row: int, grid: CourtGrid) -> str:
    return "A" if row < grid.rows // 2 else "B"


def extract_samples(
    rally: Rally,
    calibration: Homography | None,
    grid: CourtGrid,
    association_radius: float = 1.0,
    fps: float = 30.0,
    include_prepare_states: bool = False,
) -> list[GameStateSample]:
    """One positive sample per Hit (team attributed by player proximity),
    one negative per Drop (team on the shuttle's side).

    With include_prepare_states, every Hit additionally yields an unlabeled
    (label=-1) state for the non-hitting team at the same frame: their
    positioning at the moment the opponents hit, which the coverage
    analyses need. Unlabeled states never enter training.
    """
    tracks = {pid: PlayerTrack.from_boxes(rally.boxes, pid, calibration) for pid in range(4)}
    pose_by_frame: dict[tuple[int, int], PoseRow] = {}
    for pr in rally.poses or []:
        pose_by_frame[(pr.frame, pr.player_id)] = pr
    box_by_frame = {(b.frame, b.player_id): b for b in rally.boxes}

    samples = []
    for ev in rally.shuttle:
        if ev.status not in ("Hit", "Drop"):
            continue
        sx, sy = ev.x, ev.y
        if calibration is not None:
            sx, sy = apply_homography(calibration, (sx, sy))
        shuttle_pt = CourtPoint(sx, sy)
        target = court_to_cell(grid, shuttle_pt)

        if ev.status == "Hit":
            dists = {}
            for pid, tr in tracks.items():
                pos = tr.positions.get(ev.frame)
                if pos is not None:
                    dists[pid] = math.hypot(pos.x - sx, pos.y - sy)
            if not dists or min(dists.values()) > association_radius:
                raise AmbiguousReceiver(
                    f"rally {rally.rally_id} frame {ev.frame}: no player within "
                    f"{association_radius} m of the shuttle"
                )
            nearest = min(dists, key=lambda pid: (dists[pid], pid))
            team = nearest // 2
            label = 1
        else:
            side = _side_of_row(target.i, grid)
            team_sides = {}
            for team_id in (0, 1):
                xs = [
                    tracks[p].positions[ev.frame].x
                    for p in (2 * team_id, 2 * team_id + 1)
                    if ev.frame in tracks[p].positions
                ]
                if xs:
                    team_sides[team_id] = "A" if float(np.mean(xs)) < grid.length_m / 2 else "B"
            matching = [t for t, s in team_sides.items() if s == side]
            if len(matching) != 1:
                raise AmbiguousReceiver(
                    f"rally {rally.rally_id} frame {ev.frame}: cannot attribute drop side {side}"
                )
            team = matching[0]
            label = 0

        def team_state(team_id: int, label: int, suffix: str = "") -> GameStateSample:
            pids = (2 * team_id, 2 * team_id + 1)
            positions = []
            velocities = []
            for pid in pids:
                pos = tracks[pid].positions.get(ev.frame)
                if pos is None:
                    raise AmbiguousReceiver(
                        f"rally {rally.rally_id} frame {ev.frame}: player {pid} has no box"
                    )
                positions.append(pos)
                velocities.append(compute_velocity(tracks[pid], ev.frame, fps=fps))
            poses = None
            if rally.poses is not None:
                rows = [pose_by_frame.get((ev.frame, pid)) for pid in pids]
                if all(r is not None for r in rows):
                    poses = tuple(r.array() for r in rows)
            bboxes = None
            box_pair = [box_by_frame.get((ev.frame, pid)) for pid in pids]
            if all(b is not None for b in box_pair):
                bboxes = tuple((b.h, b.w) for b in box_pair)
            team_x = float(np.mean([p.x for p in positions]))
            side = "A" if team_x < grid.length_m / 2 else "B"
            return GameStateSample(
                sample_id=f"{rally.rally_id}:{ev.frame}{suffix}",
                rally_id=rally.rally_id,
                frame=ev.frame,
                side=_side_of_row(target.i, grid) if label >= 0 else side,
                positions=tuple(positions),
                velocities=tuple(velocities),
                target=target,
                label=label,
                poses=poses,
                bboxes=bboxes,
                game_id=rally.game_id,
            )

        samples.append(team_state(team, label))
        if include_prepare_states and ev.status == "Hit":
            samples.append(team_state(1 - team, -1, suffix=":prep"))
    return samples


def split_dataset(
    samples: list[GameStateSample],
    hit_train_ratio: float = 0.8,
    drop_train_ratio: float = 0.5,
    seed: int = 0,
) -> tuple[list[GameStateSample], list[GameStateSample]]:
    """Stratified train/test split: floor of ratio per stratum goes to
    train, the remainder to test. Deterministic given the seed."""
    if not 0 <= hit_train_ratio <= 1 or not 0 <= drop_train_ratio <= 1:
        raise ValueError("split ratios must be in [0, 1]")
    rng = np.random.default_rng(seed)
    train_idx = []
    for label, ratio in ((1, hit_train_ratio), (0, drop_train_ratio)):
        idx = [i for i, s in enumerate(samples) if s.label == label]
        n_train = math.floor(ratio * len(idx))
        perm = rng.permutation(len(idx))
        train_idx.extend(idx[k] for k in perm[:n_train])
    picked = set(train_idx)
    train = [s for i, s in enumerate(samples) if i in picked]
    test = [s for i, s in enumerate(samples) if i not in picked]
    return train, test


# -- synthetic generator -----------------------------------------------------


@dataclass(frozen=True)
class SyntheticOracle:
    """Logistic reachability: P* = sigmoid((reach - d_eff) / softness) with
    d_eff the min over receivers of distance minus a velocity credit."""

    reach_m: float = 1.5
    softness_m: float = 0.3
    velocity_gain: float = 0.15  # seconds of velocity projected toward the target

    def effective_distance(self, pos: CourtPoint, vel: tuple[float, float], target: CourtPoint) -> float:
        dx, dy = target.x - pos.x, target.y - pos.y
        d = math.hypot(dx, dy)
        if d < 1e-9:
            proj = 0.0
        else:
            proj = (vel[0] * dx + vel[1] * dy) / d
        return d - self.velocity_gain * proj

    def p_star(
        self,
        positions: tuple[CourtPoint, CourtPoint],
        velocities,
        target: CourtPoint,
    ) -> float:
        d_eff = min(
            self.effective_distance(p, v, target) for p, v in zip(positions, velocities)
        )
        return 1.0 / (1.0 + math.exp((d_eff - self.reach_m) / self.softness_m))

    def p_star_map(self, positions, velocities, grid: CourtGrid) -> np.ndarray:
        """Oracle evaluated at every cell center -> (rows, cols)."""
        ii, jj = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
        cx = (ii + 0.5) * grid.cell_length
        cy = (jj + 0.5) * grid.cell_width
        d_eff = None
        for p, v in zip(positions, velocities):
            dx, dy = cx - p.x, cy - p.y
            d = np.hypot(dx, dy)
            with np.errstate(invalid="ignore", divide="ignore"):
                proj = np.where(d < 1e-9, 0.0, (v[0] * dx + v[1] * dy) / np.where(d < 1e-9, 1.0, d))
            de = d - self.velocity_gain * proj
            d_eff = de if d_eff is None else np.minimum(d_eff, de)
        return 1.0 / (1.0 + np.exp((d_eff - self.reach_m) / self.softness_m))


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the generator around the oracle.

    Observed velocities, poses, and boxes are noisy views of the true
    velocity the oracle uses, so feature ablations stay distinguishable:
    velocity is the cleanest view, the pose leans encode both components
    more noisily, and boxes stretch with speed only.
    """

    velocity_noise: float = 0.45  # m/s on observed velocities
    pose_lean_px_y: float = 14.0  # lateral shoulder shift per m/s of vy
    pose_lean_px_x: float = 11.0  # vertical upper-body shift per m/s of vx
    pose_noise_px: float = 9.0  # noise on the lean joints
    pose_jitter_px: float = 1.5  # iid noise on every joint
    bbox_stretch_px: float = 8.0  # box growth per m/s along each axis
    bbox_noise_px: float = 7.0
    near_fraction: float = 0.88  # targets placed near a receiver
    near_sigma_m: float = 0.6
    min_separation_m: float = 1.2
    max_speed: float = 3.0


# back-view template skeleton (px, y grows downward), roughly 1.7 m tall
_POSE_TEMPLATE = np.array([
    (0.0, -62.0),  # nose
    (-6.0, -66.0), (6.0, -66.0),  # eyes
    (-12.0, -62.0), (12.0, -62.0),  # ears
    (-24.0, -44.0), (24.0, -44.0),  # shoulders
    (-34.0, -14.0), (34.0, -14.0),  # elbows
    (-38.0, 12.0), (38.0, 12.0),  # wrists
    (-15.0, 12.0), (15.0, 12.0),  # hips
    (-17.0, 52.0), (17.0, 52.0),  # knees
    (-18.0, 92.0), (18.0, 92.0),  # ankles
])
_UPPER_BODY = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]


def _synth_pose(rng, v_true: tuple[float, float], cfg: SynthConfig) -> np.ndarray:
    kp = _POSE_TEMPLATE.copy()
    lean_y = cfg.pose_lean_px_y * v_true[1] + rng.normal(0.0, cfg.pose_noise_px)
    lean_x = cfg.pose_lean_px_x * v_true[0] + rng.normal(0.0, cfg.pose_noise_px)
    kp[_UPPER_BODY, 0] += lean_y
    kp[_UPPER_BODY, 1] += lean_x
    kp += rng.normal(0.0, cfg.pose_jitter_px, size=kp.shape)
    conf = rng.uniform(0.6, 1.0, size=(17, 1))
    return np.concatenate([kp, conf], axis=1)


def synth_generate(
    oracle: SyntheticOracle,
    n_states: int,
    seed: int,
    grid: CourtGrid | None = None,
    cfg: SynthConfig | None = None,
) -> list[GameStateSample]:
    """Random receiving-team states on side A with oracle-labeled targets."""
    if n_states <= 0:
        raise ValueError("n_states must be positive")
    grid = grid or CourtGrid()
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    half = grid.length_m / 2
    samples = []
    for idx in range(n_states):
        while True:
            pts = rng.uniform(
                [0.4, 0.4], [half - 0.4, grid.width_m - 0.4], size=(2, 2)
            )
            if np.hypot(*(pts[0] - pts[1])) >= cfg.min_separation_m:
                break
        positions = (CourtPoint(*pts[0]), CourtPoint(*pts[1]))
        speeds = rng.uniform(0.0, cfg.max_speed, size=2)
        angles = rng.uniform(0.0, 2 * np.pi, size=2)
        v_true = [(s * np.cos(a), s * np.sin(a)) for s, a in zip(speeds, angles)]
        v_obs = tuple(
            (
                v[0] + rng.normal(0.0, cfg.velocity_noise),
                v[1] + rng.normal(0.0, cfg.velocity_noise),
            )
            for v in v_true
        )
        poses = tuple(_synth_pose(rng, v, cfg) for v in v_true)
        bboxes = tuple(
            (
                max(8.0, 55.0 + cfg.bbox_stretch_px * abs(v[0]) + rng.normal(0.0, cfg.bbox_noise_px)),
                max(8.0, 55.0 + cfg.bbox_stretch_px * abs(v[1]) + rng.normal(0.0, cfg.bbox_noise_px)),
            )
            for v in v_true
        )
        if rng.uniform() < cfg.near_fraction:
            anchor = positions[int(rng.integers(0, 2))]
            tx = float(np.clip(anchor.x + rng.normal(0.0, cfg.near_sigma_m), 0.0, half - 1e-9))
            ty = float(np.clip(anchor.y + rng.normal(0.0, cfg.near_sigma_m), 0.0, grid.width_m))
        else:
            tx = float(rng.uniform(0.0, half - 1e-9))
            ty = float(rng.uniform(0.0, grid.width_m))
        target_pt = CourtPoint(tx, ty)
        target = court_to_cell(grid, target_pt)
        p = oracle.p_star(positions, v_true, target_pt)
        label = int(rng.uniform() < p)
        samples.append(
            GameStateSample(
                sample_id=f"synth{idx:05d}",
                rally_id=f"synth{idx:05d}",
                frame=0,
                side=_side_of_row(target.i, grid),
                positions=positions,
                velocities=v_obs,
                target=target,
                label=label,
                poses=poses,
                bboxes=bboxes,
                oracle={
                    "p_star": p,
                    "true_velocities": [list(v) for v in v_true],
                },
            )
        )
    return samples


# -- sample (de)serialization ------------------------------------------------


def sample_to_record(s: GameStateSample) -> dict:
    rec = {
        "schema_version": 1,
        "sample_id": s.sample_id,
        "rally_id": s.rally_id,
        "frame": s.frame,
        "side": s.side,
        "positions": [[p.x, p.y] for p in s.positions],
        "velocities": [list(v) for v in s.velocities],
        "target_cell": [s.target.i, s.target.j],
        "label": s.label,
        "poses": [p.tolist() for p in s.poses] if s.poses is not None else None,
        "bboxes": [list(b) for b in s.bboxes] if s.bboxes is not None else None,
        "oracle": s.oracle,
        "game_id": s.game_id,
    }
    return rec


def sample_from_record(rec: dict) -> GameStateSample:
    return GameStateSample(
        sample_id=rec["sample_id"],
        rally_id=rec["rally_id"],
        frame=rec["frame"],
        side=rec["side"],
        positions=tuple(CourtPoint(*p) for p in rec["positions"]),
        velocities=tuple(tuple(v) for v in rec["velocities"]),
        target=CellIndex(*rec["target_cell"]),
        label=rec["label"],
        poses=tuple(np.array(p, dtype=float) for p in rec["poses"]) if rec.get("poses") else None,
        bboxes=tuple(tuple(b) for b in rec["bboxes"]) if rec.get("bboxes") else None,
        oracle=rec.get("oracle"),
        game_id=rec.get("game_id"),
    )


def write_samples(samples: list[GameStateSample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(sample_to_record(s), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_samples(path) -> list[GameStateSample]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(sample_from_record(json.loads(line)))
    return out
