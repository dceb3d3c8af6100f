"""Control-area measurements and score correlations.

A team's control area is the set of grid cells whose predicted control
probability clears a threshold (default 0.5, reported with every figure).
The suite aggregates per-event statistics to game level (mean over a
game's events) and pair level (mean over a pair's game values) and runs
Spearman correlations against scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from .geometry import CourtGrid, CourtPoint, court_to_cell


class EmptyControlArea(ValueError):
    """No cell clears the threshold on the relevant side."""


class DegenerateInput(ValueError):
    """Correlation input is constant or too short."""


class NoHits(ValueError):
    pass


@dataclass(frozen=True)
class FieldRegion:
    kind: str  # "full_field" | "primary_quarter" | "whole_map"
    mask: np.ndarray

    @property
    def n_cells(self) -> int:
        return int(self.mask.sum())


def side_rows(grid: CourtGrid, side: str) -> slice:
    half = grid.rows // 2
    if side == "A":
        return slice(0, half)
    if side == "B":
        return slice(half, grid.rows)
    raise ValueError(f"side must be 'A' or 'B', got {side!r}")


def full_field(grid: CourtGrid, side: str) -> FieldRegion:
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    mask[side_rows(grid, side), :] = True
    return FieldRegion("full_field", mask)


def quarter_field(grid: CourtGrid, side: str, half: str) -> FieldRegion:
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    cols = slice(0, grid.cols // 2) if half == "left" else slice(grid.cols // 2, grid.cols)
    mask[side_rows(grid, side), cols] = True
    return FieldRegion("primary_quarter", mask)


def whole_map(grid: CourtGrid) -> FieldRegion:
    return FieldRegion("whole_map", np.ones((grid.rows, grid.cols), dtype=bool))


def primary_field(grid: CourtGrid, shuttle: CourtPoint) -> FieldRegion:
    """The quarter (side x left/right half) containing the shuttle.

    Boundary shuttles resolve to the lower-index cell, hence the left/near
    quarter.
    """
    cell = court_to_cell(grid, shuttle)  # raises OutOfCourt beyond margin
    side = "A" if cell.i < grid.rows // 2 else "B"
    half = "left" if cell.j < grid.cols // 2 else "right"
    return quarter_field(grid, side, half)


def control_area(
    control_map: np.ndarray, region: FieldRegion | None = None, tau: float = 0.5,
    grid: CourtGrid | None = None,
) -> tuple[int, float]:
    """(cell count, area in m^2) of cells with value >= tau inside region."""
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    grid = grid or CourtGrid()
    m = np.asarray(control_map)
    sel = m >= tau
    if region is not None:
        sel = sel & region.mask
    cells = int(sel.sum())
    return cells, cells * grid.cell_area


def area_proportion(
    control_map: np.ndarray, shuttle: CourtPoint, grid: CourtGrid | None = None, tau: float = 0.5
) -> float:
    """Primary-quarter share of the side's control area."""
    grid = grid or CourtGrid()
    primary = primary_field(grid, shuttle)
    cell = court_to_cell(grid, shuttle)
    side = "A" if cell.i < grid.rows // 2 else "B"
    other_half = "right" if primary.mask[:, : grid.cols // 2].any() else "left"
    secondary = quarter_field(grid, side, other_half)
    a1, _ = control_area(control_map, primary, tau, grid)
    a2, _ = control_area(control_map, secondary, tau, grid)
    if a1 + a2 == 0:
        raise EmptyControlArea(f"no cell >= {tau} on side {side}")
    return a1 / (a1 + a2)


def length_width(
    control_map: np.ndarray, side: str, grid: CourtGrid | None = None, tau: float = 0.5
) -> tuple[float, float]:
    """Bounding extent (m) of the thresholded cells on one side; (0, 0) if
    nothing clears the threshold."""
    grid = grid or CourtGrid()
    region = full_field(grid, side)
    sel = (np.asarray(control_map) >= tau) & region.mask
    if not sel.any():
        return (0.0, 0.0)
    rows, cols = np.nonzero(sel)
    length = (rows.max() - rows.min() + 1) * grid.cell_length
    width = (cols.max() - cols.min() + 1) * grid.cell_width
    return (float(length), float(width))


def distance_to_control(
    aim: CourtPoint, opponent_map: np.ndarray, grid: CourtGrid | None = None, tau: float = 0.5
) -> float:
    """Distance (m) from the aim point to the opponent's control area, 0 if
    the aim's cell is inside it."""
    grid = grid or CourtGrid()
    sel = np.asarray(opponent_map) >= tau
    if not sel.any():
        raise EmptyControlArea(f"opponent map has no cell >= {tau}")
    cell = court_to_cell(grid, aim)
    if sel[cell.i, cell.j]:
        return 0.0
    rows, cols = np.nonzero(sel)
    cx = (rows + 0.5) * grid.cell_length
    cy = (cols + 0.5) * grid.cell_width
    return float(np.hypot(cx - aim.x, cy - aim.y).min())


def aiming_distance(
    hits: list[tuple[CourtPoint, np.ndarray]], grid: CourtGrid | None = None, tau: float = 0.5
) -> float:
    """Per-rally A_d: max over the team's hits of the aim-to-control-area
    distance (aim approximated by the opponent's next hit / drop spot)."""
    if not hits:
        raise NoHits("rally has no hits with a defined aim point")
    grid = grid or CourtGrid()
    return max(distance_to_control(aim, opp_map, grid, tau) for aim, opp_map in hits)


# -- rank correlation ---------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: float
    n: int
    approx: bool = False  # t-approximation flagged for small n

    def to_dict(self) -> dict:
        return {"rho": self.rho, "p_value": self.p_value, "n": self.n, "approx": self.approx}


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> CorrelationResult:
    """Spearman rho via Pearson on midranks; two-sided p from the
    t-approximation with n-2 degrees of freedom."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {xa.shape} vs {ya.shape}")
    n = len(xa)
    if n < 3:
        raise DegenerateInput(f"need n >= 3, got {n}")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise DegenerateInput("constant input vector")
    rx = _midranks(xa)
    ry = _midranks(ya)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum()) * float((ry * ry).sum()))
    if denom == 0:
        raise DegenerateInput("rank variance is zero")
    rho = float((rx * ry).sum() / denom)
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return CorrelationResult(rho=rho, p_value=p, n=n, approx=n < 10)


# -- score correlation suite ----------------------------------------------------


@dataclass
class GameRecord:
    """One team's events within one game, plus its score in that game."""

    game_id: str
    pair_id: str
    side: str
    score: float
    receive_events: list = field(default_factory=list)  # (shuttle: CourtPoint, team_map)
    prepare_events: list = field(default_factory=list)  # team_map at opponent-hit moments
    aim_events: list = field(default_factory=list)  # (rally_id, aim: CourtPoint, opponent_map)


def _game_stats(game: GameRecord, grid: CourtGrid, tau: float) -> dict[str, float | None]:
    def mean_or_none(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    full_areas, primary_areas, proportions = [], [], []
    for shuttle, team_map in game.receive_events:
        _, a_full = control_area(team_map, full_field(grid, game.side), tau, grid)
        full_areas.append(a_full)
        _, a_primary = control_area(team_map, primary_field(grid, shuttle), tau, grid)
        primary_areas.append(a_primary)
        try:
            proportions.append(area_proportion(team_map, shuttle, grid, tau))
        except EmptyControlArea:
            proportions.append(None)

    lengths, widths = [], []
    for team_map in game.prepare_events:
        l, w = length_width(team_map, game.side, grid, tau)
        lengths.append(l)
        widths.append(w)

    by_rally: dict[str, list] = {}
    for rally_id, aim, opp_map in game.aim_events:
        by_rally.setdefault(rally_id, []).append((aim, opp_map))
    rally_ads = []
    for rally_id, hits in sorted(by_rally.items()):
        try:
            rally_ads.append(aiming_distance(hits, grid, tau))
        except (NoHits, EmptyControlArea):
            continue

    return {
        "full_area": mean_or_none(full_areas),
        "primary_area": mean_or_none(primary_areas),
        "proportion": mean_or_none(proportions),
        "length": mean_or_none(lengths),
        "width": mean_or_none(widths),
        "aiming": mean_or_none(rally_ads),
    }


ANALYSES = ("full_area", "primary_area", "proportion", "length", "width", "aiming")
# full-field area is a game-level figure only
PAIR_ANALYSES = ("primary_area", "proportion", "length", "width", "aiming")


def score_correlation_suite(games: list[GameRecord], grid: CourtGrid | None = None, tau: float = 0.5) -> dict:
    """All score-vs-control analyses at game and pair level.

    Returns {analysis: {level: {rho, p_value, n, approx, points}}}; entries
    with degenerate inputs carry an "error" note instead.
    """
    grid = grid or CourtGrid()
    stats = [(g, _game_stats(g, grid, tau)) for g in games]
    report: dict = {"tau": tau, "analyses": {}}

    def correlate(points):
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        try:
            res = spearman(xs, ys)
            return {**res.to_dict(), "points": points}
        except DegenerateInput as e:
            return {"error": str(e), "points": points}

    for name in ANALYSES:
        entry = {}
        game_points = [
            (st[name], g.score) for g, st in stats if st[name] is not None
        ]
        entry["game"] = correlate(game_points)
        if name in PAIR_ANALYSES:
            by_pair: dict[str, list] = {}
            for g, st in stats:
                if st[name] is not None:
                    by_pair.setdefault(g.pair_id, []).append((st[name], g.score))
            pair_points = [
                (float(np.mean([v for v, _ in vals])), float(np.mean([s for _, s in vals])))
                for pair, vals in sorted(by_pair.items())
            ]
            entry["pair"] = correlate(pair_points)
        report["analyses"][name] = entry
    return report


def write_pgm(control_map: np.ndarray, path) -> None:
    """Export as binary PGM (P5, 8-bit): value = round(255 * v), row-major."""
    m = np.asarray(control_map, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {m.shape}")
    data = np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def write_scatter_csv(points: list[tuple[float, float]], path) -> None:
    with open(path, "w") as f:
        f.write("x,y\n")
        for x, y in points:
            f.write(f"{x!r},{y!r}\n")
