"""Court coordinate system, grid discretization, and image-to-court homography.

Court convention: x runs along the court length (0 at one baseline, 13.4 m at
the other), y along the width (0 at one sideline, 6.1 m at the other). The
team under analysis defends the near half x in [0, length/2). The grid splits
the court into rows (along x) and cols (along y); cell (0, 0) sits at the
(0, 0) corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COURT_LENGTH_M = 13.4
COURT_WIDTH_M = 6.1
DEFAULT_ROWS = 112
DEFAULT_COLS = 56


class DegenerateConfiguration(ValueError):
    """Point correspondences do not determine a homography."""


class PointAtInfinity(ValueError):
    """Projective transform sent a point to the plane at infinity."""


class OutOfCourt(ValueError):
    """Point lies beyond the court plus the allowed margin."""


@dataclass(frozen=True)
class CourtGrid:
    """Uniform discretization of the court into rows x cols cells."""

    length_m: float = COURT_LENGTH_M
    width_m: float = COURT_WIDTH_M
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2 or self.rows % 2 or self.cols % 2:
            raise ValueError(f"rows/cols must be even and >= 2, got {self.rows}x{self.cols}")
        if self.length_m <= 0 or self.width_m <= 0:
            raise ValueError("court dimensions must be positive")

    @property
    def cell_length(self) -> float:
        return self.length_m / self.rows

    @property
    def cell_width(self) -> float:
        return self.width_m / self.cols

    @property
    def cell_area(self) -> float:
        return self.cell_length * self.cell_width


@dataclass(frozen=True)
class CourtPoint:
    x: float  # meters along length
    y: float  # meters along width


@dataclass(frozen=True)
class CellIndex:
    i: int  # row, 0..rows-1
    j: int  # col, 0..cols-1


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, normalized so m[2][2] == 1 when nonzero."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateConfiguration("homography is not invertible")
        object.__setattr__(self, "m", m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))


def apply_homography(h: Homography, pt: tuple[float, float]) -> tuple[float, float]:
    """Map a 2D point through the projective transform."""
    v = h.m @ np.array([pt[0], pt[1], 1.0])
    scale = max(abs(v[0]), abs(v[1]), 1.0)
    if abs(v[2]) < 1e-12 * scale:
        raise PointAtInfinity(f"point {pt} maps to infinity")
    return (v[0] / v[2], v[1] / v[2])


def _normalization(points: np.ndarray) -> np.ndarray:
    """Similarity transform moving the centroid to the origin with mean
    distance sqrt(2) (Hartley pre-conditioning)."""
    centroid = points.mean(axis=0)
    dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise DegenerateConfiguration("correspondence points are coincident")
    s = math.sqrt(2.0) / dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def fit_homography(
    correspondences: list[tuple[tuple[float, float], tuple[float, float]]],
) -> tuple[Homography, float]:
    """Least-squares DLT fit from (image point, court point) pairs.

    Returns the homography and the RMS reprojection error in court units.
    Requires at least 4 pairs in general position.
    """
    if len(correspondences) < 4:
        raise DegenerateConfiguration(f"need >= 4 correspondences, got {len(correspondences)}")
    src = np.array([c[0] for c in correspondences], dtype=float)
    dst = np.array([c[1] for c in correspondences], dtype=float)
    t_src = _normalization(src)
    t_dst = _normalization(dst)
    src_h = np.column_stack([src, np.ones(len(src))]) @ t_src.T
    dst_h = np.column_stack([dst, np.ones(len(dst))]) @ t_dst.T

    rows = []
    for (u, v, _), (x, y, _) in zip(src_h, dst_h):
        rows.append([-u, -v, -1, 0, 0, 0, x * u, x * v, x])
        rows.append([0, 0, 0, -u, -v, -1, y * u, y * v, y])
    a = np.array(rows)
    _, sing, vt = np.linalg.svd(a)
    if sing[-2] < 1e-9 * sing[0]:
        raise DegenerateConfiguration("design matrix is rank-deficient (collinear points?)")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src

    hom = Homography(h)
    residuals = [apply_homography(hom, tuple(p)) for p in src]
    rms = math.sqrt(float(np.mean(((np.array(residuals) - dst) ** 2).sum(axis=1))))
    return hom, rms


def court_to_cell(
    grid: CourtGrid, pt: CourtPoint, margin: float = 0.5
) -> CellIndex:
    """Bin a court point into its grid cell.

    Points within `margin` meters outside the court clamp to the boundary
    cells; anything farther raises OutOfCourt. On internal cell edges the
    lower-index cell wins.
    """
    if not (-margin <= pt.x <= grid.length_m + margin) or not (
        -margin <= pt.y <= grid.width_m + margin
    ):
        raise OutOfCourt(f"({pt.x:.3f}, {pt.y:.3f}) is beyond the {margin} m margin")
    i = math.ceil(pt.x / grid.cell_length) - 1
    j = math.ceil(pt.y / grid.cell_width) - 1
    return CellIndex(min(grid.rows - 1, max(0, i)), min(grid.cols - 1, max(0, j)))


def cell_to_court(grid: CourtGrid, c: CellIndex) -> CourtPoint:
    """Center of a grid cell in court coordinates."""
    if not (0 <= c.i < grid.rows and 0 <= c.j < grid.cols):
        raise OutOfCourt(f"cell ({c.i}, {c.j}) outside {grid.rows}x{grid.cols} grid")
    return CourtPoint((c.i + 0.5) * grid.cell_length, (c.j + 0.5) * grid.cell_width)


def parse_calibration_file(path) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Read correspondence pairs from a plain-text file.

    One pair per line: `u v x y` (image px, court m). `#` starts a comment.
    """
    pairs = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'u v x y', got {raw.strip()!r}")
            u, v, x, y = (float(p) for p in parts)
            pairs.append(((u, v), (x, y)))
    return pairs
