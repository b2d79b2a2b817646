"""Polyline paths and their division into unit-length segments."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from terracost.errors import DegeneratePath, DegenerateSegment, InvalidArg

_ARC_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Path:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise DegeneratePath("a path needs at least two (x, y) points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise DegeneratePath("consecutive path points must differ")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_trace(cls, xy) -> "Path":
        """Build a path from a recorded trace, dropping repeated positions."""
        pts = np.asarray(xy, dtype=np.float64)
        if len(pts) == 0:
            raise DegeneratePath("empty trace")
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(np.diff(pts, axis=0) != 0.0, axis=1)
        return cls(pts[keep])

    def cumulative_arc(self) -> np.ndarray:
        steps = np.hypot(*np.diff(self.points, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(steps)])

    @property
    def length(self) -> float:
        return float(self.cumulative_arc()[-1])

    def point_at(self, arc):
        """Point(s) at the given arc length(s), linearly interpolated."""
        cum = self.cumulative_arc()
        arc = np.asarray(arc, dtype=np.float64)
        x = np.interp(arc, cum, self.points[:, 0])
        y = np.interp(arc, cum, self.points[:, 1])
        return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class Segment:
    start: tuple
    end: tuple
    heading_deg: float
    chord: float
    arc_start: float = 0.0

    @classmethod
    def between(cls, start, end, arc_start: float = 0.0) -> "Segment":
        start = (float(start[0]), float(start[1]))
        end = (float(end[0]), float(end[1]))
        chord = math.hypot(end[0] - start[0], end[1] - start[1])
        return cls(start, end, heading_of(start, end), chord, arc_start)

    @property
    def midpoint(self) -> tuple:
        return (0.5 * (self.start[0] + self.end[0]), 0.5 * (self.start[1] + self.end[1]))


def heading_of(start, end) -> float:
    """Chord heading in degrees, 0 = East, counter-clockwise, in [0, 360)."""
    dx = end[0] - start[0]
    dy = end[1] - start[1]
    if dx == 0.0 and dy == 0.0:
        raise DegenerateSegment("start and end coincide")
    deg = math.degrees(math.atan2(dy, dx)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def segment_path(path: Path, d: float) -> list[Segment]:
    if not d > 0:
        raise InvalidArg(f"segment length must be positive, got {d}")
    if not isinstance(path, Path):
        path = Path(path)
    total = path.length
    count = int(math.floor(total / d + _ARC_EPS))
    if count == 0:
        return []
    arcs = np.arange(count + 1, dtype=np.float64) * d
    arcs[-1] = min(arcs[-1], total)
    pts = path.point_at(arcs)
    return [Segment.between(pts[i], pts[i + 1], arc_start=float(arcs[i])) for i in range(count)]


def read_path_csv(file) -> Path:
    rows = []
    with open(file, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().lower() == "x":
                continue
            rows.append((float(rec[0]), float(rec[1])))
    return Path(rows)


def write_path_csv(path: Path, file) -> None:
    with open(file, "w", newline="") as fh:
        fh.write("x,y\n")
        for x, y in path.points:
            fh.write(f"{x:.9g},{y:.9g}\n")
