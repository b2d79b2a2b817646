"""Path-level time and energy from per-segment predictions, cost grids, planning.

A *predictor* is any object with ``predict(planes) -> (w_hat, v_hat)`` taking an
``(n, 3, s, s)`` patch array: a trained :class:`~terracost.regnet.Model` or the
:class:`~terracost.synthgen.OraclePredictor`.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from terracost.envmodel import Environment, GeoTransform
from terracost.errors import (
    EmptyPath,
    EmptyWindow,
    FormatError,
    InvalidArg,
    SegmentError,
    TerracostError,
    Unreachable,
)
from terracost.patchex import DEFAULT_OVERSAMPLE, extract_patch, patch_side
from terracost.pathseg import Path, Segment, segment_path

SQRT2 = math.sqrt(2.0)
# direction k points at angle 45 * k degrees (0 = East, counter-clockwise)
DIRECTIONS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class SegmentCost:
    w_hat: float
    v_hat: float
    time: float
    energy: float


@dataclass(frozen=True)
class PathCost:
    traversal_time: float
    energy: float
    per_segment: tuple = field(default_factory=tuple)
    covered_length: float = 0.0

    @classmethod
    def from_segments(cls, per_segment, covered_length: float) -> "PathCost":
        per_segment = tuple(per_segment)
        return cls(
            math.fsum(sc.time for sc in per_segment),
            math.fsum(sc.energy for sc in per_segment),
            per_segment,
            covered_length,
        )

    def __add__(self, other: "PathCost") -> "PathCost":
        return PathCost.from_segments(self.per_segment + other.per_segment, self.covered_length + other.covered_length)


def _predict(predictor, planes):
    w, v = predictor.predict(planes)
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(v)) or np.any(v <= 0) or np.any(~np.isfinite(w)):
        raise InvalidArg("predictor returned a non-positive or non-finite velocity")
    return w, v


def segment_costs(env: Environment, predictor, segments, d: float, oversample: int = DEFAULT_OVERSAMPLE):
    """Per-segment (w_hat, v_hat, time, energy) with time = d / v_hat.

    Each patch is predicted on its own so a segment's cost never depends on
    which other segments share its batch; splitting a path therefore splits
    its cost exactly.
    """
    planes = []
    for i, seg in enumerate(segments):
        try:
            planes.append(extract_patch(env, seg, d, oversample).planes)
        except TerracostError as exc:
            raise SegmentError(i, exc) from exc
    out = []
    for p in planes:
        w, v = _predict(predictor, p[None])
        t = d / float(v[0])
        out.append(SegmentCost(float(w[0]), float(v[0]), t, float(w[0]) * t))
    return tuple(out)


def path_cost(env: Environment, predictor, path: Path, d: float = 1.0, oversample: int = DEFAULT_OVERSAMPLE) -> PathCost:
    segments = segment_path(path, d)
    if not segments:
        raise EmptyPath(f"path of length {path.length:.3f} m holds no {d} m segment")
    return PathCost.from_segments(segment_costs(env, predictor, segments, d, oversample), len(segments) * d)


def energy_from_log(log, t_s: float, t_g: float) -> float:
    """Energy over (t_s, t_g] as (T / K) * sum(V * I) for the K records in the window."""
    if not t_g > t_s:
        raise EmptyWindow("window end must follow its start")
    window = (log.t > t_s) & (log.t <= t_g)
    k = int(window.sum())
    if k == 0:
        raise EmptyWindow(f"no records in ({t_s}, {t_g}]")
    return (t_g - t_s) / k * math.fsum(log.voltage[window] * log.current[window])


# -- cost grid -------------------------------------------------------------------------


@dataclass(eq=False)
class CostGrid:
    """Directed 8-neighbour lattice; NaN marks an absent edge.

    ``time``, ``energy``, ``w_hat`` and ``v_hat`` have shape (rows, cols, 8).
    """

    geo: GeoTransform
    nodes: np.ndarray
    time: np.ndarray
    energy: np.ndarray
    w_hat: np.ndarray
    v_hat: np.ndarray

    @property
    def shape(self) -> tuple:
        return self.nodes.shape

    def node_xy(self, row: int, col: int) -> tuple:
        return (self.geo.origin_x + col * self.geo.resolution, self.geo.origin_y - row * self.geo.resolution)

    def snap(self, x: float, y: float) -> tuple:
        col = int(round((x - self.geo.origin_x) / self.geo.resolution))
        row = int(round((self.geo.origin_y - y) / self.geo.resolution))
        return row, col

    def has_edge(self, row: int, col: int, direction: int) -> bool:
        return bool(np.isfinite(self.time[row, col, direction]))

    def edges(self):
        rows, cols, dirs = np.nonzero(np.isfinite(self.time))
        return zip(rows.tolist(), cols.tolist(), dirs.tolist())


def edge_segment(a, b, d: float) -> Segment:
    """Length-d segment centred on edge a->b (the full edge for axis-aligned moves)."""
    mx, my = 0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])
    dx, dy = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(dx, dy)
    hx, hy = 0.5 * d * dx / norm, 0.5 * d * dy / norm
    return Segment.between((mx - hx, my - hy), (mx + hx, my + hy))


def lattice(env: Environment, d: float):
    """Geo-transform and traversable-node mask of the stride-d lattice over ``env``."""
    if not d > 0:
        raise InvalidArg("lattice stride must be positive")
    h, w = env.shape
    r = env.geo.resolution
    nrows = int(math.floor((h - 1) * r / d + 1e-9)) + 1
    ncols = int(math.floor((w - 1) * r / d + 1e-9)) + 1
    geo = GeoTransform(env.geo.origin_x, env.geo.origin_y, d)
    node_r = np.rint(np.arange(nrows) * d / r).astype(int)
    node_c = np.rint(np.arange(ncols) * d / r).astype(int)
    return geo, env.traversable_mask()[np.ix_(node_r, node_c)]


def build_cost_grid(
    env: Environment,
    predictor,
    d: float = 1.0,
    *,
    oversample: int = DEFAULT_OVERSAMPLE,
    chunk: int = 512,
    workers: int = 1,
) -> CostGrid:
    """Evaluate every directed edge of a stride-d lattice with one patch each.

    Diagonal edges use a d-long patch centred on the diagonal and scale time
    and energy by sqrt(2).  Edges whose patch cannot be extracted are absent.
    """
    patch_side(d, env.geo.resolution, oversample)
    geo, nodes = lattice(env, d)
    nrows, ncols = nodes.shape
    xs = geo.origin_x + np.arange(ncols) * d
    ys = geo.origin_y - np.arange(nrows) * d

    jobs = []
    for i in range(nrows):
        for j in range(ncols):
            if not nodes[i, j]:
                continue
            for k, (di, dj) in enumerate(DIRECTIONS):
                ii, jj = i + di, j + dj
                if 0 <= ii < nrows and 0 <= jj < ncols and nodes[ii, jj]:
                    jobs.append((i, j, k, edge_segment((xs[j], ys[i]), (xs[jj], ys[ii]), d)))

    def extract(job):
        try:
            return extract_patch(env, job[3], d, oversample).planes
        except TerracostError:
            return None

    shape = (nrows, ncols, 8)
    time = np.full(shape, np.nan)
    energy = np.full(shape, np.nan)
    w_hat = np.full(shape, np.nan)
    v_hat = np.full(shape, np.nan)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, len(jobs), chunk):
            block = jobs[start : start + chunk]
            planes = list(pool.map(extract, block)) if pool else [extract(j) for j in block]
            keep = [n for n, p in enumerate(planes) if p is not None]
            if not keep:
                continue
            wv, vv = _predict(predictor, np.stack([planes[n] for n in keep]))
            for n, wi, vi in zip(keep, wv, vv):
                i, j, k, _ = block[n]
                scale = SQRT2 if k % 2 else 1.0
                t = scale * d / vi
                time[i, j, k] = t
                energy[i, j, k] = wi * t
                w_hat[i, j, k] = wi
                v_hat[i, j, k] = vi
    finally:
        if pool:
            pool.shutdown()
    return CostGrid(geo, nodes, time, energy, w_hat, v_hat)


def write_cost_grid_csv(grid: CostGrid, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("row,col,dir,time_s,energy_j\n")
        for i, j, k in grid.edges():
            fh.write(f"{i},{j},{k},{float(grid.time[i, j, k])!r},{float(grid.energy[i, j, k])!r}\n")


def read_cost_grid_csv(path, geo: GeoTransform, nodes: np.ndarray) -> CostGrid:
    """Inverse of :func:`write_cost_grid_csv` given the lattice it was built on."""
    shape = nodes.shape + (8,)
    time = np.full(shape, np.nan)
    energy = np.full(shape, np.nan)
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if header != "row,col,dir,time_s,energy_j":
            raise FormatError(f"unexpected cost grid header {header!r}")
        for n, line in enumerate(fh, start=2):
            try:
                i, j, k, t, e = line.strip().split(",")
                i, j, k = int(i), int(j), int(k)
                time[i, j, k] = float(t)
                energy[i, j, k] = float(e)
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{n}: bad cost grid row") from exc
    scale = np.where(np.arange(8) % 2, SQRT2, 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        v_hat = scale * geo.resolution / time
        w_hat = energy / time
    return CostGrid(geo, nodes.copy(), time, energy, w_hat, v_hat)


def write_path_cost_csv(cost: PathCost, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("segment_index,w_hat,v_hat,time_s,energy_j\n")
        for i, sc in enumerate(cost.per_segment):
            fh.write(f"{i},{sc.w_hat:.9g},{sc.v_hat:.9g},{sc.time:.9g},{sc.energy:.9g}\n")
        fh.write(f"total,,,{cost.traversal_time:.9g},{cost.energy:.9g}\n")


# -- planning ------------------------------------------------------------------------------


def _objective_array(grid: CostGrid, objective: str) -> np.ndarray:
    objective = objective.lower()
    if objective == "time":
        return grid.time
    if objective == "energy":
        return grid.energy
    raise InvalidArg(f"objective must be 'time' or 'energy', got {objective!r}")


def shortest_nodes(grid: CostGrid, start: tuple, goal: tuple, objective: str = "time"):
    """Uniform-cost search over directed edges; returns (cost, [(row, col), ...])."""
    cost = _objective_array(grid, objective)
    nrows, ncols = grid.shape
    for node in (start, goal):
        if not (0 <= node[0] < nrows and 0 <= node[1] < ncols) or not grid.nodes[node]:
            raise Unreachable(f"node {node} is not a traversable lattice node")
    best = {start: 0.0}
    parent = {start: None}
    heap = [(0.0, start[0], start[1])]
    done = set()
    while heap:
        c, i, j = heapq.heappop(heap)
        if (i, j) in done:
            continue
        done.add((i, j))
        if (i, j) == goal:
            break
        for k, (di, dj) in enumerate(DIRECTIONS):
            e = cost[i, j, k]
            if not np.isfinite(e):
                continue
            nxt = (i + di, j + dj)
            nc = c + float(e)
            if nxt not in best or nc < best[nxt]:
                best[nxt] = nc
                parent[nxt] = (i, j, k)
                heapq.heappush(heap, (nc, nxt[0], nxt[1]))
    if goal not in done:
        raise Unreachable(f"no route from {start} to {goal}")
    nodes = [goal]
    while parent[nodes[-1]] is not None:
        i, j, _ = parent[nodes[-1]]
        nodes.append((i, j))
    nodes.reverse()
    return best[goal], nodes


def route_cost(grid: CostGrid, nodes) -> PathCost:
    per = []
    length = 0.0
    for (i, j), (ii, jj) in zip(nodes, nodes[1:]):
        k = DIRECTIONS.index((ii - i, jj - j))
        per.append(SegmentCost(float(grid.w_hat[i, j, k]), float(grid.v_hat[i, j, k]),
                               float(grid.time[i, j, k]), float(grid.energy[i, j, k])))
        length += grid.geo.resolution * (SQRT2 if k % 2 else 1.0)
    return PathCost.from_segments(per, length)


def plan(grid: CostGrid, start, goal, objective: str = "time"):
    """Least-cost route between the lattice nodes nearest to world points ``start`` and ``goal``.

    Returns ``(path, cost)``; ``path`` is None when start and goal coincide.
    """
    s = grid.snap(*start)
    g = grid.snap(*goal)
    _, nodes = shortest_nodes(grid, s, g, objective)
    cost = route_cost(grid, nodes)
    if len(nodes) < 2:
        return None, cost
    return Path([grid.node_xy(i, j) for i, j in nodes]), cost
