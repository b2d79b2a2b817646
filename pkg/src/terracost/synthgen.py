"""Synthetic environments and a physics oracle for the robot's power and speed.

The oracle replaces field recordings: it maps local slope and terrain class to
a speed and an electrical power draw, and :func:`simulate_run` integrates a
robot along a polyline to produce a 20 Hz log of voltage, current and speed.

Oracle model (per terrain class ``c`` with rolling resistance ``mu`` and speed
factor ``kappa``, slope ``g`` in radians)::

    v = clamp(v_max * kappa * (1 - a_up * max(tan g, 0) - a_down * max(-tan g, 0)), v_min, v_max)
    w = max(idle, idle + m * grav * v * (mu * cos g + sin g))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from terracost import kernels
from terracost.envmodel import Environment, GeoTransform, Raster, RasterKind, world_to_grid
from terracost.errors import FormatError, InvalidArg, NonTraversable, OutOfBounds, TerracostError
from terracost.pathseg import Path
from terracost.rng import SplitMix64, derive_seed

MAX_SLOPE_DEG = 22.5


@dataclass(frozen=True)
class TerrainParams:
    class_label: int
    name: str
    rolling_resistance: float
    speed_factor: float
    ortho_mean: float
    ortho_noise: float

    def __post_init__(self):
        if not self.rolling_resistance > 0:
            raise InvalidArg(f"{self.name}: rolling_resistance must be > 0")
        if not 0 < self.speed_factor <= 1:
            raise InvalidArg(f"{self.name}: speed_factor must lie in (0, 1]")


DEFAULT_TERRAIN = (
    TerrainParams(4, "grass", 0.15, 0.9, 0.45, 0.05),
    TerrainParams(5, "mud", 0.25, 0.7, 0.30, 0.05),
    TerrainParams(6, "paved", 0.05, 1.0, 0.62, 0.04),
    TerrainParams(7, "unpaved", 0.08, 1.0, 0.78, 0.05),
)

DEFAULT_NUM_CLASSES = 7


@dataclass(frozen=True)
class OracleConfig:
    mass: float = 50.0
    gravity: float = 9.81
    idle_power: float = 30.0
    v_max: float = 1.0
    uphill_gain: float = 0.8
    downhill_gain: float = 0.3
    v_min: float = 0.2
    sample_rate: float = 20.0
    battery_voltage: float = 24.0
    current_noise: float = 0.2
    terrain: tuple = field(default=DEFAULT_TERRAIN)
    seed: int = 0

    def __post_init__(self):
        if not self.v_max > self.v_min > 0:
            raise InvalidArg("require v_max > v_min > 0")
        if not self.sample_rate > 0 or not self.mass > 0:
            raise InvalidArg("sample_rate and mass must be positive")
        if not self.battery_voltage > 0:
            raise InvalidArg("battery_voltage must be positive")
        object.__setattr__(self, "terrain", tuple(self.terrain))

    def params_for(self, class_label: int) -> TerrainParams:
        for tp in self.terrain:
            if tp.class_label == int(class_label):
                return tp
        raise NonTraversable(f"class {class_label} has no terrain parameters")

    @property
    def labels(self) -> tuple:
        return tuple(tp.class_label for tp in self.terrain)


_SCALAR_KEYS = [f.name for f in fields(OracleConfig) if f.name != "terrain"]


def write_oracle_config(cfg: OracleConfig, path) -> None:
    lines = ["# oracle configuration: key = value"]
    for key in _SCALAR_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)!r}")
    lines.append("# terrain.<label> = name rolling_resistance speed_factor ortho_mean ortho_noise")
    for tp in cfg.terrain:
        lines.append(
            f"terrain.{tp.class_label} = {tp.name} {tp.rolling_resistance!r} {tp.speed_factor!r} "
            f"{tp.ortho_mean!r} {tp.ortho_noise!r}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_oracle_config(path) -> OracleConfig:
    kwargs = {}
    terrain = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("terrain."):
                parts = value.split()
                if len(parts) != 5:
                    raise FormatError(f"{path}:{lineno}: terrain entry needs 5 fields")
                try:
                    label = int(key.split(".", 1)[1])
                    terrain.append(TerrainParams(label, parts[0], *(float(p) for p in parts[1:])))
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
            elif key in _SCALAR_KEYS:
                try:
                    kwargs[key] = int(value) if key == "seed" else float(value)
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
            else:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
    if terrain:
        kwargs["terrain"] = tuple(terrain)
    return OracleConfig(**kwargs)


# -- oracle ----------------------------------------------------------------------


def oracle_velocity(cfg: OracleConfig, slope: float, class_label: int) -> float:
    tp = cfg.params_for(class_label)
    return kernels.oracle_velocity_scalar(
        float(slope), tp.speed_factor, cfg.v_max, cfg.v_min, cfg.uphill_gain, cfg.downhill_gain
    )


def oracle_power(cfg: OracleConfig, slope: float, class_label: int, v: float) -> float:
    if v < 0:
        raise InvalidArg("speed must be non-negative")
    tp = cfg.params_for(class_label)
    return kernels.oracle_power_scalar(
        float(slope), tp.rolling_resistance, float(v), cfg.mass, cfg.gravity, cfg.idle_power
    )


def _label_tables(cfg: OracleConfig, env: Environment | None = None):
    top = max(max(cfg.labels), env.num_classes if env else 0) + 1
    mu = np.zeros(top)
    kappa = np.zeros(top)
    for tp in cfg.terrain:
        if env is None or tp.class_label in env.traversable:
            mu[tp.class_label] = tp.rolling_resistance
            kappa[tp.class_label] = tp.speed_factor
    return mu, kappa


class OraclePredictor:
    """Predicts (w, v) from patch planes with the oracle formulas.

    Slope along the heading is the least-squares plane fit of the height plane
    against the along-track coordinate; the class is the modal label of the
    class plane.  Exact on planar single-class terrain.  ``pitch`` is the patch
    cell spacing in meters, d / s, which differs from the raster resolution
    when patches are oversampled.
    """

    def __init__(self, cfg: OracleConfig, num_classes: int, pitch: float):
        if not pitch > 0:
            raise InvalidArg("pitch must be positive")
        self.cfg = cfg
        self.num_classes = num_classes
        self.pitch = pitch

    def predict(self, planes: np.ndarray):
        planes = np.asarray(planes, dtype=np.float64)
        n, _, s, _ = planes.shape
        u = (np.arange(s) - (s - 1) / 2.0) * self.pitch
        h = planes[:, 2]
        hc = h - h.mean(axis=(1, 2), keepdims=True)
        grad = (hc * u[None, None, :]).sum(axis=(1, 2)) / (s * (u**2).sum())
        labels = np.rint(planes[:, 1] * (self.num_classes - 1)).astype(np.int64) + 1
        w = np.empty(n)
        v = np.empty(n)
        for i in range(n):
            label = int(np.bincount(labels[i].ravel()).argmax())
            slope = math.atan(grad[i])
            v[i] = oracle_velocity(self.cfg, slope, label)
            w[i] = oracle_power(self.cfg, slope, label, v[i])
        return w, v


# -- environment generation ------------------------------------------------------


def _diamond_square(levels: int, roughness: float, rng: SplitMix64) -> np.ndarray:
    """Midpoint-displacement fractal on a (2**levels + 1)^2 grid."""
    n = 2**levels + 1
    z = np.zeros((n, n))
    z[:: n - 1, :: n - 1] = rng.normal(4).reshape(2, 2) * roughness
    step = n - 1
    amp = roughness
    while step > 1:
        half = step // 2
        amp *= roughness
        # diamond: centres of squares
        centres = (z[0:-1:step, 0:-1:step] + z[0:-1:step, step::step] + z[step::step, 0:-1:step] + z[step::step, step::step]) / 4.0
        z[half::step, half::step] = centres + amp * rng.normal(centres.size).reshape(centres.shape)
        # square: edge midpoints, averaging the in-range neighbours
        for r0 in (0, half):
            c0 = half if r0 == 0 else 0
            rows = np.arange(r0, n, step)
            cols = np.arange(c0, n, step)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            acc = np.zeros(rr.shape)
            cnt = np.zeros(rr.shape)
            for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
                r2, c2 = rr + dr, cc + dc
                ok = (r2 >= 0) & (r2 < n) & (c2 >= 0) & (c2 < n)
                acc[ok] += z[r2[ok], c2[ok]]
                cnt[ok] += 1
            z[rr, cc] = acc / cnt + amp * rng.normal(rr.size).reshape(rr.shape)
        step = half
    return z


def steepest_slope_deg(height: np.ndarray, resolution: float) -> float:
    gy, gx = np.gradient(height.astype(np.float64), resolution)
    return float(np.degrees(np.arctan(np.sqrt(gx**2 + gy**2).max())))


def generate_environment(
    width: float,
    height: float,
    resolution: float = 0.05,
    num_classes: int = DEFAULT_NUM_CLASSES,
    roughness: float = 0.3,
    max_slope: float = MAX_SLOPE_DEG,
    seed: int = 0,
    *,
    terrain=DEFAULT_TERRAIN,
    feature_scale: float = 8.0,
    region_size: float = 8.0,
    border: float = 1.0,
    base_elevation: float = 600.0,
    allow_steep: bool = False,
) -> Environment:
    """Seeded synthetic environment of ``width`` x ``height`` meters.

    ``roughness`` is the per-octave amplitude ratio of the midpoint
    displacement (0 gives flat ground).  The relief is built on a lattice of
    ``feature_scale`` spacing, spline-interpolated to ``resolution`` and scaled
    so that the steepest central-difference slope equals ``max_slope``.  Terrain
    classes are Voronoi cells of mean size ``region_size`` over the labels in
    ``terrain``, surrounded by a no-data border.
    """
    if not (width > 0 and height > 0 and resolution > 0):
        raise InvalidArg("dimensions and resolution must be positive")
    if max_slope > MAX_SLOPE_DEG and not allow_steep:
        raise InvalidArg(f"max_slope above {MAX_SLOPE_DEG} deg requires allow_steep=True")
    if not 0 <= roughness <= 1:
        raise InvalidArg("roughness must lie in [0, 1]")
    ncols = int(round(width / resolution))
    nrows = int(round(height / resolution))
    if ncols < 1 or nrows < 1:
        raise InvalidArg("environment smaller than one cell")
    geo = GeoTransform(resolution / 2.0, nrows * resolution - resolution / 2.0, resolution)
    terrain = tuple(terrain)

    # relief
    rng = SplitMix64(derive_seed(seed, "height"))
    extent = max(width, height)
    levels = max(1, int(math.ceil(math.log2(max(extent / feature_scale, 1.0)))))
    coarse = _diamond_square(levels, roughness, rng)
    n = coarse.shape[0]
    scale = (n - 1) / extent
    rr, cc = np.meshgrid(np.arange(nrows) * resolution * scale, np.arange(ncols) * resolution * scale, indexing="ij")
    relief = ndimage.map_coordinates(coarse, [rr, cc], order=3, mode="nearest")
    relief -= relief.mean()
    steep = steepest_slope_deg(relief, resolution)
    if roughness == 0 or steep == 0:
        relief[:] = 0.0
    else:
        relief *= math.tan(math.radians(max_slope)) / math.tan(math.radians(steep))
    hdata = (base_elevation + relief).astype(np.float32)
    # float32 rounding can nudge the steepest slope past the budget
    for _ in range(20):
        steep = steepest_slope_deg(hdata, resolution)
        if steep <= max_slope or relief.max() == relief.min():
            break
        relief *= math.tan(math.radians(max_slope)) / math.tan(math.radians(steep)) * (1 - 1e-4)
        hdata = (base_elevation + relief).astype(np.float32)

    # terrain classes
    rng = SplitMix64(derive_seed(seed, "classes"))
    labels = [tp.class_label for tp in terrain]
    if any(not 1 <= lab <= num_classes for lab in labels):
        raise InvalidArg("terrain labels must lie in [1, num_classes]")
    n_sites = max(len(labels), int(round(width * height / region_size**2)))
    sites = np.stack([rng.uniform(0, width, n_sites), rng.uniform(0, height, n_sites)], axis=1)
    order = rng.permutation(len(labels))
    site_labels = np.array([labels[order[i % len(labels)]] for i in range(n_sites)])
    xs = geo.origin_x + np.arange(ncols) * resolution
    ys = geo.origin_y - np.arange(nrows) * resolution
    gx, gy = np.meshgrid(xs, ys)
    _, nearest = cKDTree(sites).query(np.stack([gx.ravel(), gy.ravel()], axis=1))
    cdata = site_labels[nearest].reshape(nrows, ncols).astype(np.float32)
    b = int(round(border / resolution))
    if b > 0:
        cdata[:b, :] = 0
        cdata[-b:, :] = 0
        cdata[:, :b] = 0
        cdata[:, -b:] = 0

    # orthophoto
    rng = SplitMix64(derive_seed(seed, "ortho"))
    noise = rng.normal(nrows * ncols).reshape(nrows, ncols)
    mean = np.zeros((nrows, ncols))
    std = np.zeros((nrows, ncols))
    for tp in terrain:
        sel = cdata == tp.class_label
        mean[sel] = tp.ortho_mean
        std[sel] = tp.ortho_noise
    odata = np.clip(mean + std * noise, 0.0, 1.0).astype(np.float32)
    odata[cdata == 0] = 1.0

    return Environment(
        Raster(geo, RasterKind.ORTHO, odata),
        Raster(geo, RasterKind.HEIGHT, hdata),
        Raster(geo, RasterKind.CLASS, cdata),
        num_classes,
        frozenset(labels),
    )


# -- simulation ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    speed: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def power(self) -> np.ndarray:
        return self.voltage * self.current

    def __eq__(self, other):
        if not isinstance(other, TrajectoryLog):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("t", "x", "y", "voltage", "current", "speed")
        )

    __hash__ = None


LOG_COLUMNS = ("t", "x", "y", "voltage", "current", "speed")


def write_log_csv(log: TrajectoryLog, path) -> None:
    cols = np.stack([getattr(log, c) for c in LOG_COLUMNS], axis=1)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in cols:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")


def read_log_csv(path) -> TrajectoryLog:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ",".join(LOG_COLUMNS):
            raise FormatError(f"{path}: unexpected header {header!r}")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if data.size and data.shape[1] != len(LOG_COLUMNS):
        raise FormatError(f"{path}: expected {len(LOG_COLUMNS)} columns, found {data.shape[1]}")
    if data.size == 0:
        data = np.zeros((0, len(LOG_COLUMNS)))
    return TrajectoryLog(*(data[:, i].copy() for i in range(len(LOG_COLUMNS))))


def simulation_inputs(env: Environment, cfg: OracleConfig, path: Path) -> tuple:
    """Positional arguments of :func:`terracost.kernels.simulate` for one run."""
    mu, kappa = _label_tables(cfg, env)
    dt = 1.0 / cfg.sample_rate
    cum = path.cumulative_arc()
    max_steps = int(math.ceil(cum[-1] / (cfg.v_min * dt))) + 3
    geo = env.geo
    params = np.array(
        [cfg.v_max, cfg.v_min, cfg.uphill_gain, cfg.downhill_gain, cfg.mass, cfg.gravity, cfg.idle_power, dt]
    )
    return (
        env.height.data,
        env.class_map.data,
        np.array([geo.origin_x, geo.origin_y, geo.resolution]),
        np.ascontiguousarray(path.points),
        cum,
        mu,
        kappa,
        params,
        max_steps,
    )


def simulate_run(env: Environment, cfg: OracleConfig, waypoints, run_id: int = 0) -> TrajectoryLog:
    """Drive the oracle robot along ``waypoints`` and log at ``cfg.sample_rate``.

    Current noise is drawn from a stream keyed by ``(cfg.seed, run_id)``.
    """
    path = waypoints if isinstance(waypoints, Path) else Path(waypoints)
    status, k, out = kernels.simulate(*simulation_inputs(env, cfg, path))
    if status == 1:
        raise OutOfBounds(f"path leaves the raster after {k} records")
    if status == 2:
        raise NonTraversable(f"path crosses non-traversable terrain after {k} records")
    if status != 0:
        raise TerracostError("simulation exceeded its step budget")
    out = out[:k]
    noise = SplitMix64(derive_seed(cfg.seed, "current", run_id)).normal(k) * cfg.current_noise
    voltage = np.full(k, cfg.battery_voltage)
    current = out[:, 4] / cfg.battery_voltage + noise
    return TrajectoryLog(out[:, 0].copy(), out[:, 1].copy(), out[:, 2].copy(), voltage, current, out[:, 3].copy())


def segment_is_traversable(env: Environment, a, b) -> bool:
    """True when the straight line a->b stays on traversable in-bounds cells."""
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(2, int(math.ceil(length / (0.5 * env.geo.resolution))) + 1)
    xs = np.linspace(a[0], b[0], n)
    ys = np.linspace(a[1], b[1], n)
    rows, cols = world_to_grid(env.geo, xs, ys)
    h, w = env.shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() > h - 1 or cols.max() > w - 1:
        return False
    labels = kernels.nearest_numpy(env.class_map.data, rows, cols).astype(np.int64)
    return bool(np.isin(labels, sorted(env.traversable)).all())


def coverage_tours(
    env: Environment,
    n_tours: int,
    tour_length: float,
    seed: int,
    *,
    margin: float = 0.8,
    leg_range=(2.0, 8.0),
    max_tries: int = 200,
) -> list[np.ndarray]:
    """Random-waypoint tours that keep ``margin`` meters of traversable clearance.

    Each leg is checked with :func:`segment_is_traversable` on both the leg and
    its two offsets at ``margin``, so patches along the tour stay extractable.
    """
    h, w = env.shape
    res = env.geo.resolution
    x0, y0 = env.geo.origin_x, env.geo.origin_y - (h - 1) * res
    x1, y1 = env.geo.origin_x + (w - 1) * res, env.geo.origin_y
    tours = []
    for k in range(n_tours):
        rng = SplitMix64(derive_seed(seed, "tour", k))
        start = None
        for _ in range(max_tries):
            cand = (float(rng.uniform(x0, x1, 1)[0]), float(rng.uniform(y0, y1, 1)[0]))
            if _clear(env, cand, cand, margin):
                start = cand
                break
        if start is None:
            raise NonTraversable("no traversable start point found for a tour")
        pts = [start]
        total = 0.0
        while total < tour_length:
            for _ in range(max_tries):
                ang = float(rng.uniform(0, 2 * math.pi, 1)[0])
                leg = float(rng.uniform(leg_range[0], leg_range[1], 1)[0])
                cand = (pts[-1][0] + leg * math.cos(ang), pts[-1][1] + leg * math.sin(ang))
                if _clear(env, pts[-1], cand, margin):
                    pts.append(cand)
                    total += leg
                    break
            else:
                break
        tours.append(np.array(pts))
    return tours


def _clear(env, a, b, margin):
    dx, dy = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(dx, dy)
    if norm == 0:
        offsets = [(margin, 0.0), (-margin, 0.0), (0.0, margin), (0.0, -margin)]
        return all(segment_is_traversable(env, (a[0] + ox, a[1] + oy), (a[0] - ox, a[1] - oy)) for ox, oy in offsets)
    nx, ny = -dy / norm * margin, dx / norm * margin
    ex, ey = dx / norm * margin, dy / norm * margin
    a2 = (a[0] - ex, a[1] - ey)
    b2 = (b[0] + ex, b[1] + ey)
    return all(
        segment_is_traversable(env, (a2[0] + s * nx, a2[1] + s * ny), (b2[0] + s * nx, b2[1] + s * ny))
        for s in (-1.0, 0.0, 1.0)
    )


def with_seed(cfg: OracleConfig, seed: int) -> OracleConfig:
    return replace(cfg, seed=seed)
