"""Geo-referenced rasters and the three-layer environment bundle.

Grid convention: cell ``(row, col)`` has its centre at
``x = origin_x + col * resolution`` and ``y = origin_y - row * resolution``, so
row 0 is the northernmost row, as in an orthophoto.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from terracost.errors import FormatError, InvalidArg, OutOfBounds

TCRS_MAGIC = b"TCRS"
TCRS_VERSION = 1
_TCRS_HEADER = struct.Struct("<4sHBBIIddd")


class RasterKind(enum.IntEnum):
    ORTHO = 0
    HEIGHT = 1
    CLASS = 2


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    resolution: float

    def __post_init__(self):
        if not self.resolution > 0:
            raise InvalidArg(f"resolution must be positive, got {self.resolution}")


def world_to_grid(geo: GeoTransform, x, y):
    """Fractional (row, col) of a world point; works elementwise on arrays."""
    col = (x - geo.origin_x) / geo.resolution
    row = (geo.origin_y - y) / geo.resolution
    return row, col


def grid_to_world(geo: GeoTransform, row, col):
    x = geo.origin_x + col * geo.resolution
    y = geo.origin_y - row * geo.resolution
    return x, y


@dataclass(frozen=True, eq=False)
class Raster:
    geo: GeoTransform
    kind: RasterKind
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.size == 0:
            raise InvalidArg(f"raster data must be a non-empty 2-D grid, got shape {arr.shape}")
        kind = RasterKind(self.kind)
        if kind == RasterKind.ORTHO and not (arr.min() >= 0.0 and arr.max() <= 1.0):
            raise InvalidArg("ortho values must lie in [0, 1]")
        if kind == RasterKind.CLASS and not (np.all(arr == np.rint(arr)) and arr.min() >= 0):
            raise InvalidArg("class values must be non-negative integers")
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "kind", kind)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.geo == other.geo
            and self.kind == other.kind
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _check_bounds(raster: Raster, row: float, col: float) -> None:
    if not (0.0 <= row <= raster.height - 1 and 0.0 <= col <= raster.width - 1):
        raise OutOfBounds(f"({row}, {col}) outside {raster.height}x{raster.width} raster")


def sample_bilinear(raster: Raster, row: float, col: float) -> float:
    if raster.kind == RasterKind.CLASS:
        raise InvalidArg("class rasters must be sampled with sample_nearest")
    _check_bounds(raster, row, col)
    r0 = min(int(math.floor(row)), raster.height - 1)
    c0 = min(int(math.floor(col)), raster.width - 1)
    r1 = min(r0 + 1, raster.height - 1)
    c1 = min(c0 + 1, raster.width - 1)
    fr = row - r0
    fc = col - c0
    d = raster.data
    top = (1.0 - fc) * float(d[r0, c0]) + fc * float(d[r0, c1])
    bottom = (1.0 - fc) * float(d[r1, c0]) + fc * float(d[r1, c1])
    return (1.0 - fr) * top + fr * bottom


def nearest_index(x):
    """Round to nearest integer with exact halves rounding down."""
    return np.ceil(np.asarray(x) - 0.5).astype(np.int64)


def sample_nearest(raster: Raster, row: float, col: float) -> float:
    if raster.kind != RasterKind.CLASS:
        raise InvalidArg("sample_nearest is reserved for class rasters")
    _check_bounds(raster, row, col)
    return float(raster.data[int(nearest_index(row)), int(nearest_index(col))])


@dataclass(frozen=True, eq=False)
class Environment:
    ortho: Raster
    height: Raster
    class_map: Raster
    num_classes: int
    traversable: frozenset

    def __post_init__(self):
        object.__setattr__(self, "traversable", frozenset(int(k) for k in self.traversable))
        shapes = {r.data.shape for r in (self.ortho, self.height, self.class_map)}
        geos = {r.geo for r in (self.ortho, self.height, self.class_map)}
        if len(shapes) != 1 or len(geos) != 1:
            raise InvalidArg("environment layers must share shape and geo-transform")
        if self.num_classes < 2:
            raise InvalidArg("num_classes must be at least 2")
        if not self.traversable or not all(1 <= k <= self.num_classes for k in self.traversable):
            raise InvalidArg(f"traversable labels must lie in [1, {self.num_classes}]")
        if (self.ortho.kind, self.height.kind, self.class_map.kind) != (
            RasterKind.ORTHO,
            RasterKind.HEIGHT,
            RasterKind.CLASS,
        ):
            raise InvalidArg("layers must be (ortho, height, class) rasters")

    @property
    def geo(self) -> GeoTransform:
        return self.height.geo

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.data.shape

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return (self.ortho, self.height, self.class_map, self.num_classes, self.traversable) == (
            other.ortho,
            other.height,
            other.class_map,
            other.num_classes,
            other.traversable,
        )

    __hash__ = None

    def traversable_mask(self) -> np.ndarray:
        return np.isin(self.class_map.data.astype(np.int64), sorted(self.traversable))


def save_raster(raster: Raster, path) -> None:
    header = _TCRS_HEADER.pack(
        TCRS_MAGIC,
        TCRS_VERSION,
        int(raster.kind),
        0,
        raster.width,
        raster.height,
        raster.geo.origin_x,
        raster.geo.origin_y,
        raster.geo.resolution,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster.data.astype("<f4", copy=False).tobytes())


def load_raster(path) -> Raster:
    blob = FsPath(path).read_bytes()
    if len(blob) < _TCRS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kind, _reserved, width, height, ox, oy, res = _TCRS_HEADER.unpack_from(blob)
    if magic != TCRS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TCRS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind not in (0, 1, 2):
        raise FormatError(f"{path}: unknown raster kind {kind}")
    expected = _TCRS_HEADER.size + 4 * width * height
    if len(blob) != expected or width == 0 or height == 0:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_TCRS_HEADER.size).reshape(height, width)
    try:
        geo = GeoTransform(ox, oy, res)
    except InvalidArg as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return Raster(geo, RasterKind(kind), data.astype(np.float32))


LAYER_FILES = {"ortho": "ortho.tcrs", "height": "height.tcrs", "class_map": "class.tcrs"}
ENV_CONFIG = "env.cfg"


def save_environment(env: Environment, directory) -> dict:
    """Write the three layers plus ``env.cfg``; returns {role: path}."""
    root = FsPath(directory)
    root.mkdir(parents=True, exist_ok=True)
    out = {}
    for attr, name in LAYER_FILES.items():
        save_raster(getattr(env, attr), root / name)
        out[attr] = root / name
    cfg = root / ENV_CONFIG
    cfg.write_text(
        f"num_classes = {env.num_classes}\ntraversable = {' '.join(str(k) for k in sorted(env.traversable))}\n"
    )
    out["config"] = cfg
    return out


def environment_files(directory) -> list:
    root = FsPath(directory)
    return [root / name for name in LAYER_FILES.values()] + [root / ENV_CONFIG]


def load_environment(directory) -> Environment:
    root = FsPath(directory)
    settings = {}
    for lineno, line in enumerate((root / ENV_CONFIG).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{root / ENV_CONFIG}:{lineno}: expected 'key = value'")
        settings[key.strip()] = value.strip()
    try:
        num_classes = int(settings["num_classes"])
        traversable = frozenset(int(k) for k in settings["traversable"].split())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{root / ENV_CONFIG}: missing or malformed num_classes/traversable") from exc
    layers = {attr: load_raster(root / name) for attr, name in LAYER_FILES.items()}
    try:
        return Environment(num_classes=num_classes, traversable=traversable, **layers)
    except InvalidArg as exc:
        raise FormatError(f"{root}: {exc}") from exc
