"""Heading-aligned environment patches and labelled datasets built from logs.

A patch is the d x d square whose west-edge midpoint is the segment start and
whose east-edge midpoint is the segment end, resampled into a canonical
east-facing frame of s x s cells.  The square is sampled at a pitch of
r / oversample, so s = oversample * d / r; the default oversample of 2 gives
the 40 x 40 input for d = 1 m at r = 0.05 m.  Planes, in order:

* ortho: grey value, already in [0, 1]
* class: label k mapped to (k - 1) / (c - 1)
* height: height above the patch minimum, divided by 1 m and clipped to [0, 1]
"""

from __future__ import annotations

import enum
import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from terracost import kernels
from terracost.envmodel import Environment, world_to_grid
from terracost.errors import (
    EmptyDataset,
    FormatError,
    InvalidArg,
    NonTraversable,
    OutOfBounds,
    ResolutionMismatch,
    TerracostError,
)
from terracost.pathseg import Path, Segment, segment_path
from terracost.rng import SplitMix64, derive_seed

HEIGHT_SCALE_M = 1.0
DEFAULT_OVERSAMPLE = 2
_SNAP = 1e-9


class Split(enum.IntEnum):
    TRAIN = 0
    TEST = 1
    VAL = 2


@dataclass(frozen=True, eq=False)
class Patch:
    planes: np.ndarray  # (3, s, s) float32: ortho, class, height
    heading_deg: float
    segment: Segment

    @property
    def s(self) -> int:
        return self.planes.shape[-1]


def patch_side(d: float, resolution: float, oversample: int = DEFAULT_OVERSAMPLE) -> int:
    ratio = d / resolution
    cells = int(round(ratio))
    if abs(ratio - cells) > 1e-6 or cells < 1:
        raise ResolutionMismatch(f"d={d} is not a whole number of {resolution} m cells")
    if int(oversample) != oversample or oversample < 1:
        raise InvalidArg("oversample must be a positive integer")
    return int(oversample) * cells


def _snap(idx: np.ndarray) -> np.ndarray:
    near = np.rint(idx)
    return np.where(np.abs(idx - near) < _SNAP, near, idx)


def patch_grid(env: Environment, seg: Segment, d: float, oversample: int = DEFAULT_OVERSAMPLE):
    """Fractional raster (rows, cols) of every patch cell centre, shape (s, s)."""
    s = patch_side(d, env.geo.resolution, oversample)
    r = d / s
    theta = math.radians(seg.heading_deg)
    ct, st = math.cos(theta), math.sin(theta)
    cx, cy = seg.midpoint
    offs = (np.arange(s) + 0.5) * r - d / 2.0
    along = offs[None, :]  # column j runs from the start edge to the end edge
    left = -offs[:, None]  # row 0 is the left-hand edge (north when heading east)
    xs = cx + along * ct - left * st
    ys = cy + along * st + left * ct
    rows, cols = world_to_grid(env.geo, xs, ys)
    return _snap(rows), _snap(cols)


def extract_patch(
    env: Environment, seg: Segment, d: float | None = None, oversample: int = DEFAULT_OVERSAMPLE
) -> Patch:
    if d is None:
        d = seg.chord
    rows, cols = patch_grid(env, seg, d, oversample)
    h, w = env.shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() > h - 1 or cols.max() > w - 1:
        raise OutOfBounds(f"patch around {seg.midpoint} leaves the raster")
    labels = kernels.nearest(env.class_map.data, rows, cols)
    allowed = np.isin(labels.astype(np.int64), sorted(env.traversable))
    if not allowed.all():
        raise NonTraversable(f"patch around {seg.midpoint} touches no-data or non-traversable cells")
    ortho = kernels.bilinear(env.ortho.data, rows, cols)
    heights = kernels.bilinear(env.height.data, rows, cols)
    planes = np.empty((3,) + rows.shape, dtype=np.float32)
    planes[0] = np.clip(ortho, 0.0, 1.0)
    planes[1] = (labels - 1.0) / (env.num_classes - 1)
    planes[2] = np.clip((heights - heights.min()) / HEIGHT_SCALE_M, 0.0, 1.0)
    return Patch(planes, seg.heading_deg, seg)


def modal_class(patch_planes: np.ndarray, num_classes: int) -> int:
    labels = np.rint(patch_planes[1] * (num_classes - 1)).astype(np.int64) + 1
    return int(np.bincount(labels.ravel()).argmax())


@dataclass(frozen=True)
class Sample:
    patch: np.ndarray
    w_star: float
    v_star: float
    class_label: int
    slope_deg: float
    split: Split = Split.TRAIN


@dataclass(eq=False)
class Dataset:
    """Column-oriented sample store; ``planes`` is (n, 3, s, s) float32."""

    planes: np.ndarray
    w_star: np.ndarray
    v_star: np.ndarray
    class_label: np.ndarray
    slope_deg: np.ndarray
    split: np.ndarray
    max_w: float
    max_v: float
    skipped: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float32)
        self.w_star = np.asarray(self.w_star, dtype=np.float64)
        self.v_star = np.asarray(self.v_star, dtype=np.float64)
        self.class_label = np.asarray(self.class_label, dtype=np.int64)
        self.slope_deg = np.asarray(self.slope_deg, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=np.int64)
        n = len(self.planes)
        if not all(len(a) == n for a in (self.w_star, self.v_star, self.class_label, self.slope_deg, self.split)):
            raise InvalidArg("dataset columns differ in length")
        if n and not (self.max_w > 0 and self.max_v > 0):
            raise InvalidArg("normalizers must be positive")

    def __len__(self):
        return len(self.planes)

    @property
    def s(self) -> int:
        return self.planes.shape[-1]

    def sample(self, i: int) -> Sample:
        return Sample(
            self.planes[i],
            float(self.w_star[i]),
            float(self.v_star[i]),
            int(self.class_label[i]),
            float(self.slope_deg[i]),
            Split(int(self.split[i])),
        )

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def indices(self, split: Split | None = None, class_label: int | None = None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.split == int(split)
        if class_label is not None:
            mask &= self.class_label == int(class_label)
        return np.flatnonzero(mask)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.planes[idx],
            self.w_star[idx],
            self.v_star[idx],
            self.class_label[idx],
            self.slope_deg[idx],
            self.split[idx],
            self.max_w,
            self.max_v,
        )


def _segment_labels(log, arc_rec, seg_index: int, d: float):
    a0, a1 = seg_index * d, (seg_index + 1) * d
    t0, t1 = np.interp([a0, a1], arc_rec, log.t)
    window = (log.t > t0) & (log.t <= t1)
    k = int(window.sum())
    if k < 3 or not t1 > t0:
        return None
    w_star = float(np.mean(log.voltage[window] * log.current[window]))
    v_star = d / (t1 - t0)
    return w_star, v_star


def _in_region(pt, region) -> bool:
    if region is None:
        return False
    xmin, ymin, xmax, ymax = region
    return xmin <= pt[0] <= xmax and ymin <= pt[1] <= ymax


def build_dataset(
    env: Environment,
    logs,
    d: float = 1.0,
    split=(0.8, 0.2),
    val_region=None,
    seed: int = 0,
    *,
    workers: int = 1,
    oversample: int = DEFAULT_OVERSAMPLE,
) -> Dataset:
    """Segment every log, label each segment from its records, extract patches.

    ``val_region`` is ``(xmin, ymin, xmax, ymax)`` in world meters; a segment
    whose midpoint lies inside is tagged Val.  Segments whose patch cannot be
    extracted, or that span fewer than three records, are skipped and counted
    in ``Dataset.skipped``.
    """
    logs = list(logs)
    if not logs:
        raise InvalidArg("at least one trajectory log is required")
    if len(split) != 2 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise InvalidArg("split fractions must be two non-negative numbers summing to 1")
    s = patch_side(d, env.geo.resolution, oversample)
    skipped: Counter = Counter()

    jobs = []
    for log in logs:
        if len(log) < 2:
            skipped["short_log"] += 1
            continue
        xy = np.stack([log.x, log.y], axis=1)
        arc_rec = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
        segments = segment_path(Path.from_trace(xy), d)
        for i, seg in enumerate(segments):
            jobs.append((log, arc_rec, i, seg))

    def work(job):
        log, arc_rec, i, seg = job
        labels = _segment_labels(log, arc_rec, i, d)
        if labels is None:
            return "few_records", None
        try:
            patch = extract_patch(env, seg, d, oversample)
        except TerracostError as exc:
            return type(exc).__name__, None
        h0, h1 = kernels.bilinear(
            env.height.data,
            *world_to_grid(env.geo, np.array([seg.start[0], seg.end[0]]), np.array([seg.start[1], seg.end[1]])),
        )
        slope = math.degrees(math.atan2(h1 - h0, seg.chord))
        return None, (patch.planes, labels[0], labels[1], modal_class(patch.planes, env.num_classes), slope,
                      _in_region(seg.midpoint, val_region))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    rows = []
    for reason, row in results:
        if row is None:
            skipped[reason] += 1
        else:
            rows.append(row)
    if not rows:
        raise EmptyDataset(f"no valid samples (skipped: {dict(skipped)})")

    planes = np.stack([r[0] for r in rows]) if rows else np.zeros((0, 3, s, s), np.float32)
    w = np.array([r[1] for r in rows])
    v = np.array([r[2] for r in rows])
    cls = np.array([r[3] for r in rows])
    slope = np.array([r[4] for r in rows])
    is_val = np.array([r[5] for r in rows], dtype=bool)

    tags = np.full(len(rows), int(Split.VAL))
    pool_idx = np.flatnonzero(~is_val)
    perm = SplitMix64(derive_seed(seed, "split")).permutation(len(pool_idx))
    n_train = int(round(split[0] * len(pool_idx)))
    tags[pool_idx[perm[:n_train]]] = int(Split.TRAIN)
    tags[pool_idx[perm[n_train:]]] = int(Split.TEST)

    ref = tags == int(Split.TRAIN)
    if not ref.any():
        ref = np.ones(len(rows), dtype=bool)
    return Dataset(planes, w, v, cls, slope, tags, float(w[ref].max()), float(v[ref].max()), skipped)


# -- TCPD file format ------------------------------------------------------------

TCPD_MAGIC = b"TCPD"
TCPD_VERSION = 1
_TCPD_HEADER = struct.Struct("<4sHIQ")
_TCPD_TRAILER = struct.Struct("<ff")


def _record_dtype(s: int) -> np.dtype:
    return np.dtype(
        [
            ("planes", "<f4", (3, s, s)),
            ("w_star", "<f4"),
            ("v_star", "<f4"),
            ("class_label", "u1"),
            ("slope_deg", "<f4"),
            ("split", "u1"),
        ]
    )


def save_dataset(ds: Dataset, path) -> None:
    s = ds.s if len(ds) else 0
    rec = np.zeros(len(ds), dtype=_record_dtype(s))
    rec["planes"] = ds.planes
    rec["w_star"] = ds.w_star
    rec["v_star"] = ds.v_star
    rec["class_label"] = ds.class_label
    rec["slope_deg"] = ds.slope_deg
    rec["split"] = ds.split
    with open(path, "wb") as fh:
        fh.write(_TCPD_HEADER.pack(TCPD_MAGIC, TCPD_VERSION, s, len(ds)))
        fh.write(rec.tobytes())
        fh.write(_TCPD_TRAILER.pack(ds.max_w, ds.max_v))


def load_dataset(path) -> Dataset:
    blob = FsPath(path).read_bytes()
    if len(blob) < _TCPD_HEADER.size + _TCPD_TRAILER.size:
        raise FormatError(f"{path}: truncated dataset file")
    magic, version, s, count = _TCPD_HEADER.unpack_from(blob)
    if magic != TCPD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TCPD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dtype = _record_dtype(s)
    body = len(blob) - _TCPD_HEADER.size - _TCPD_TRAILER.size
    if body != count * dtype.itemsize:
        raise FormatError(f"{path}: header declares {count} records but body holds {body / dtype.itemsize:g}")
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=_TCPD_HEADER.size)
    max_w, max_v = _TCPD_TRAILER.unpack_from(blob, len(blob) - _TCPD_TRAILER.size)
    if np.any(rec["split"] > 2):
        raise FormatError(f"{path}: invalid split tag")
    return Dataset(
        rec["planes"].copy(),
        rec["w_star"].astype(np.float64),
        rec["v_star"].astype(np.float64),
        rec["class_label"].astype(np.int64),
        rec["slope_deg"].astype(np.float64),
        rec["split"].astype(np.int64),
        float(max_w),
        float(max_v),
    )
