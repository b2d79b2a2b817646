"""Metrics, per-terrain breakdowns, input-layer ablation and baselines."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from terracost.errors import EmptyDataset, EmptySplit, InvalidArg, ZeroTruth
from terracost.patchex import Dataset, Split
from terracost.regnet.model import HEIGHT_ONLY, Model, ModelSpec
from terracost.regnet.train import TrainConfig, train
from terracost.rng import SplitMix64, derive_seed
from terracost.synthgen import DEFAULT_TERRAIN

log = logging.getLogger(__name__)

VARIABLES = ("w", "v", "T", "E")
LAYER_INDEX = {"O": 0, "C": 1, "H": 2}
DEFAULT_NAMES = {tp.class_label: tp.name for tp in DEFAULT_TERRAIN}


def ape(pred: float, truth: float) -> float:
    if truth == 0:
        raise ZeroTruth("absolute percentage error is undefined for a zero truth")
    return abs(pred - truth) / truth


@dataclass
class GroupMetrics:
    count: int
    rmse: dict
    mape: dict
    sse: dict
    mape_count: dict


@dataclass
class Series:
    """Per-sample values for one variable, in evaluation order."""

    terrain: list
    truth: np.ndarray
    pred: np.ndarray
    ape: np.ndarray


@dataclass
class MetricReport:
    groups: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    excluded: int = 0

    def get(self, group: str, variable: str, metric: str = "mape") -> float:
        g = self.groups[group]
        return getattr(g, metric)[variable]

    def rows(self):
        for name, g in self.groups.items():
            for var in g.rmse:
                yield name, var, g.rmse[var], g.mape[var], g.count

    def summary(self) -> str:
        lines = [f"{'group':<10}" + "".join(f"{v + ' rmse':>12}{v + ' mape%':>12}" for v in VARIABLES)]
        for name, g in self.groups.items():
            cells = "".join(
                f"{g.rmse.get(v, float('nan')):>12.4f}{100 * g.mape.get(v, float('nan')):>12.2f}" for v in VARIABLES
            )
            lines.append(f"{name:<10}{cells}")
        return "\n".join(lines)


def _metrics(pred: np.ndarray, truth: np.ndarray):
    err = pred - truth
    sse = float(np.sum(err**2))
    rmse = math.sqrt(sse / len(err)) if len(err) else float("nan")
    ok = truth != 0
    mape = float(np.mean(np.abs(err[ok]) / np.abs(truth[ok]))) if ok.any() else float("nan")
    return rmse, mape, sse, int(ok.sum())


def metric_report(values: dict, labels: np.ndarray, names: dict | None = None) -> MetricReport:
    """Build grouped RMSE/MAPE from ``values[var] = (pred, truth)`` arrays."""
    names = DEFAULT_NAMES if names is None else names
    report = MetricReport()
    label_names = [names.get(int(k), str(int(k))) for k in labels]
    groups = [(names.get(int(k), str(int(k))), labels == k) for k in np.unique(labels)]
    groups.append(("All", np.ones(len(labels), dtype=bool)))
    excluded = 0
    for var, (pred, truth) in values.items():
        zero = truth == 0
        if zero.any():
            excluded += int(zero.sum())
            log.warning("%d samples with zero %s truth excluded from MAPE", int(zero.sum()), var)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(zero, np.nan, np.abs(pred - truth) / np.where(zero, 1.0, truth))
        report.series[var] = Series(label_names, truth, pred, a)
    for gname, mask in groups:
        gm = GroupMetrics(int(mask.sum()), {}, {}, {}, {})
        for var, (pred, truth) in values.items():
            gm.rmse[var], gm.mape[var], gm.sse[var], gm.mape_count[var] = _metrics(pred[mask], truth[mask])
        report.groups[gname] = gm
    report.excluded = excluded
    return report


def _select(ds: Dataset, split, indices):
    if indices is not None:
        idx = np.asarray(indices)
    elif split is None:
        idx = np.arange(len(ds))
    else:
        idx = ds.indices(Split(split))
    if len(idx) == 0:
        raise EmptySplit(f"no samples in split {split}")
    return idx


def report_from_predictions(w_hat, v_hat, ds: Dataset, idx, d: float, names=None) -> MetricReport:
    w_star = ds.w_star[idx]
    v_star = ds.v_star[idx]
    t_hat = d / v_hat
    t_star = d / v_star
    values = {
        "w": (np.asarray(w_hat, float), w_star),
        "v": (np.asarray(v_hat, float), v_star),
        "T": (t_hat, t_star),
        "E": (w_hat * t_hat, w_star * t_star),
    }
    return metric_report(values, ds.class_label[idx], names)


def evaluate(predictor, ds: Dataset, split=Split.TEST, d: float = 1.0, *, indices=None, names=None) -> MetricReport:
    """Predict every selected sample and report w, v, T = d/v and E = w d / v."""
    idx = _select(ds, split, indices)
    w_hat, v_hat = predictor.predict(ds.planes[idx])
    return report_from_predictions(np.asarray(w_hat, float), np.asarray(v_hat, float), ds, idx, d, names)


@dataclass(frozen=True)
class AblationSpec:
    kept_layers: frozenset
    noise_seed: int = 0
    allow_empty: bool = False

    def __post_init__(self):
        kept = frozenset(str(k).upper() for k in self.kept_layers)
        if not kept <= set(LAYER_INDEX):
            raise InvalidArg(f"kept_layers must be a subset of {{O, H, C}}, got {sorted(kept)}")
        if not kept and not self.allow_empty:
            raise InvalidArg("ablating every layer requires allow_empty=True")
        object.__setattr__(self, "kept_layers", kept)

    @property
    def label(self) -> str:
        return "{" + ",".join(k for k in "OHC" if k in self.kept_layers) + "}"


def ablate_planes(planes: np.ndarray, idx: np.ndarray, spec: AblationSpec) -> np.ndarray:
    """Copy of ``planes`` with every non-kept layer replaced by seeded U[0, 1) noise.

    The noise for dataset sample ``i`` and layer ``k`` comes from its own
    stream, so it does not depend on which other samples are evaluated.
    """
    out = np.array(planes, dtype=np.float32, copy=True)
    s = out.shape[-1]
    drop = [LAYER_INDEX[k] for k in "OCH" if k not in spec.kept_layers]
    for row, i in enumerate(idx):
        for layer in drop:
            rng = SplitMix64(derive_seed(spec.noise_seed, "ablate", int(i), layer))
            out[row, layer] = rng.random(s * s).reshape(s, s)
    return out


def ablate_and_evaluate(
    model, ds: Dataset, spec: AblationSpec, d: float = 1.0, split=Split.TEST, *, indices=None, names=None
) -> MetricReport:
    idx = _select(ds, split, indices)
    planes = ds.planes[idx]
    if spec.kept_layers != frozenset(LAYER_INDEX):
        planes = ablate_planes(planes, idx, spec)
    w_hat, v_hat = model.predict(planes)
    return report_from_predictions(np.asarray(w_hat, float), np.asarray(v_hat, float), ds, idx, d, names)


def height_only_spec(spec: ModelSpec) -> ModelSpec:
    return ModelSpec(
        spec.input_side,
        HEIGHT_ONLY,
        spec.stem_channels,
        spec.stem_stride,
        spec.channels_per_stage,
        spec.blocks_per_stage,
    )


def step_matched(cfg: TrainConfig, full_count: int, subset_count: int) -> TrainConfig:
    """``cfg`` with epochs scaled so a subset run takes as many optimizer steps as a full run."""
    if subset_count <= 0:
        raise EmptyDataset("cannot match steps on an empty subset")
    epochs = math.ceil(cfg.epochs * full_count / subset_count)
    return dataclasses.replace(cfg, epochs=epochs)


def baseline_height_only(
    ds: Dataset, spec: ModelSpec, cfg: TrainConfig, class_label: int | None = None, *, match_steps: bool = False, **kw
):
    """Height-plane-only regressor of the same residual family.

    With ``class_label`` set, trains on that class only (variant a) and
    returns one Model.  With ``class_label=None`` trains one model per class
    present in the Train split (variant b, "retrained") and returns
    ``{label: Model}``.  ``match_steps`` scales the epochs so each model gets
    as many optimizer steps as ``cfg`` gives a run on the whole Train split.
    """
    hspec = height_only_spec(spec)
    if class_label is not None:
        tr = ds.indices(Split.TRAIN, class_label)
        te = ds.indices(Split.TEST, class_label)
        if len(tr) == 0:
            raise EmptyDataset(f"no training samples of class {class_label}")
        if match_steps:
            cfg = step_matched(cfg, len(ds.indices(Split.TRAIN)), len(tr))
        return train(ds, hspec, cfg, train_idx=tr, test_idx=te, **kw)
    labels = np.unique(ds.class_label[ds.indices(Split.TRAIN)])
    if len(labels) == 0:
        raise EmptyDataset("the training split is empty")
    return {int(k): baseline_height_only(ds, spec, cfg, int(k), match_steps=match_steps, **kw) for k in labels}


class PerClassPredictor:
    """Routes each sample to the model trained on its (known) terrain class."""

    def __init__(self, models: dict, labels: np.ndarray):
        self.models = models
        self.labels = labels

    def predict(self, planes):
        w = np.empty(len(planes))
        v = np.empty(len(planes))
        for k, m in self.models.items():
            sel = self.labels == k
            if sel.any():
                w[sel], v[sel] = m.predict(planes[sel])
        missing = ~np.isin(self.labels, list(self.models))
        if missing.any():
            raise EmptyDataset(f"no per-class model for labels {sorted(set(self.labels[missing].tolist()))}")
        return w, v


def evaluate_per_class(models: dict, ds: Dataset, split=Split.TEST, d: float = 1.0, *, indices=None, names=None):
    idx = _select(ds, split, indices)
    return evaluate(PerClassPredictor(models, ds.class_label[idx]), ds, None, d, indices=idx, names=names)


def baseline_expected_time(ds: Dataset, v_e: float = 1.0, d: float = 1.0, split=Split.TEST, *, indices=None, names=None):
    """Constant traversal-time baseline T_e = d / v_e; only T is reported."""
    if not v_e > 0:
        raise InvalidArg("expected velocity must be positive")
    idx = _select(ds, split, indices)
    t_star = d / ds.v_star[idx]
    t_hat = np.full(len(idx), d / v_e)
    return metric_report({"T": (t_hat, t_star)}, ds.class_label[idx], names)


# -- outputs -------------------------------------------------------------------------------------


REPORT_HEADER = ("group", "variable", "rmse", "mape", "count")
SERIES_HEADER = ("patch_no", "terrain", "truth", "pred", "ape")


def write_report_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for name, var, rmse, mape, count in report.rows():
            w.writerow([name, var, repr(rmse), repr(mape), count])


def read_report_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["group"], r["variable"], float(r["rmse"]), float(r["mape"]), int(r["count"])) for r in rows]


def write_series_csv(report: MetricReport, variable: str, path) -> None:
    s = report.series[variable]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for i in range(len(s.truth)):
            w.writerow([i, s.terrain[i], repr(float(s.truth[i])), repr(float(s.pred[i])), repr(float(s.ape[i]))])


def render_svg(report: MetricReport, variables=VARIABLES, width: int = 900, panel_height: int = 180) -> str:
    """Prediction-vs-truth and APE panels per variable, samples grouped by terrain."""
    variables = [v for v in variables if v in report.series]
    margin = 50
    height = margin + len(variables) * 2 * (panel_height + 30)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    y0 = margin // 2
    for var in variables:
        s = report.series[var]
        order = sorted(range(len(s.truth)), key=lambda i: (s.terrain[i], i))
        truth = np.asarray(s.truth)[order]
        pred = np.asarray(s.pred)[order]
        err = np.nan_to_num(np.asarray(s.ape)[order] * 100.0)
        terr = [s.terrain[i] for i in order]
        for title, lines in ((f"{var}: truth (black) vs prediction (red)", (truth, pred)), (f"{var}: APE (%)", (err,))):
            out.append(f'<text x="{margin}" y="{y0 + 12}">{escape(title)}</text>')
            top, bottom = y0 + 20, y0 + 20 + panel_height - 20
            out.append(f'<rect x="{margin}" y="{top}" width="{width - 2 * margin}" height="{bottom - top}" '
                       'fill="none" stroke="#999"/>')
            allv = np.concatenate(lines) if len(lines[0]) else np.zeros(1)
            lo, hi = float(np.min(allv)), float(np.max(allv))
            hi = hi if hi > lo else lo + 1.0
            n = max(len(lines[0]) - 1, 1)

            def px(i):
                return margin + (width - 2 * margin) * i / n

            def py(v):
                return bottom - (bottom - top) * (v - lo) / (hi - lo)

            for colour, series in zip(("black", "red"), lines):
                pts = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(series))
                out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="0.8"/>')
            for i in range(1, len(terr)):
                if terr[i] != terr[i - 1]:
                    out.append(f'<line x1="{px(i):.1f}" y1="{top}" x2="{px(i):.1f}" y2="{bottom}" stroke="#36c" '
                               'stroke-dasharray="3,3"/>')
            starts = [0] + [i for i in range(1, len(terr)) if terr[i] != terr[i - 1]]
            for i in starts:
                out.append(f'<text x="{px(i) + 3:.1f}" y="{bottom - 4}" fill="#36c">{escape(str(terr[i]))}</text>')
            out.append(f'<text x="4" y="{top + 10}">{hi:.3g}</text><text x="4" y="{bottom}">{lo:.3g}</text>')
            y0 += panel_height + 30
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: MetricReport, path, format: str = "csv") -> None:
    fmt = format.lower()
    if fmt == "csv":
        write_report_csv(report, path)
    elif fmt == "svg":
        with open(path, "w", newline="\n") as fh:
            fh.write(render_svg(report))
    else:
        raise InvalidArg(f"unknown report format {format!r}")
