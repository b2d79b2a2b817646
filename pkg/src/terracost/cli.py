"""``terracost`` command line: one subcommand per pipeline stage.

Exit codes: 0 ok, 2 usage, 3 I/O or file format, 4 domain error.  Every
command writes a JSON manifest with the sha256 of each input and output
file; manifests hold basenames only and no timestamps so identical runs
produce identical bytes.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import itertools
import json
import logging
import os
import platform
import sys
from pathlib import Path as FsPath

import numpy as np

from terracost import __version__, _jit
from terracost import costing, envmodel, evalharness, patchex, synthgen
from terracost.errors import FormatError, TerracostError
from terracost.pathseg import read_path_csv
from terracost.regnet import ModelSpec, TrainConfig, load_model, save_model, train

log = logging.getLogger("terracost")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DOMAIN = 0, 2, 3, 4
ORACLE_CONFIG = "oracle.cfg"
SPLITS = {"train": patchex.Split.TRAIN, "test": patchex.Split.TEST, "val": patchex.Split.VAL, "all": None}


class UsageError(Exception):
    pass


# -- argument types ----------------------------------------------------------------------------


def _size(text: str):
    try:
        w, h = (float(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT in meters, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _floats(n: int):
    def parse(text: str):
        try:
            vals = tuple(float(p) for p in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals

    return parse


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _layers(text: str) -> frozenset:
    kept = frozenset(text.upper()) - {",", "{", "}", " "}
    if not kept <= set("OHC"):
        raise argparse.ArgumentTypeError(f"layers must be drawn from O, H, C; got {text!r}")
    return kept


def _default_seed() -> int:
    raw = os.environ.get("TERRACOST_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TERRACOST_SEED must be an integer, got {raw!r}") from None


# -- manifests ---------------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hashes(paths) -> dict:
    out = {}
    for p in sorted({FsPath(p) for p in paths}, key=str):
        out[p.name if p.name not in out else str(p)] = sha256_file(p)
    return out


PATH_ARGS = frozenset(
    {"env", "logs", "out", "dataset", "model", "grid", "path", "svg", "series", "cost_out", "oracle_config",
     "waypoints"}
)


def _portable(key: str, value):
    if value is not None and key in PATH_ARGS:
        return FsPath(value).name
    if isinstance(value, (frozenset, set)):
        return sorted(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def write_manifest(path, command: str, args: argparse.Namespace, inputs, outputs, extra=None) -> None:
    settings = {k: _portable(k, v) for k, v in sorted(vars(args).items()) if k not in ("func", "manifest", "verbose")}
    doc = {
        "command": command,
        "terracost": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "backend": _jit.backend(),
        "settings": settings,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
    }
    if extra:
        doc["results"] = extra
    FsPath(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest_path(args, output: FsPath) -> FsPath:
    if args.manifest is not None:
        return FsPath(args.manifest)
    if output.is_dir():
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")


# -- shared loaders ----------------------------------------------------------------------------


def _oracle_config(args, env_dir: FsPath | None = None) -> tuple:
    path = getattr(args, "oracle_config", None)
    if path is None and env_dir is not None and (env_dir / ORACLE_CONFIG).exists():
        path = env_dir / ORACLE_CONFIG
    if path is None:
        return synthgen.OracleConfig(), []
    return synthgen.read_oracle_config(path), [FsPath(path)]


def _predictor(args, env: envmodel.Environment, env_dir: FsPath):
    """Trained model from ``--model`` or, with ``--oracle``, the physics oracle."""
    if args.model is not None:
        return load_model(args.model), [FsPath(args.model)]
    if not args.oracle:
        raise UsageError("either --model or --oracle is required")
    cfg, inputs = _oracle_config(args, env_dir)
    s = patchex.patch_side(args.d, env.geo.resolution, args.oversample)
    return synthgen.OraclePredictor(cfg, env.num_classes, args.d / s), inputs


def _require_file(path, what: str) -> FsPath:
    p = FsPath(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _log_files(directory: FsPath) -> list:
    files = sorted(directory.glob("tour_*.csv"))
    if not files:
        raise FileNotFoundError(f"no tour_*.csv logs in {directory}")
    return files


# -- commands ----------------------------------------------------------------------------------


def cmd_gen_env(args) -> None:
    width, height = args.size
    env = synthgen.generate_environment(
        width,
        height,
        resolution=args.resolution,
        roughness=args.roughness,
        max_slope=args.max_slope,
        seed=args.seed,
    )
    out = FsPath(args.out)
    files = envmodel.save_environment(env, out)
    cfg = synthgen.with_seed(synthgen.OracleConfig(), args.seed)
    synthgen.write_oracle_config(cfg, out / ORACLE_CONFIG)
    outputs = list(files.values()) + [out / ORACLE_CONFIG]
    extra = {"rows": env.shape[0], "cols": env.shape[1], "max_slope_deg": round(synthgen.steepest_slope_deg(
        env.height.data, env.geo.resolution), 6)}
    write_manifest(_manifest_path(args, out), "gen-env", args, [], outputs, extra)


def cmd_record(args) -> None:
    env_dir = FsPath(args.env)
    env = envmodel.load_environment(env_dir)
    cfg, cfg_inputs = _oracle_config(args, env_dir)
    cfg = synthgen.with_seed(cfg, args.seed)
    if args.waypoints is not None:
        tours = [read_path_csv(_require_file(args.waypoints, "waypoint file")).points]
        cfg_inputs.append(FsPath(args.waypoints))
    else:
        tours = synthgen.coverage_tours(env, args.tours, args.tour_length, args.seed)
    out = FsPath(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    seen = set()
    for i, tour in enumerate(tours):
        trace = synthgen.simulate_run(env, cfg, tour, run_id=i)
        path = out / f"tour_{i:03d}.csv"
        synthgen.write_log_csv(trace, path)
        outputs.append(path)
        rows, cols = envmodel.world_to_grid(env.geo, trace.x, trace.y)
        seen.update(np.unique(env.class_map.data[envmodel.nearest_index(rows), envmodel.nearest_index(cols)]).astype(int))
    covered = sorted(int(k) for k in seen if k in env.traversable)
    missing = sorted(env.traversable - set(covered))
    if missing:
        log.warning("tours did not visit traversable classes %s", missing)
    inputs = envmodel.environment_files(env_dir) + cfg_inputs
    write_manifest(_manifest_path(args, out), "record", args, inputs, outputs,
                   {"tours": len(tours), "classes_covered": covered})


def cmd_build_dataset(args) -> None:
    env_dir = FsPath(args.env)
    env = envmodel.load_environment(env_dir)
    logs_dir = FsPath(args.logs)
    files = _log_files(logs_dir)
    logs = [synthgen.read_log_csv(f) for f in files]
    ds = patchex.build_dataset(
        env,
        logs,
        args.d,
        args.split,
        args.val_region,
        args.seed,
        workers=args.threads,
        oversample=args.oversample,
    )
    out = FsPath(args.out)
    patchex.save_dataset(ds, out)
    counts = np.bincount(ds.split, minlength=3)
    extra = {
        "samples": len(ds),
        "train": int(counts[patchex.Split.TRAIN]),
        "test": int(counts[patchex.Split.TEST]),
        "val": int(counts[patchex.Split.VAL]),
        "skipped": dict(sorted(ds.skipped.items())),
    }
    write_manifest(_manifest_path(args, out), "build-dataset", args, envmodel.environment_files(env_dir) + files,
                   [out], extra)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        optimizer=args.optimizer,
        seed=args.seed,
    )


def cmd_train(args) -> None:
    src = _require_file(args.dataset, "dataset")
    ds = patchex.load_dataset(src)
    layers = tuple(evalharness.LAYER_INDEX[k] for k in "OCH" if k in args.layers)
    spec = ModelSpec(input_side=ds.s, input_layers=layers)
    train_idx = test_idx = None
    if args.class_label is not None:
        train_idx = ds.indices(patchex.Split.TRAIN, args.class_label)
        test_idx = ds.indices(patchex.Split.TEST, args.class_label)
    model = train(ds, spec, _train_config(args), train_idx=train_idx, test_idx=test_idx)
    out = FsPath(args.out)
    save_model(model, out)
    history = model.meta["history"]
    write_manifest(_manifest_path(args, out), "train", args, [src], [out], {"final": history[-1] if history else None})


def _report_results(report: evalharness.MetricReport) -> dict:
    return {f"{g}/{v}": {"rmse": rmse, "mape": mape, "count": n} for g, v, rmse, mape, n in report.rows()}


def cmd_eval(args) -> None:
    model_path = _require_file(args.model, "model")
    ds_path = _require_file(args.dataset, "dataset")
    model = load_model(model_path)
    ds = patchex.load_dataset(ds_path)
    report = evalharness.evaluate(model, ds, SPLITS[args.split], args.d)
    out = FsPath(args.out)
    evalharness.emit_report(report, out, "csv")
    outputs = [out]
    if args.svg:
        evalharness.emit_report(report, args.svg, "svg")
        outputs.append(FsPath(args.svg))
    if args.series:
        evalharness.write_series_csv(report, args.variable, args.series)
        outputs.append(FsPath(args.series))
    print(report.summary())
    write_manifest(_manifest_path(args, out), "eval", args, [model_path, ds_path], outputs, _report_results(report))


def _all_layer_subsets():
    for n in (3, 2, 1):
        for combo in itertools.combinations("OHC", n):
            yield frozenset(combo)


def cmd_ablate(args) -> None:
    model_path = _require_file(args.model, "model")
    ds_path = _require_file(args.dataset, "dataset")
    model = load_model(model_path)
    ds = patchex.load_dataset(ds_path)
    subsets = [args.keep] if args.keep is not None else list(_all_layer_subsets())
    out = FsPath(args.out)
    results = {}
    with open(out, "w", newline="\n") as fh:
        fh.write("kept," + ",".join(evalharness.REPORT_HEADER) + "\n")
        for kept in subsets:
            spec = evalharness.AblationSpec(kept, args.noise_seed)
            report = evalharness.ablate_and_evaluate(model, ds, spec, args.d, SPLITS[args.split])
            for g, v, rmse, mape, n in report.rows():
                fh.write(f'"{spec.label}",{g},{v},{rmse!r},{mape!r},{n}\n')
            results[spec.label] = report.get("All", "E")
            print(f"{spec.label:<10} E MAPE {100 * results[spec.label]:6.2f}%")
    write_manifest(_manifest_path(args, out), "ablate", args, [model_path, ds_path], [out], {"E_mape": results})


def cmd_baselines(args) -> None:
    model_path = _require_file(args.model, "model")
    ds_path = _require_file(args.dataset, "dataset")
    model = load_model(model_path)
    ds = patchex.load_dataset(ds_path)
    split = SPLITS[args.split]
    cfg = _train_config(args)
    reports = {"full": evalharness.evaluate(model, ds, split, args.d)}
    labels = [int(k) for k in np.unique(ds.class_label[ds.indices(patchex.Split.TRAIN)])]
    single = args.class_label if args.class_label is not None else labels[0]
    hmodel = evalharness.baseline_height_only(ds, model.spec, cfg, single, match_steps=args.match_steps)
    reports[f"height_only_class{single}"] = evalharness.evaluate(hmodel, ds, split, args.d)
    if args.per_class:
        per = evalharness.baseline_height_only(ds, model.spec, cfg, None, match_steps=args.match_steps)
        reports["height_only_per_class"] = evalharness.evaluate_per_class(per, ds, split, args.d)
    reports["expected_time"] = evalharness.baseline_expected_time(ds, args.v_expected, args.d, split)
    out = FsPath(args.out)
    results = {}
    with open(out, "w", newline="\n") as fh:
        fh.write("method," + ",".join(evalharness.REPORT_HEADER) + "\n")
        for method, report in reports.items():
            for g, v, rmse, mape, n in report.rows():
                fh.write(f"{method},{g},{v},{rmse!r},{mape!r},{n}\n")
            results[method] = {v: report.get("All", v) for v in report.groups["All"].mape}
            print(method, " ".join(f"{v}={100 * m:.2f}%" for v, m in results[method].items()))
    write_manifest(_manifest_path(args, out), "baselines", args, [model_path, ds_path], [out], results)


def cmd_path_cost(args) -> None:
    env_dir = FsPath(args.env)
    env = envmodel.load_environment(env_dir)
    predictor, pred_inputs = _predictor(args, env, env_dir)
    path_file = _require_file(args.path, "path file")
    cost = costing.path_cost(env, predictor, read_path_csv(path_file), args.d, args.oversample)
    out = FsPath(args.out)
    costing.write_path_cost_csv(cost, out)
    print(f"time {cost.traversal_time:.3f} s  energy {cost.energy:.3f} J  segments {len(cost.per_segment)}")
    write_manifest(_manifest_path(args, out), "path-cost", args,
                   envmodel.environment_files(env_dir) + pred_inputs + [path_file], [out],
                   {"time_s": cost.traversal_time, "energy_j": cost.energy})


def cmd_build_grid(args) -> None:
    env_dir = FsPath(args.env)
    env = envmodel.load_environment(env_dir)
    predictor, pred_inputs = _predictor(args, env, env_dir)
    grid = costing.build_cost_grid(env, predictor, args.d, oversample=args.oversample, workers=args.threads)
    out = FsPath(args.out)
    costing.write_cost_grid_csv(grid, out)
    write_manifest(_manifest_path(args, out), "build-grid", args, envmodel.environment_files(env_dir) + pred_inputs,
                   [out], {"edges": int(np.isfinite(grid.time).sum())})


def cmd_plan(args) -> None:
    env_dir = FsPath(args.env)
    env = envmodel.load_environment(env_dir)
    grid_file = _require_file(args.grid, "cost grid")
    geo, nodes = costing.lattice(env, args.d)
    grid = costing.read_cost_grid_csv(grid_file, geo, nodes)
    route, cost = costing.plan(grid, args.start, args.goal, args.objective)
    out = FsPath(args.out)
    points = route.points if route is not None else np.array([grid.node_xy(*grid.snap(*args.start))])
    with open(out, "w", newline="\n") as fh:
        fh.write("x,y\n")
        for x, y in points:
            fh.write(f"{float(x)!r},{float(y)!r}\n")
    outputs = [out]
    if args.cost_out:
        costing.write_path_cost_csv(cost, args.cost_out)
        outputs.append(FsPath(args.cost_out))
    print(f"{args.objective}: time {cost.traversal_time:.3f} s  energy {cost.energy:.3f} J  "
          f"length {cost.covered_length:.3f} m")
    write_manifest(_manifest_path(args, out), "plan", args, envmodel.environment_files(env_dir) + [grid_file], outputs,
                   {"time_s": cost.traversal_time, "energy_j": cost.energy, "nodes": len(points)})


def cmd_report(args) -> None:
    model_path = _require_file(args.model, "model")
    ds_path = _require_file(args.dataset, "dataset")
    report = evalharness.evaluate(load_model(model_path), patchex.load_dataset(ds_path), SPLITS[args.split], args.d)
    out = FsPath(args.out)
    if args.format == "series":
        evalharness.write_series_csv(report, args.variable, out)
    else:
        evalharness.emit_report(report, out, args.format)
    write_manifest(_manifest_path(args, out), "report", args, [model_path, ds_path], [out])


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (default: $TERRACOST_SEED or 0)")
    common.add_argument("--threads", type=int, default=1, help="worker and BLAS threads; 1 is bit-reproducible")
    common.add_argument("--manifest", default=None, help="manifest path (default: next to the output)")
    common.add_argument("-v", "--verbose", action="store_true")

    def geometry(p):
        p.add_argument("--d", type=_positive, default=1.0, help="segment length in meters")
        p.add_argument("--oversample", type=int, default=patchex.DEFAULT_OVERSAMPLE)

    def training(p):
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--lr", type=_positive, default=1e-4)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")

    parser = argparse.ArgumentParser(prog="terracost", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"terracost {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-env", parents=[common], help="generate a synthetic environment")
    p.add_argument("--size", type=_size, required=True, help="WIDTHxHEIGHT in meters")
    p.add_argument("--resolution", type=_positive, default=0.05)
    p.add_argument("--roughness", type=float, default=0.3)
    p.add_argument("--max-slope", type=_positive, default=22.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("record", parents=[common], help="simulate robot runs over coverage tours")
    p.add_argument("--env", required=True)
    p.add_argument("--oracle-config", default=None)
    p.add_argument("--tours", type=int, default=8)
    p.add_argument("--tour-length", type=_positive, default=1100.0)
    p.add_argument("--waypoints", default=None, help="x,y CSV for a single explicit tour")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("build-dataset", parents=[common], help="segment logs and extract patches")
    p.add_argument("--env", required=True)
    p.add_argument("--logs", required=True)
    geometry(p)
    p.add_argument("--split", type=_floats(2), default=(0.8, 0.2), help="train,test fractions")
    p.add_argument("--val-region", type=_floats(4), default=None, help="xmin,ymin,xmax,ymax")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", parents=[common], help="train the regression network")
    p.add_argument("--dataset", required=True)
    training(p)
    p.add_argument("--layers", type=_layers, default=frozenset("OHC"), help="input layers, e.g. OHC or H")
    p.add_argument("--class-label", type=int, default=None, help="train on one terrain class only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def model_eval(p, default_split="test"):
        p.add_argument("--model", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--split", choices=sorted(SPLITS), default=default_split)
        p.add_argument("--d", type=_positive, default=1.0)

    p = sub.add_parser("eval", parents=[common], help="per-terrain RMSE and MAPE of w, v, T, E")
    model_eval(p)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", default=None)
    p.add_argument("--series", default=None)
    p.add_argument("--variable", choices=evalharness.VARIABLES, default="E")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="replace input layers with noise")
    model_eval(p, "val")
    p.add_argument("--keep", type=_layers, default=None, help="single subset to keep (default: all)")
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baselines", parents=[common], help="height-only and constant-time baselines")
    model_eval(p, "val")
    training(p)
    p.add_argument("--class-label", type=int, default=None, help="class for the single-class baseline")
    p.add_argument("--per-class", action="store_true", help="also train one height-only model per class")
    p.add_argument("--v-expected", type=_positive, default=1.0)
    p.add_argument("--match-steps", action="store_true",
                   help="scale baseline epochs to the optimizer steps of a full-data run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baselines)

    def predictor(p):
        p.add_argument("--env", required=True)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--model", default=None)
        src.add_argument("--oracle", action="store_true", help="use the physics oracle instead of a model")
        p.add_argument("--oracle-config", default=None)
        geometry(p)

    p = sub.add_parser("path-cost", parents=[common], help="time and energy along a path")
    predictor(p)
    p.add_argument("--path", required=True, help="x,y CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_path_cost)

    p = sub.add_parser("build-grid", parents=[common], help="directional edge costs on a d-lattice")
    predictor(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_grid)

    p = sub.add_parser("plan", parents=[common], help="least-cost route on a cost grid")
    p.add_argument("--env", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--d", type=_positive, default=1.0)
    p.add_argument("--start", type=_floats(2), required=True, help="x,y")
    p.add_argument("--goal", type=_floats(2), required=True, help="x,y")
    p.add_argument("--objective", choices=("time", "energy"), default="time")
    p.add_argument("--out", required=True, help="route as x,y CSV")
    p.add_argument("--cost-out", default=None, help="per-segment cost CSV")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("report", parents=[common], help="render a metric report")
    model_eval(p)
    p.add_argument("--format", choices=("csv", "svg", "series"), default="svg")
    p.add_argument("--variable", choices=evalharness.VARIABLES, default="E")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


@contextlib.contextmanager
def _thread_limit(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        with _thread_limit(args.threads):
            args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"terracost: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"terracost: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TerracostError, ValueError) as exc:
        print(f"terracost: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
