"""Command-line pipeline: lines -> dataset -> surrogates -> identification -> analysis.

Every command writes ``<out>.manifest.json`` next to its main output, listing
the configuration, seeds and sha256 digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, dataset, surrogate
from .identify import IdentifyBounds, ObservedMetrics, identify, identify_exponential, identify_with_averages
from .mpso import ObjectiveError, PsoConfig
from .simulator import SimConfig, simulate_metrics

log = logging.getLogger("lineident")

EXIT_OK, EXIT_USAGE, EXIT_SIM, EXIT_TRAIN, EXIT_IDENTIFY, EXIT_ANALYSIS = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def write_manifest(command: str, config: dict, seeds: dict, inputs, outputs, started: float) -> dict:
    man = {
        "tool": "lineident",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_s": round(time.monotonic() - started, 3),
    }
    manifest_path(outputs[0]).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {what} {path}: {exc}", EXIT_USAGE) from exc


def _sim_config(args) -> SimConfig:
    d = _read_json(args.sim_config, "sim config") if getattr(args, "sim_config", None) else {}
    for k in ("warmup", "horizon", "replications", "base_seed"):
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    try:
        return SimConfig(**d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad simulation config: {exc}", EXIT_USAGE) from exc


def _pso_config(args) -> PsoConfig:
    d = _read_json(args.pso_config, "PSO config") if args.pso_config else {}
    try:
        return PsoConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad PSO config: {exc}", EXIT_USAGE) from exc


def _threads(args) -> int | None:
    env = os.environ.get("LINEIDENT_THREADS")
    if env:
        return int(env)
    return args.threads


def _pick_line(path, index: int):
    lines = dataset.read_lines(path)
    if not 0 <= index < len(lines):
        raise CliError(f"line index {index} out of range 0..{len(lines) - 1}", EXIT_USAGE)
    return lines[index]


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_gen_lines(args, t0):
    if args.count < 1:
        raise CliError("--count must be positive", EXIT_USAGE)
    try:
        ranges = dataset.SamplingRanges.from_dict(_read_json(args.ranges_file, "ranges file")) if args.ranges_file else dataset.SamplingRanges()
        lines = dataset.generate_lines(args.m, args.count, ranges, seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad line-generation config: {exc}", EXIT_USAGE) from exc
    dataset.write_lines(lines, args.out, meta={"seed": args.seed, "ranges": asdict(ranges)})
    meta = dataset._meta_path(args.out)
    write_manifest("gen-lines", {"m": args.m, "count": args.count, "ranges": asdict(ranges)}, {"seed": args.seed}, [], [Path(args.out), meta], t0)


def cmd_build_dataset(args, t0):
    try:
        lines = dataset.read_lines(args.lines)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read lines: {exc}", EXIT_USAGE) from exc
    cfg = _sim_config(args)
    try:
        rows = dataset.build_dataset(lines, cfg, threads=_threads(args))
    except Exception as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_SIM) from exc
    dataset.write_dataset(rows, args.out, meta={"sim": asdict(cfg)})
    write_manifest(
        "build-dataset", {"sim": asdict(cfg)}, {"base_seed": cfg.base_seed},
        [Path(args.lines)], [Path(args.out), dataset._meta_path(args.out)], t0,
    )


def cmd_train(args, t0):
    try:
        rows = dataset.read_dataset(args.dataset)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read dataset: {exc}", EXIT_USAGE) from exc
    if not 0 < args.split < 1:
        raise CliError("--split must be in (0, 1)", EXIT_USAGE)
    train_rows, test_rows = dataset.split(rows, args.split, seed=args.seed)
    if len(train_rows) < 100 or not test_rows:
        raise CliError(f"need >= 100 training rows and a non-empty test split, got {len(train_rows)}/{len(test_rows)}", EXIT_USAGE)
    cfg = surrogate.TrainConfig(max_iter=args.max_iter, seed=args.seed, l2=args.l2)
    hidden = tuple(args.hidden) if args.hidden else None
    try:
        bundle, reports = surrogate.train_bundle(train_rows, hidden, cfg)
    except surrogate.TrainingError as exc:
        raise CliError(str(exc), EXIT_TRAIN) from exc
    surrogate.save(bundle, args.out_bundle)
    report_path = Path(args.out_bundle).with_suffix(".errors.json")
    _dump(
        {
            "train_rows": len(train_rows),
            "test_rows": len(test_rows),
            "test_errors": surrogate.evaluate(bundle, test_rows),
            "train_errors": surrogate.evaluate(bundle, train_rows),
            "training": {k: {"mse": r.train_mse, "iterations": r.iterations, "message": r.message} for k, r in reports.items()},
        },
        report_path,
    )
    write_manifest(
        "train", {"split": args.split, "train": asdict(cfg), "hidden": list(bundle.models["PR"].hidden_sizes)},
        {"seed": args.seed}, [Path(args.dataset)], [Path(args.out_bundle), report_path], t0,
    )


def _load_targets(args, M: int) -> ObservedMetrics:
    d = _read_json(args.targets, "targets")
    if args.n:
        d["N"] = args.n
    if "N" not in d:
        raise CliError("targets need capacities: add \"N\" to the file or pass --n", EXIT_USAGE)
    metrics = d.get("metrics", d)
    try:
        obs = ObservedMetrics.from_dict({"N": d["N"], "metrics": metrics})
    except (KeyError, ValueError) as exc:
        raise CliError(f"bad targets: {exc}", EXIT_USAGE) from exc
    if obs.M != M:
        raise CliError(f"targets are for M={obs.M} but the bundle is for M={M}", EXIT_USAGE)
    return obs


def cmd_identify(args, t0):
    try:
        bundle = surrogate.load(args.bundle)
    except (OSError, surrogate.BundleFormatError) as exc:
        raise CliError(f"cannot load bundle: {exc}", EXIT_USAGE) from exc
    targets = _load_targets(args, bundle.M)
    cfg = _pso_config(args)
    bounds = IdentifyBounds.from_dict(_read_json(args.bounds, "bounds")) if args.bounds else IdentifyBounds()
    sim_cfg = _sim_config(args) if args.sim_config else None
    averaged = args.t_bar is not None or args.cv_bar is not None
    if averaged and (args.t_bar is None or args.cv_bar is None):
        raise CliError("--t-bar and --cv-bar must be given together", EXIT_USAGE)
    if averaged and args.exponential:
        raise CliError("--exponential cannot be combined with --t-bar/--cv-bar", EXIT_USAGE)
    try:
        if args.exponential:
            res = identify_exponential(targets, bundle, cfg, bounds, args.seed, sim_cfg=sim_cfg)
        elif averaged:
            res = identify_with_averages(
                targets, bundle, cfg, bounds, args.t_bar, args.cv_bar, args.seed,
                sim_cfg=sim_cfg, project=not args.no_project,
            )
        else:
            res = identify(targets, bundle, cfg, bounds, args.seed, sim_cfg=sim_cfg)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except ObjectiveError as exc:
        raise CliError(str(exc), EXIT_IDENTIFY) from exc
    d = res.to_dict()
    d["targets"] = targets.to_dict()
    _dump(d, args.out)
    inputs = [Path(args.bundle), Path(args.targets)] + ([Path(args.pso_config)] if args.pso_config else [])
    write_manifest("identify", {"mode": res.mode, **res.config}, {"seed": args.seed}, inputs, [Path(args.out)], t0)
    log.info("%d/%d valid solutions", res.n_valid, len(res.f_nn))
    if args.require_valid and res.n_valid == 0:
        raise CliError("no valid solution found", EXIT_IDENTIFY)


def cmd_analyze(args, t0):
    if not args.results:
        raise CliError("no result files given", EXIT_USAGE)
    report = {"results": []}
    rows = []
    failed = []
    for path in args.results:
        d = _read_json(path, "identification result")
        X = np.asarray(d["solutions"], dtype=float)
        valid = np.asarray(d["valid"], dtype=bool)
        entry = {"file": str(path), "n_solutions": int(len(X)), "n_valid": int(valid.sum())}
        agg = analysis.aggregate_matrix(X) if len(X) else np.empty((0, 2))
        for k, (t, cv) in enumerate(agg):
            rows.append([str(path), k, int(valid[k]), repr(float(t)), repr(float(cv))])
        try:
            rel = analysis.fit_overall_relationship(X[valid])
        except analysis.AnalysisError as exc:
            entry["error"] = str(exc)
            failed.append(str(path))
        else:
            lo, hi = d["config"]["bounds"]["T_down"]
            feas = analysis.exp_feasibility(rel.overall, (lo, hi))
            entry["fit"] = rel.to_dict()
            entry["exp_feasibility"] = {"feasible": feas.feasible, "T_bar": feas.T_bar, "reason": feas.reason}
        report["results"].append(entry)
    _dump(report, args.out)
    outputs = [Path(args.out)]
    if args.points:
        with open(args.points, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["result", "solution", "valid", "T_bar_down", "CV_bar_avg"])
            w.writerows(rows)
        outputs.append(Path(args.points))
    write_manifest("analyze", {}, {}, [Path(p) for p in args.results], outputs, t0)
    if failed:
        raise CliError(f"insufficient valid solutions in {', '.join(failed)}", EXIT_ANALYSIS)


def cmd_sensitivity(args, t0):
    line = _pick_line(args.true_line, args.line_index)
    d = _read_json(args.results, "identification result")
    X = np.asarray(d["solutions"], dtype=float)[np.asarray(d["valid"], dtype=bool)]
    if len(X) == 0:
        raise CliError("no valid estimates to evaluate", EXIT_ANALYSIS)
    if tuple(d["N"]) != line.N:
        raise CliError(f"result capacities {d['N']} differ from the true line's {list(line.N)}", EXIT_USAGE)
    X = X[: args.max_estimates]
    try:
        scenarios = [analysis.Scenario.parse(s, not args.hold_uptime) for s in args.scenarios]
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    cfg = _sim_config(args)
    try:
        cells = analysis.evaluate_sensitivity(line, X, scenarios, cfg, threads=_threads(args))
    except IndexError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    except Exception as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_SIM) from exc
    analysis.write_sensitivity_csv(cells, args.out)
    write_manifest(
        "sensitivity", {"sim": asdict(cfg), "scenarios": [s.label for s in scenarios], "hold_uptime": args.hold_uptime},
        {"base_seed": cfg.base_seed}, [Path(args.true_line), Path(args.results)], [Path(args.out)], t0,
    )


def cmd_observe(args, t0):
    line = _pick_line(args.lines, args.line_index)
    cfg = _sim_config(args)
    try:
        m = simulate_metrics(line, cfg, threads=_threads(args))
    except Exception as exc:
        raise CliError(f"simulation failed: {exc}", EXIT_SIM) from exc
    _dump({"N": list(line.N), "metrics": m.to_dict(), "true_parameters": line.to_vector().tolist()}, args.out)
    write_manifest("observe", {"sim": asdict(cfg), "line_index": args.line_index}, {"base_seed": cfg.base_seed}, [Path(args.lines)], [Path(args.out)], t0)


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def _sim_flags(p):
    p.add_argument("--sim-config", help="JSON with warmup, horizon, replications, base_seed")
    p.add_argument("--warmup", type=int, help="warm-up cycles (default 10000)")
    p.add_argument("--horizon", type=int, help="recorded cycles per replication (default 300000)")
    p.add_argument("--reps", dest="replications", type=int, help="replications per line (default 15)")
    p.add_argument("--seed", dest="base_seed", type=int, help="base simulation seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lineident", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores; LINEIDENT_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-lines", help="sample random line configurations")
    g.add_argument("--m", type=int, required=True, help="number of machines")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--ranges-file", help="JSON sampling ranges")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_lines)

    b = sub.add_parser("build-dataset", help="simulate every line into a metrics dataset")
    b.add_argument("--lines", required=True)
    _sim_flags(b)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="train one surrogate per metric")
    t.add_argument("--dataset", required=True)
    t.add_argument("--split", type=float, default=0.75, help="training fraction")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-iter", type=int, default=surrogate.TrainConfig.max_iter)
    t.add_argument("--l2", type=float, default=surrogate.TrainConfig.l2, help="weight penalty")
    t.add_argument("--hidden", type=int, nargs="+", help="hidden layer widths")
    t.add_argument("--out-bundle", required=True)
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("observe", help="simulate one line and write its metrics as identification targets")
    o.add_argument("--lines", required=True)
    o.add_argument("--line-index", type=int, default=0)
    _sim_flags(o)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_observe)

    i = sub.add_parser("identify", help="estimate machine parameters from observed metrics")
    i.add_argument("--bundle", required=True)
    i.add_argument("--targets", required=True, help="JSON with N and a metrics mapping")
    i.add_argument("--n", type=int, nargs="+", help="buffer capacities (override the targets file)")
    i.add_argument("--pso-config", help="JSON overriding PSO settings")
    i.add_argument("--bounds", help="JSON search box {e: [lo, hi], T_down: [...], cv: [...]}")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--exponential", action="store_true", help="freeze every CV at 1")
    i.add_argument("--t-bar", type=float, help="prescribed overall downtime")
    i.add_argument("--cv-bar", type=float, help="prescribed overall CV")
    i.add_argument("--no-project", action="store_true", help="with --t-bar/--cv-bar: penalty only, no projection onto the averages")
    i.add_argument("--sim-config", help="re-score valid solutions by simulation with this JSON config")
    i.add_argument("--require-valid", action="store_true", help="exit 5 when no solution is valid")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_identify)

    a = sub.add_parser("analyze", help="fit overall downtime vs CV on valid estimates")
    a.add_argument("--results", nargs="+", required=True)
    a.add_argument("--points", help="also write the (T_bar, CV_bar) cloud as CSV")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sensitivity", help="compare true and estimated lines under improvement scenarios")
    s.add_argument("--true-line", required=True, help="lines CSV")
    s.add_argument("--line-index", type=int, default=0)
    s.add_argument("--results", required=True)
    s.add_argument("--scenarios", nargs="+", default=["double-all-N", "half-all-Tdown"],
                   help="kinds: double-all-N, double-one-N:j, half-all-Tdown, half-one-Tdown:i")
    s.add_argument("--hold-uptime", action="store_true", help="halving T_down keeps T_up (e rises) and not e")
    s.add_argument("--max-estimates", type=int, default=3)
    _sim_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sensitivity)
    return p


def main(argv=None) -> int:
    t0 = time.monotonic()
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"lineident: error: {exc}", file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("lineident: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args, t0)
    except CliError as exc:
        print(f"lineident: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
