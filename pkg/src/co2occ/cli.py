"""Command-line entry point: simulate, experiment, importance.

Exit codes: 0 success, 2 input or validation error, 3 degenerate data
(a single class where the task needs two).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import permutation_importance
from .features import FeatureError, FeatureSpec, build_features, default_spec, parse_kinds
from .ingest import (
    LABEL_FILE,
    ROOM_FILE,
    SENSOR_FILE,
    IngestError,
    NormStats,
    load_dataset,
    normalize,
)
from .modelsel import TASKS, ExperimentError, GridSpec, SplitPlan, run_experiment, task_labels
from .simulator import (
    ROOM_SHAPES,
    Schedule,
    SimConfig,
    SimConfigError,
    default_rooms,
    simulate,
    write_files,
)
from .svm import SvmError, SvmModel

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
MANIFEST_FILE = "manifest.json"
MODEL_FORMAT = "co2occ-model-file"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    subcommand: str
    inputs: list
    outputs: list
    seed: int
    features: list = field(default_factory=list)
    task: str | None = None
    interval: int | None = None
    grid: dict | None = None
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"{what}: no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path}: line {exc.lineno}: {exc.msg}") from None


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if args.preset:
        if args.config or args.schedule:
            raise CliError("--preset cannot be combined with --config/--schedule")
        rooms = default_rooms(seed=args.seed)
        if args.preset != "all":
            rooms = [rooms[sorted(ROOM_SHAPES).index(args.preset)]]
        targets = [(cfg, sched, out / cfg.room.room_id) for cfg, sched in rooms]
        inputs = [f"preset:{args.preset}"]
    else:
        if not (args.config and args.schedule):
            raise CliError("either --preset or both --config and --schedule are required")
        try:
            cfg = SimConfig.from_dict(_load_json(args.config, "config"))
            sched = Schedule.from_dict(_load_json(args.schedule, "schedule"))
        except TypeError as exc:
            raise CliError(f"config: {exc}") from None
        targets = [(cfg, sched, out)]
        inputs = [str(args.config), str(args.schedule)]
    for cfg, sched, target in targets:
        paths = write_files(simulate(cfg, sched), target)
        manifest = RunManifest(
            subcommand="simulate",
            inputs=inputs,
            outputs=[str(p) for p in paths] + [str(target / MANIFEST_FILE)],
            seed=cfg.seed,
        )
        _dump({
            "manifest": manifest.to_dict(),
            "config": cfg.to_dict(),
            "schedule": sched.to_dict(),
        }, target / MANIFEST_FILE)
        print(f"wrote {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


def _data_dirs(path) -> list:
    """A room directory, or a directory whose subdirectories are rooms."""
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"data directory not found: {p}")
    if (p / SENSOR_FILE).is_file():
        return [p]
    rooms = sorted(d for d in p.iterdir() if d.is_dir() and (d / SENSOR_FILE).is_file())
    if not rooms:
        raise CliError(f"{p}: no {SENSOR_FILE}, {LABEL_FILE}, {ROOM_FILE} found")
    return rooms


def _summary(rows) -> str:
    head = f"{'room':<10} {'task':<9} {'features':<32} {'acc':>7} {'sd':>6} {'f1':>6} {'rmse':>7} {'nrmse':>6}"
    lines = [head, "-" * len(head)]
    for room, task, feats, acc, sd, f1, rmse, nrmse in rows:
        nr = f"{nrmse:6.3f}" if nrmse is not None else f"{'-':>6}"
        lines.append(
            f"{room:<10} {task:<9} {feats:<32} {100 * acc:7.2f} {100 * sd:6.2f} {f1:6.3f} {rmse:7.3f} {nr}"
        )
    return "\n".join(lines)


def cmd_experiment(args) -> int:
    try:
        feature_sets = [parse_kinds(f) for f in (args.features or ["avg,fd"])]
        grid = GridSpec.parse(args.grid) if args.grid else GridSpec()
        plan = SplitPlan(rounds=args.rounds, seed=args.seed)
    except (FeatureError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if args.interval <= 0 or args.interval % 15:
        raise CliError("--interval must be a positive multiple of 15 s")
    if args.folds < 2:
        raise CliError("--folds must be >= 2")
    if args.importance_repeats < 0:
        raise CliError("--importance-repeats must be >= 0")
    dirs = _data_dirs(args.data)
    if args.model_out and (len(dirs) > 1 or len(feature_sets) > 1):
        raise CliError("--model-out needs exactly one room and one feature set")
    manifest = RunManifest(
        subcommand="experiment",
        inputs=[str(args.data)],
        outputs=[str(args.out)] + ([str(args.model_out)] if args.model_out else []),
        seed=args.seed,
        features=[",".join(k.lower() for k in fs) for fs in feature_sets],
        task=args.task,
        interval=args.interval,
        grid=asdict(grid),
    )
    reports, rows = [], []
    for d in dirs:
        try:
            ds = load_dataset(d, interval=args.interval)
        except IngestError as exc:
            raise CliError(str(exc)) from None
        for kinds in feature_sets:
            try:
                spec = default_spec(ds, kinds)
                rep = run_experiment(ds, spec, args.task, plan, grid, k=args.folds,
                                     importance_repeats=args.importance_repeats,
                                     keep_models=bool(args.model_out))
            except FeatureError as exc:
                raise CliError(f"{d}: {exc}") from None
            except (ExperimentError, SvmError) as exc:
                raise CliError(f"{d}: {exc}", EXIT_DEGENERATE) from None
            out = rep.to_dict()
            out["data_dir"] = str(d)
            out["feature_spec"] = _spec_dict(spec)
            reports.append(out)
            rows.append((rep.room_id, rep.task, spec.label, rep.mean("accuracy"),
                         rep.sd("accuracy"), rep.mean("f1"), rep.mean("rmse"),
                         _mean_or_none(rep.values("nrmse") if _has(rep, "nrmse") else None)))
            if args.model_out:
                _dump({
                    "format": MODEL_FORMAT,
                    "manifest": manifest.to_dict(),
                    "task": args.task,
                    "interval": args.interval,
                    "feature_spec": _spec_dict(spec),
                    "round": 0,
                    "model": rep.rounds[0].model.to_dict(),
                }, Path(args.model_out))
    _dump({"manifest": manifest.to_dict(), "reports": reports}, Path(args.out))
    print(_summary(rows))
    return EXIT_OK


def _has(rep, metric) -> bool:
    return all(r.metrics.get(metric) is not None for r in rep.rounds)


def _mean_or_none(v):
    return None if v is None else float(np.mean(v))


def _spec_dict(spec: FeatureSpec) -> dict:
    return {
        "kinds": list(spec.kinds),
        "vd_pair": list(spec.vd_pair) if spec.vd_pair else None,
        "hd_pair": list(spec.hd_pair) if spec.hd_pair else None,
    }


# ---------------------------------------------------------------------------
# importance


def _read_feature_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "occupants":
        raise CliError(f"{path}: feature CSV needs a header ending in 'occupants'")
    names = rows[0][:-1]
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None
    if body.shape[0] == 0:
        raise CliError(f"{path}: no data rows")
    return names, body[:, :-1], body[:, -1].astype(np.int64)


def cmd_importance(args) -> int:
    if args.repeats < 1:
        raise CliError("--repeats must be >= 1")
    blob = _load_json(args.model, "model")
    if blob.get("format") != MODEL_FORMAT:
        raise CliError(f"{args.model}: not a model file")
    try:
        model = SvmModel.from_dict(blob["model"])
    except (KeyError, ValueError) as exc:
        raise CliError(f"{args.model}: {exc}") from None
    fs = blob["feature_spec"]
    spec = FeatureSpec(tuple(fs["kinds"]),
                       vd_pair=tuple(fs["vd_pair"]) if fs["vd_pair"] else None,
                       hd_pair=tuple(fs["hd_pair"]) if fs["hd_pair"] else None)
    data = Path(args.data)
    if data.is_dir():
        try:
            ds = load_dataset(data, interval=int(blob["interval"]))
            fm = build_features(ds, spec)
        except (IngestError, FeatureError) as exc:
            raise CliError(f"schema mismatch: {exc}") from None
        names, values, counts = fm.names, fm.values, fm.labels
    else:
        names, values, counts = _read_feature_csv(data)
    if list(names) != list(model.feature_names):
        raise CliError(
            f"schema mismatch: model features {model.feature_names}, data features {list(names)}"
        )
    stats: NormStats = model.norm
    x = normalize(values, stats) if stats is not None else values
    y = task_labels(counts, blob["task"])
    rep = permutation_importance(model, x, y, n_repeats=args.repeats, seed=args.seed,
                                 names=list(names))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out)
    manifest = RunManifest(
        subcommand="importance",
        inputs=[str(args.model), str(args.data)],
        outputs=[str(out), str(out) + ".manifest.json"],
        seed=args.seed,
        features=[",".join(n.lower() for n in names)],
        task=blob["task"],
        interval=int(blob["interval"]),
    )
    _dump({"manifest": manifest.to_dict(), "importance": rep.to_dict()},
          Path(str(out) + ".manifest.json"))
    for n, m, s in zip(rep.names, rep.mean, rep.sd):
        print(f"{n:<6} {m:8.4f} {s:8.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="co2occ", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"co2occ {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic classroom dataset")
    s.add_argument("--config", help="SimConfig JSON")
    s.add_argument("--schedule", help="Schedule JSON")
    s.add_argument("--preset", choices=sorted(ROOM_SHAPES) + ["all"],
                   help="built-in room and school-week schedule")
    s.add_argument("--seed", type=int, default=42, help="master seed for --preset")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("experiment", help="run the split/grid-search/evaluate protocol")
    e.add_argument("data", help="room directory, or a directory of room directories")
    e.add_argument("--features", action="append",
                   help="comma list over avg,fd,vd,fdvd,hd,vent (repeatable)")
    e.add_argument("--task", choices=TASKS, default="state")
    e.add_argument("--interval", type=int, default=300, help="aggregation interval in s")
    e.add_argument("--rounds", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--grid", help="exponent bounds 'c_lo:c_hi,g_lo:g_hi'")
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--importance-repeats", type=int, default=0,
                   help="permutation importance on each test split (0 = off)")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--model-out", help="save the round-0 model (one room, one feature set)")
    e.set_defaults(func=cmd_experiment)

    i = sub.add_parser("importance", help="permutation importance of a saved model")
    i.add_argument("model", help="model JSON written by experiment --model-out")
    i.add_argument("data", help="room directory or feature CSV")
    i.add_argument("--repeats", type=int, default=5)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True, help="importance CSV path")
    i.set_defaults(func=cmd_importance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SimConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SvmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
