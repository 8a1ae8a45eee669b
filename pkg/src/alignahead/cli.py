"""Command-line entry point: generate, train, flow, compare and sweeps.

Every artifact directory gets one ``manifest.json``.  Output directories
default to ``$ALIGNAHEAD_OUT/<command>-<config hash>`` (``runs/`` when the
variable is unset).  Errors exit nonzero with a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, flowsim, plots
from .distill import Strategy, TrainConfig, TrainingDiverged, build_plan, train
from .graph import (
    DatasetBundle,
    GraphFormatError,
    GraphValidationError,
    generate_sbm,
    generate_sbm_bundle,
    load_bundle,
    save_bundle,
    save_graph,
)
from .lsp import KernelConfig
from .models import ModelConfig, load_checkpoint, save_checkpoint

OUT_ENV = "ALIGNAHEAD_OUT"
STRATEGY_NAMES = {"self": "self_only", "oc": "oc", "alignahead": "alignahead", "lsp": "offline_lsp"}
PRESETS = {
    "transductive": {"lr": 0.001, "weight_decay": 0.0005, "epochs": 200, "kernel": "euclidean",
                     "arch": "gcn", "layers": 3, "hidden": [128], "heads": [3]},
    "inductive": {"lr": 0.005, "weight_decay": 0.0, "epochs": 300, "kernel": "rbf",
                  "arch": "gat", "layers": 3, "hidden": [64], "heads": [3]},
}
STANDARD_SBM = {"nodes": 300, "classes": 3, "p_in": 0.05, "p_out": 0.005, "features": 16, "shift": 1.0}
ALPHA_GRID = [0.1, 0.5, 1.0, 1.5, 10.0]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        sys.exit(2)


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")


# ---------------------------------------------------------------------------
# Manifests


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*.json") if p.name != "manifest.json")
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()


def source_revision() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
        if rev.returncode == 0:
            return rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"alignahead-{__version__}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seed: int | None
    source_revision: str
    started_at: str
    finished_at: str | None = None
    outputs: list[str] = field(default_factory=list)

    @classmethod
    def start(cls, command: str, config: dict, seed=None) -> "RunManifest":
        return cls(command, config, config_hash(config), seed, source_revision(), _now())

    def write(self, directory: Path) -> Path:
        self.finished_at = _now()
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str) + "\n")
        return path


def _out_dir(args, command: str, config: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUT_ENV, "runs")) / f"{command}-{config_hash(config)[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rel(paths, root: Path) -> list[str]:
    return [str(Path(p).relative_to(root)) for p in paths]


# ---------------------------------------------------------------------------
# Argument helpers


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and optimisation (unset values come from the preset)")
    g.add_argument("--preset", choices=sorted(PRESETS), help="defaults to the dataset mode")
    g.add_argument("--strategy", choices=sorted(STRATEGY_NAMES), default="alignahead")
    g.add_argument("--students", type=int, default=2)
    g.add_argument("--arch", choices=["gcn", "sage_mean", "sage_gcn", "sage_pool", "gat"])
    g.add_argument("--layers", type=int)
    g.add_argument("--hidden", type=_int_list, help="width, or comma list of per-layer widths")
    g.add_argument("--heads", type=_int_list, help="GAT heads, single value or per-layer list")
    g.add_argument("--activation", choices=["relu", "elu"])
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--kernel", choices=["euclidean", "linear", "poly", "rbf"])
    g.add_argument("--sigma", type=float, default=100.0, help="RBF bandwidth")
    g.add_argument("--poly-c", type=float, default=1.0)
    g.add_argument("--poly-d", type=float, default=2.0)
    g.add_argument("--negate-euclidean", action="store_true")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--fresh-targets", action="store_true", help="retake peer targets before each student update")
    g.add_argument("--teacher", help="checkpoint for --strategy lsp; trained first when omitted")
    g.add_argument("--teacher-layers", type=int)
    g.add_argument("--teacher-hidden", type=_int_list)
    g.add_argument("--no-timing", action="store_true", help="write wall_ms as 0 for byte-stable reports")
    g.add_argument("--no-figures", action="store_true")


def _add_sbm_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("SBM task used when --data is omitted (graph seed = run seed)")
    g.add_argument("--nodes", type=int, default=STANDARD_SBM["nodes"])
    g.add_argument("--classes", type=int, default=STANDARD_SBM["classes"])
    g.add_argument("--p-in", type=float, default=STANDARD_SBM["p_in"])
    g.add_argument("--p-out", type=float, default=STANDARD_SBM["p_out"])
    g.add_argument("--features", type=int, default=STANDARD_SBM["features"])
    g.add_argument("--shift", type=float, default=STANDARD_SBM["shift"])


def _expand(values: list[int] | None, count: int, name: str) -> list[int]:
    if not values:
        raise UsageError(f"--{name} needs at least one value")
    if len(values) == 1:
        return values * count
    if len(values) != count:
        raise UsageError(f"--{name} needs 1 or {count} values, got {len(values)}")
    return values


def resolve_settings(args, mode: str) -> dict:
    """Flat, JSON-ready settings: explicit flags override the preset."""
    preset_name = args.preset or mode
    preset = PRESETS[preset_name]
    pick = lambda name: getattr(args, name) if getattr(args, name) is not None else preset[name]
    layers = pick("layers")
    arch = pick("arch")
    s = {
        "preset": preset_name,
        "strategy": STRATEGY_NAMES[args.strategy],
        "students": args.students,
        "arch": arch,
        "layers": layers,
        "hidden": _expand(pick("hidden"), layers - 1, "hidden") if layers > 1 else [],
        "heads": _expand(pick("heads"), layers, "heads") if arch == "gat" else None,
        "activation": args.activation,
        "alpha": args.alpha,
        "kernel": pick("kernel"),
        "sigma": args.sigma,
        "poly_c": args.poly_c,
        "poly_d": args.poly_d,
        "negate_euclidean": args.negate_euclidean,
        "epochs": pick("epochs"),
        "lr": pick("lr"),
        "weight_decay": pick("weight_decay"),
        "seed": args.seed,
        "fresh_targets": args.fresh_targets,
    }
    if s["strategy"] == "offline_lsp":
        s["students"] = max(1, args.students)
        s["teacher"] = args.teacher
        t_layers = args.teacher_layers or layers
        s["teacher_layers"] = t_layers
        default_hidden = [2 * h for h in s["hidden"]] or [2 * preset["hidden"][0]]
        s["teacher_hidden"] = _expand(args.teacher_hidden or default_hidden, t_layers - 1, "teacher-hidden") \
            if t_layers > 1 else []
    return s


def model_config(settings: dict, bundle: DatasetBundle, *, layers=None, hidden=None) -> ModelConfig:
    g = bundle.train_graphs[0]
    layers = layers or settings["layers"]
    heads = settings["heads"]
    if heads is not None and len(heads) != layers:
        heads = [heads[0]] * layers
    return ModelConfig(
        arch=settings["arch"],
        input_dim=g.num_features,
        output_dim=g.num_classes,
        num_layers=layers,
        hidden_dims=tuple(settings["hidden"] if hidden is None else hidden),
        gat_heads=tuple(heads) if heads else None,
        activation=settings["activation"],
        task="multi_label" if g.multi_label else "single_label",
    )


def kernel_config(settings: dict) -> KernelConfig:
    return KernelConfig(settings["kernel"], settings["poly_c"], settings["poly_d"], settings["sigma"],
                        settings["negate_euclidean"])


def train_config(settings: dict, bundle: DatasetBundle, teacher=None) -> TrainConfig:
    strategy = Strategy(settings["strategy"], settings["alpha"], kernel_config(settings), teacher)
    return TrainConfig(
        model=model_config(settings, bundle),
        strategy=strategy,
        num_students=settings["students"],
        epochs=settings["epochs"],
        learning_rate=settings["lr"],
        weight_decay=settings["weight_decay"],
        seed=settings["seed"],
        fresh_targets=settings["fresh_targets"],
    )


def obtain_teacher(settings: dict, bundle: DatasetBundle, out: Path | None = None):
    """Load the teacher checkpoint, or train one with labels alone."""
    if settings.get("teacher"):
        return load_checkpoint(settings["teacher"])
    t_settings = dict(settings, strategy="self_only", students=1, layers=settings["teacher_layers"],
                      hidden=settings["teacher_hidden"])
    report = train(bundle, train_config(t_settings, bundle))
    teacher = report.models[0].frozen_copy()
    if out is not None:
        save_checkpoint(teacher, out / "checkpoints" / "teacher.json")
    return teacher


def run_settings(settings: dict, bundle: DatasetBundle, out: Path | None = None):
    teacher = obtain_teacher(settings, bundle, out) if settings["strategy"] == "offline_lsp" else None
    return train(bundle, train_config(settings, bundle, teacher))


def standard_task(seed: int, args) -> DatasetBundle:
    g = generate_sbm(seed, args.nodes, args.classes, args.p_in, args.p_out, args.features, args.shift)
    return DatasetBundle.transductive(g)


def _dataset_for(args, seed: int) -> tuple[DatasetBundle, str]:
    if args.data:
        bundle = load_bundle(args.data)
        return bundle, file_digest(args.data)
    return standard_task(seed, args), "sbm:" + json.dumps(
        {k: getattr(args, k) for k in ("nodes", "classes", "p_in", "p_out", "features", "shift")}, sort_keys=True)


def _write_csv(path: Path, rows: list[dict]) -> Path:
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def _row_from_report(report, **keys) -> dict:
    summary = report.summary()
    row = dict(keys)
    row["max_val_metric"] = summary["max_val_metric"]
    row["max_test_metric"] = summary["max_test_metric"]
    for s in summary["students"]:
        row[f"student{s['student'] + 1}_val"] = s["val_metric"]
        row[f"student{s['student'] + 1}_test"] = s["test_metric"]
    return row


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    if args.inductive:
        counts = tuple(args.graphs)
        if len(counts) != 3:
            raise UsageError("--graphs needs three counts: train,val,test")
        bundle = generate_sbm_bundle(args.seed, counts, args.nodes, args.classes, args.p_in, args.p_out,
                                     args.features, args.shift, multi_label=args.multi_label)
        out = _out_dir(args, "generate", config)
        main_file = save_bundle(bundle, out)
        outputs = sorted(p for p in out.glob("*.json") if p.name != "manifest.json")
    else:
        g = generate_sbm(args.seed, args.nodes, args.classes, args.p_in, args.p_out, args.features, args.shift,
                         multi_label=args.multi_label)
        out = _out_dir(args, "generate", config)
        main_file = save_graph(g, out / "graph.json")
        outputs = [main_file]
    manifest = RunManifest.start("generate", config, args.seed)
    manifest.outputs = _rel(outputs, out)
    manifest.write(out)
    print(json.dumps({"data": str(main_file), "manifest": str(out / "manifest.json")}))
    return 0


def cmd_train(args) -> int:
    bundle, digest = _dataset_for(args, args.seed)
    settings = resolve_settings(args, bundle.mode)
    config = {"settings": settings, "data": digest}
    out = _out_dir(args, "train", config)
    manifest = RunManifest.start("train", config, args.seed)

    teacher = None
    if settings["strategy"] == "offline_lsp":
        teacher = obtain_teacher(settings, bundle, out)
    report = train(bundle, train_config(settings, bundle, teacher))

    outputs = [out / "report.jsonl"]
    outputs[0].write_text(report.to_jsonl(timing=not args.no_timing))
    for k, m in enumerate(report.models):
        outputs.append(save_checkpoint(m, out / "checkpoints" / f"student{k + 1}.json"))
    if teacher is not None:
        outputs.append(out / "checkpoints" / "teacher.json")
        if not outputs[-1].exists():
            save_checkpoint(teacher, outputs[-1])
    summary = {"strategy": args.strategy, **report.summary()}
    outputs.append(out / "summary.json")
    outputs[-1].write_text(json.dumps(summary, indent=2) + "\n")
    if not args.no_figures:
        outputs.append(plots.training_curves(report, out / "training_curves.png"))
    manifest.outputs = _rel(outputs, out)
    manifest.write(out)
    print(json.dumps(summary))
    return 0


def cmd_flow(args) -> int:
    if args.students < 2:
        raise UsageError("--students must be >= 2")
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    plan = build_plan(args.plan, args.students, args.layers)
    states = flowsim.trajectory(plan, args.steps)
    doc = flowsim.trajectory_to_json(plan, states)
    cov = flowsim.coverage_time(plan)
    per = flowsim.period(plan)
    doc["coverage_time"] = None if cov == flowsim.NEVER else cov
    doc["period"] = None if per in (None, flowsim.NEVER) else per
    if args.json == "-":
        print(flowsim.dumps(doc))
        return 0
    sys.stdout.write(flowsim.render_table(states, staged=not args.plain))
    print(f"coverage_time: {'never' if doc['coverage_time'] is None else doc['coverage_time']}")
    label = "period" if args.students == 2 else "period (first full coverage)"
    print(f"{label}: {'none within bound' if doc['period'] is None else doc['period']}")
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(flowsim.dumps(doc) + "\n")
    return 0


def _sweep(args, command: str, grid: list[dict]) -> tuple[list[dict], Path, RunManifest]:
    """Run one training per (grid point, seed); returns CSV rows."""
    seeds = args.seeds
    base_args = argparse.Namespace(**vars(args))
    data_ids = {}
    rows = []
    for seed in seeds:
        bundle, digest = _dataset_for(args, seed)
        data_ids[seed] = digest
        for point in grid:
            ns = argparse.Namespace(**{**vars(base_args), **point, "seed": seed})
            settings = resolve_settings(ns, bundle.mode)
            report = run_settings(settings, bundle)
            keys = {k: (STRATEGY_NAMES.get(v, v) if k == "strategy" else v) for k, v in point.items()}
            rows.append(_row_from_report(report, **keys, seed=seed))
    config = {"grid": grid, "seeds": seeds, "data": data_ids,
              "flags": {k: v for k, v in vars(args).items() if k not in ("func", "out", "data")}}
    out = _out_dir(args, command, config)
    return rows, out, RunManifest.start(command, config, None)


def _spread_line(rows: list[dict], key: str, group: str) -> dict:
    groups = {}
    for r in rows:
        groups.setdefault(r[group], []).append(r[key])
    means = {g: float(np.mean(v)) for g, v in groups.items()}
    return {"per_" + group: means, "spread": max(means.values()) - min(means.values())}


def cmd_sweep_alpha(args) -> int:
    grid = [{"alpha": a} for a in args.alphas]
    rows, out, manifest = _sweep(args, "sweep-alpha", grid)
    outputs = [_write_csv(out / "alpha_sweep.csv", rows)]
    if not args.no_figures:
        outputs.append(plots.alpha_sweep(rows, out / "alpha_sweep.png"))
    manifest.outputs = _rel(outputs, out)
    manifest.write(out)
    print(json.dumps({"csv": str(outputs[0]), "test": _spread_line(rows, "max_test_metric", "alpha"),
                      "val": _spread_line(rows, "max_val_metric", "alpha")}))
    return 0


def cmd_compare(args) -> int:
    grid = [{"arch": a, "strategy": s} for a in args.archs for s in args.strategies]
    rows, out, manifest = _sweep(args, "compare", grid)
    outputs = [_write_csv(out / "comparison.csv", rows)]
    if not args.no_figures:
        outputs.append(plots.strategy_comparison(rows, out / "comparison.png", key="max_val_metric"))
    manifest.outputs = _rel(outputs, out)
    manifest.write(out)
    summary = {}
    for a in args.archs:
        per = {STRATEGY_NAMES[s]: float(np.mean([r["max_val_metric"] for r in rows
                                                 if r["arch"] == a and r["strategy"] == STRATEGY_NAMES[s]]))
               for s in args.strategies}
        if "self_only" in per and "alignahead" in per:
            per["gap_alignahead_minus_self"] = per["alignahead"] - per["self_only"]
        summary[a] = per
    print(json.dumps({"csv": str(outputs[0]), "mean_max_val_metric": summary}))
    return 0


def cmd_sweep_students(args) -> int:
    grid = [{"students": m} for m in args.student_counts]
    rows, out, manifest = _sweep(args, "sweep-students", grid)
    outputs = [_write_csv(out / "students_sweep.csv", rows)]
    if not args.no_figures:
        outputs.append(plots.student_scaling(rows, out / "students_sweep.png"))
    manifest.outputs = _rel(outputs, out)
    manifest.write(out)
    print(json.dumps({"csv": str(outputs[0]), "test": _spread_line(rows, "max_test_metric", "students")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alignahead", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic SBM graph or inductive bundle")
    p.add_argument("--nodes", type=int, default=300)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multi-label", action="store_true")
    p.add_argument("--inductive", action="store_true", help="write a bundle of independent graphs")
    p.add_argument("--graphs", type=_int_list, default=[20, 2, 2], help="train,val,test graph counts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train students and write the JSONL report")
    p.add_argument("--data", help="graph JSON or bundle manifest; standard SBM task when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_training_flags(p)
    _add_sbm_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flow", help="simulate structure-information flow between layers")
    p.add_argument("--students", type=int, default=2)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--plan", choices=["alignahead", "oc"], default="alignahead")
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--json", help="write the trajectory JSON here; '-' prints only JSON")
    p.add_argument("--plain", action="store_true", help="one column per iteration instead of per stage")
    p.set_defaults(func=cmd_flow)

    for name, func, help_text in (
        ("sweep-alpha", cmd_sweep_alpha, "train across an alpha grid"),
        ("compare", cmd_compare, "compare strategies and architectures across seeds"),
        ("sweep-students", cmd_sweep_students, "train with different student counts"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", help="fixed dataset; otherwise one standard SBM graph per seed")
        p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
        p.add_argument("--out")
        _add_training_flags(p)
        _add_sbm_flags(p)
        p.set_defaults(func=func, seed=0)
        if name == "sweep-alpha":
            p.add_argument("--alphas", type=_float_list, default=ALPHA_GRID)
        elif name == "compare":
            p.add_argument("--archs", type=lambda s: s.split(","), default=["gcn"])
            p.add_argument("--strategies", type=lambda s: s.split(","), default=["self", "oc", "alignahead"])
        else:
            p.add_argument("--student-counts", type=_int_list, default=[2, 3, 4])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "strategies", None):
            bad = [s for s in args.strategies if s not in STRATEGY_NAMES]
            if bad:
                raise UsageError(f"unknown strategies {bad}")
        return args.func(args)
    except (GraphFormatError, GraphValidationError) as exc:
        _emit_error("data_error", str(exc))
        return 3
    except TrainingDiverged as exc:
        _emit_error("diverged", str(exc), epoch=exc.epoch, student=exc.student, component=exc.component)
        return 4
    except (ValueError, KeyError) as exc:
        _emit_error("invalid_argument", str(exc))
        return 2
    except OSError as exc:
        _emit_error("io_error", str(exc))
        return 5


if __name__ == "__main__":
    sys.exit(main())
