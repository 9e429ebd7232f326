from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

import checkpoint_protocol
import curriculum
import detector
import evalkit
import synthdata
from cpa import VARIANTS, CpaConfig, write_routing_csv
from run_config import DEFAULT_CONFIG, apply_overrides, load_config, merge_config, write_json_atomic

logger = logging.getLogger("CLI")

PROJECT_VERSION = "0.1.0"
MANIFEST_NAME = "run_manifest.json"
DEFAULT_SEEDS = "42,123,789"
LOG_FORMAT = "[%(name)s] %(message)s"


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON config merged over the defaults.")
    common.add_argument("--seed", type=int, default=None, help="Seed override (master seed for generate).")
    common.add_argument("--out", type=Path, default=None, help="Output directory (default: runs/<command>).")
    common.add_argument("--force", action="store_true", help="Allow writing into a non-empty output directory.")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="Report format.")
    common.add_argument("--verbose", action="store_true", help="Debug-level logging.")
    return common


def _train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="Dataset directory from `generate`.")
    parser.add_argument("--mode", choices=detector.MODES, default=None, help="Ablation mode.")
    parser.add_argument("--cpa-variant", choices=VARIANTS, default=None,
                        help="full = three pathways and gate; single_path = one linear pathway.")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(description="Cross-view detection desk kit: data, training, evaluation, analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Write a synthetic paired dataset.")
    gen.add_argument("--pairs", type=int, default=None, help="Total pairs, split in the default 8:1:3 ratio.")

    train = sub.add_parser("train", parents=[common], help="Train one run and save its checkpoint.")
    _train_flags(train)

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint per view and split.")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--views", default="ground,aerial", help="Comma-separated views to score.")
    ev.add_argument("--splits", default="val,test", help="Comma-separated splits to score.")

    seeds = sub.add_parser("sweep-seeds", parents=[common], help="Train once per seed and aggregate.")
    _train_flags(seeds)
    seeds.add_argument("--seeds", default=DEFAULT_SEEDS, help=f"Comma-separated seeds (default: {DEFAULT_SEEDS}).")
    seeds.add_argument("--drop-pp", type=float, default=10.0, help="Flag seeds this many points below the best.")

    routing = sub.add_parser("analyze-routing", parents=[common], help="Routing vs object count table.")
    routing.add_argument("--data", type=Path, required=True)
    source = routing.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", type=Path)
    source.add_argument("--untrained", action="store_true", help="Use a freshly initialised model.")
    routing.add_argument("--split", choices=("train", "val"), default="val")

    sched = sub.add_parser("schedule", parents=[common], help="Tabulate the paired-sampling schedule.")
    sched.add_argument("--t1", type=float, default=None)
    sched.add_argument("--t2", type=float, default=None)
    sched.add_argument("--steps", type=int, default=300)

    sweep = sub.add_parser("sweep-schedule", parents=[common], help="Train over a grid of schedule boundaries.")
    _train_flags(sweep)
    sweep.add_argument("--grid", default=None, help="Cells as t1:t2 pairs, e.g. 0.33:0.67,0.23:0.57.")

    geo = sub.add_parser("geometry", parents=[common], help="Per-view geometry statistics.")
    geo.add_argument("--data", type=Path, default=None, help="Dataset directory; omitted = generate in memory.")
    geo.add_argument("--pairs", type=int, default=100)

    replay = sub.add_parser("replay", help="Re-run the command recorded in a run manifest.")
    replay.add_argument("manifest", type=Path)
    replay.add_argument("--out", type=Path, default=None, help="Write into this directory instead.")
    replay.add_argument("--verbose", action="store_true")
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    config = load_config(args.config)
    overrides: dict[str, Any] = {
        "train.mode": getattr(args, "mode", None),
        "cpa.variant": getattr(args, "cpa_variant", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.lr": getattr(args, "lr", None),
        "train.t1": getattr(args, "t1", None),
        "train.t2": getattr(args, "t2", None),
    }
    if args.command == "generate" or args.command == "geometry":
        overrides["splits.seed"] = args.seed
    else:
        overrides["train.seed"] = args.seed
    return apply_overrides(config, overrides)


def prepare_out(args: argparse.Namespace) -> Path:
    out = args.out if args.out is not None else Path("runs") / args.command
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def versions() -> dict[str, Any]:
    return {
        "project": PROJECT_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "checkpoint_format": checkpoint_protocol.VERSION,
        "dataset_format": synthdata.DATASET_FORMAT_VERSION,
    }


def _split_counts(total: int) -> dict[str, int]:
    if total < 3:
        raise ValueError(f"--pairs needs at least 3 pairs (one per split), got {total}")
    scale = sum(synthdata.DEFAULT_SPLIT_PAIRS.values())
    val = max(1, total * synthdata.DEFAULT_SPLIT_PAIRS["val"] // scale)
    test = max(1, total * synthdata.DEFAULT_SPLIT_PAIRS["test"] // scale)
    return {"train": total - val - test, "val": val, "test": test}


def _typed(config: dict[str, Any], generator: synthdata.GeneratorConfig) -> tuple[
    detector.TrainConfig, CpaConfig, evalkit.EvalConfig
]:
    return (
        detector.TrainConfig.from_dict(config["train"]),
        CpaConfig(d=generator.d, **config["cpa"]),
        evalkit.EvalConfig(**config["eval"]),
    )


def _write_report(out: Path, stem: str, fmt: str, payload: dict[str, Any],
                  header: list[str] | tuple[str, ...], rows: list[list[str]]) -> list[Path]:
    json_path = out / f"{stem}.json"
    write_json_atomic(json_path, payload)
    written = [json_path]
    if fmt == "csv":
        csv_path = out / f"{stem}.csv"
        evalkit.write_csv(csv_path, header, rows)
        written.append(csv_path)
    for path in written:
        logger.info("artifact=%s", path)
    return written


# --- commands ------------------------------------------------------------


def cmd_generate(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    generator = synthdata.GeneratorConfig.from_dict(config["generator"])
    splits = config["splits"]
    counts = _split_counts(args.pairs) if args.pairs is not None else {k: splits[k] for k in synthdata.SPLITS}
    manifest = synthdata.write_dataset(out, generator, int(splits["seed"]), counts)
    return [manifest, *(out / name / "annotations.json" for name in synthdata.SPLITS)]


def _train_one(config: dict[str, Any], data: Path) -> detector.RunRecord:
    splits, generator = synthdata.load_dataset(data)
    run, cpa_config, eval_config = _typed(config, generator)
    return detector.train(run, splits, generator, cpa_config, eval_config, config_echo=config)


def _epoch_rows(record: detector.RunRecord) -> tuple[list[str], list[list[str]]]:
    header = ["epoch", "loss", "lr", *evalkit.MAP_COLUMNS]
    key = record.selection_metric.split(".")[1]
    rows = []
    for epoch in record.epochs:
        rows.append([str(epoch.epoch), f"{epoch.loss:.6f}", f"{epoch.lr:.3e}",
                     *(evalkit.fmt_metric(epoch.val.get(f"{key}.{c}")) for c in evalkit.MAP_COLUMNS)])
    return header, rows


def cmd_train(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    record = _train_one(config, args.data)
    checkpoint = out / "checkpoint.cvxc"
    detector.save_checkpoint(checkpoint, record.model, extra={"mode": record.mode, "seed": record.seed,
                                                             "selected_epoch": record.selected_epoch})
    header, rows = _epoch_rows(record)
    return [checkpoint, *_write_report(out, "run_record", args.format, record.to_dict(), header, rows)]


def _parse_names(text: str, allowed: tuple[str, ...], flag: str) -> list[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    unknown = sorted(set(names) - set(allowed))
    if unknown:
        raise ValueError(f"{flag}: unknown name(s) {unknown}, expected some of {list(allowed)}")
    if not names:
        raise ValueError(f"{flag} is empty")
    return names


def cmd_eval(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    views = _parse_names(args.views, synthdata.VIEWS, "--views")
    model = detector.load_checkpoint(args.checkpoint)
    splits, generator = synthdata.load_dataset(args.data)
    _, _, eval_config = _typed(config, generator)
    # A stored checkpoint is already the selected one.
    audit = detector.SplitAudit()
    audit.mark_selected()
    chosen: dict[str, list[synthdata.SceneSample]] = {}
    for name in _parse_names(args.splits, synthdata.SPLITS, "--splits"):
        samples = audit.test_samples(splits) if name == "test" else list(splits.split(name).flat)
        chosen[name] = [s for s in samples if s.view in views]
    predict = detector.predictor(model, scored=bool(config["train"]["scored"]), nms_iou=eval_config.nms_iou)
    reports = evalkit.cross_view_report(predict, chosen, eval_config)
    payload = {name: report.to_dict() for name, report in reports.items()}
    return _write_report(out, "eval_report", args.format, payload, evalkit.EVAL_CSV_HEADER,
                         evalkit.eval_csv_rows(reports))


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ValueError(f"--seeds must be comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise ValueError("--seeds is empty")
    return seeds


def cmd_sweep_seeds(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    written: list[Path] = []

    def run_seed(seed: int) -> dict[str, float | None]:
        seeded = apply_overrides(config, {"train.seed": seed})
        record = _train_one(seeded, args.data)
        path = out / f"seed_{seed}" / "run_record.json"
        write_json_atomic(path, record.to_dict())
        written.append(path)
        return record.test_metrics()

    report = evalkit.seed_sweep(_parse_seeds(args.seeds), run_seed)
    outliers = report.outliers("aerial.map", args.drop_pp)
    if outliers:
        logger.warning("outlier_seeds=%s metric=aerial.map drop_pp=%.1f", outliers, args.drop_pp)
    header, rows = evalkit.seed_csv_rows(report)
    payload = report.to_dict(drop_pp=args.drop_pp)
    return written + _write_report(out, "seed_report", args.format, payload, header, rows)


def cmd_analyze_routing(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    splits, generator = synthdata.load_dataset(args.data)
    if args.untrained:
        _, cpa_config, _ = _typed(config, generator)
        model = detector.build_model(generator, int(config["train"]["seed"]), cpa_config)
    else:
        model = detector.load_checkpoint(args.checkpoint)
    trace = detector.analyze_routing(model, list(splits.split(args.split).flat))
    csv_path = out / "routing.csv"
    write_routing_csv(trace, csv_path)
    summary_path = out / "routing_summary.json"
    write_json_atomic(summary_path, trace.to_dict())
    for path in (csv_path, summary_path):
        logger.info("artifact=%s", path)
    return [csv_path, summary_path]


def cmd_schedule(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    schedule = curriculum.Schedule(float(config["train"]["t1"]), float(config["train"]["t2"]), args.steps)
    rows = [[str(step), repr(p)] for step, p in curriculum.schedule_table(schedule)]
    path = out / "schedule.csv"
    evalkit.write_csv(path, ["step", "p_pair"], rows)
    print("step,p_pair")
    for step, p in rows:
        print(f"{step},{p}")
    logger.info("artifact=%s", path)
    return [path]


def _parse_grid(text: str | None) -> list[tuple[float, float]]:
    if text is None:
        return list(curriculum.DEFAULT_SWEEP_GRID)
    cells = []
    for part in text.split(","):
        t1, _, t2 = part.partition(":")
        try:
            cell = (float(t1), float(t2))
        except ValueError as exc:
            raise ValueError(f"--grid cell must look like t1:t2, got {part!r}") from exc
        curriculum.Schedule(*cell)
        cells.append(cell)
    return cells


def cmd_sweep_schedule(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    def run_cell(t1: float, t2: float) -> float:
        record = _train_one(apply_overrides(config, {"train.t1": t1, "train.t2": t2}), args.data)
        score = record.val.get(record.selection_metric.split(".", 1)[1])
        return 0.0 if score is None else score

    report = curriculum.sensitivity_sweep(_parse_grid(args.grid), run_cell)
    rows = [[f"{c.t1:.2f}", f"{c.t2:.2f}", f"{c.val_map:.2f}"] for c in report.cells]
    rows.append(["spread", "", f"{report.spread:.2f}"])
    return _write_report(out, "schedule_sweep", args.format, report.to_dict(), ["t1", "t2", "val_map"], rows)


def cmd_geometry(args: argparse.Namespace, config: dict[str, Any], out: Path) -> list[Path]:
    if args.data is not None:
        splits, _ = synthdata.load_dataset(args.data, render=False)
        samples = [s for name in synthdata.SPLITS for s in splits.split(name).flat]
    else:
        generator = synthdata.GeneratorConfig.from_dict(config["generator"])
        data = synthdata.generate_split(generator, int(config["splits"]["seed"]), "train", args.pairs, render=False)
        samples = data.flat
    stats = synthdata.geometry_statistics(samples)
    for view, values in stats.items():
        logger.info("view=%s count=%.1f area=%.1f nn_gap=%.2f spread=%.1f", view, values["mean_object_count"],
                    values["mean_box_area"], values["mean_nn_gap"], values["mean_spread"])
    columns = ["mean_object_count", "mean_box_area", "mean_nn_gap", "mean_spread", "mean_coverage"]
    rows = [[view, *(f"{values[c]:.4f}" for c in columns)] for view, values in stats.items()]
    return _write_report(out, "geometry", args.format, stats, ["view", *columns], rows)


COMMANDS: dict[str, Callable[[argparse.Namespace, dict[str, Any], Path], list[Path]]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-seeds": cmd_sweep_seeds,
    "analyze-routing": cmd_analyze_routing,
    "schedule": cmd_schedule,
    "sweep-schedule": cmd_sweep_schedule,
    "geometry": cmd_geometry,
}


# --- usage checks --------------------------------------------------------

TRAINING_COMMANDS = ("train", "sweep-seeds", "sweep-schedule")
PATH_FLAGS = ("config", "data", "checkpoint", "out")


def check_usage(args: argparse.Namespace, config: dict[str, Any]) -> None:
    """Reject flag and config values that parse but cannot run; raises ValueError."""
    command = args.command
    if command == "generate" and args.pairs is not None:
        _split_counts(args.pairs)
    if command == "geometry" and args.data is None and args.pairs < 1:
        raise ValueError(f"--pairs must be positive, got {args.pairs}")
    if command == "schedule":
        curriculum.Schedule(float(config["train"]["t1"]), float(config["train"]["t2"]), args.steps)
    if command == "eval":
        _parse_names(args.views, synthdata.VIEWS, "--views")
        _parse_names(args.splits, synthdata.SPLITS, "--splits")
    if command in TRAINING_COMMANDS:
        run = detector.TrainConfig.from_dict(config["train"])
        curriculum.Schedule(run.t1, run.t2)
        CpaConfig(**config["cpa"])
    if command == "sweep-seeds":
        _parse_seeds(args.seeds)
        if args.drop_pp < 0:
            raise ValueError(f"--drop-pp must be non-negative, got {args.drop_pp}")
    if command == "sweep-schedule":
        _parse_grid(args.grid)


# --- manifests and replay ------------------------------------------------


def write_manifest(out: Path, argv: list[str], cwd: Path, args: argparse.Namespace, config: dict[str, Any],
                   artifacts: list[Path], duration: float) -> Path:
    seed = config["splits"]["seed"] if args.command in ("generate", "geometry") else config["train"]["seed"]
    manifest = {
        "command": args.command,
        "argv": argv,
        "cwd": str(cwd),
        "config": config,
        "seed": seed,
        "versions": versions(),
        "artifacts": [str(p) for p in artifacts],
        "duration_s": round(duration, 3),
    }
    path = out / MANIFEST_NAME
    write_json_atomic(path, manifest)
    return path


def execute(args: argparse.Namespace, argv: list[str], config: dict[str, Any], cwd: Path) -> Path:
    started = time.perf_counter()
    out = prepare_out(args)
    artifacts = COMMANDS[args.command](args, config, out)
    manifest = write_manifest(out, argv, cwd, args, config, artifacts, time.perf_counter() - started)
    logger.info("command=%s manifest=%s duration_s=%.1f", args.command, manifest, time.perf_counter() - started)
    return manifest


def _with_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out = list(argv)
    if flag in out:
        out[out.index(flag) + 1] = value
        return out
    return out + [flag, value]


def replay(args: argparse.Namespace) -> Path:
    """Re-run a manifest's command with its recorded config; relative paths resolve against its cwd."""
    if not args.manifest.exists():
        raise FileNotFoundError(f"Run manifest not found: {args.manifest}")
    with args.manifest.open("r", encoding="utf-8") as f:
        manifest = json.load(f)
    argv = list(manifest["argv"])
    cwd = Path(manifest["cwd"])
    rerun = build_parser().parse_args(argv)
    if rerun.command == "replay":
        raise ValueError("a replay manifest cannot point at another replay")
    if rerun.out is None:
        rerun.out = Path("runs") / rerun.command
    for name in PATH_FLAGS:
        value = getattr(rerun, name, None)
        if isinstance(value, Path) and not value.is_absolute():
            setattr(rerun, name, cwd / value)
    if args.out is not None:
        rerun.out = args.out
        argv = _with_flag(argv, "--out", str(args.out.resolve()))
    rerun.force = True
    config = merge_config(DEFAULT_CONFIG, manifest["config"])
    check_usage(rerun, config)
    logger.info("replay argv=%s cwd=%s", " ".join(argv), cwd)
    return execute(rerun, argv, config, cwd)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.command == "replay":
            replay(args)
            return 0
        config = resolve_config(args)
    except Exception as exc:
        logger.error("error=%s", exc)
        return 1
    try:
        check_usage(args, config)
    except ValueError as exc:
        parser.error(f"{args.command}: {exc}")
    try:
        execute(args, argv, config, Path.cwd())
    except Exception as exc:
        logger.error("error=%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
