"""Seeded experiment checks that are too slow for the unit suite.

Trains every ablation mode, plus CPA with a single pathway, on the shipped
default configuration for each seed. Then checks routing correlation,
ablation direction, the pathway ablation, seed stability and bit-exact
determinism against golden RunRecords. The first run writes the
goldens; later runs compare against them.

  python3 tools/run_acceptance.py --out runs/acceptance --goldens goldens
"""

import argparse
import json
import logging
import sys
from pathlib import Path

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

import detector
import synthdata
from cpa import CpaConfig
from evalkit import EvalConfig, SeedReport, SeedRun
from run_config import apply_overrides, load_config, write_json_atomic

logger = logging.getLogger("ACCEPT")

SEEDS = (42, 123, 789)
RUNS = {
    "baseline": {"train.mode": "baseline", "cpa.variant": "full"},
    "curriculum": {"train.mode": "curriculum", "cpa.variant": "full"},
    "cpa": {"train.mode": "cpa", "cpa.variant": "full"},
    "both": {"train.mode": "both", "cpa.variant": "full"},
    "cpa_single_path": {"train.mode": "cpa", "cpa.variant": "single_path"},
}
ROUTING_R = 0.5
ROUTING_MIN_SEEDS = 2


def normalized(payload: dict) -> dict:
    return json.loads(json.dumps(payload, sort_keys=True))


def run_all(config: dict, splits: synthdata.DatasetSplits, generator: synthdata.GeneratorConfig,
            seeds: tuple[int, ...]) -> dict[str, dict[int, detector.RunRecord]]:
    records: dict[str, dict[int, detector.RunRecord]] = {}
    for name, overrides in RUNS.items():
        for seed in seeds:
            resolved = apply_overrides(config, {**overrides, "train.seed": seed})
            run = detector.TrainConfig.from_dict(resolved["train"])
            record = detector.train(run, splits, generator, CpaConfig(d=generator.d, **resolved["cpa"]),
                                    EvalConfig(**resolved["eval"]), config_echo=resolved)
            records.setdefault(name, {})[seed] = record
    return records


def check_routing(records: dict[int, detector.RunRecord], val: list[synthdata.SceneSample]) -> tuple[bool, dict]:
    detail = {}
    passing = 0
    for seed, record in records.items():
        trace = detector.analyze_routing(record.model, val)
        r_d, r_s = trace.pearson["d"].r, trace.pearson["s"].r
        ok = r_d is not None and r_s is not None and r_d > ROUTING_R and r_s < -ROUTING_R
        passing += ok
        detail[seed] = {"r_d": r_d, "r_s": r_s, "ok": ok}
    return passing >= ROUTING_MIN_SEEDS, detail


def seed_report(records: dict[int, detector.RunRecord]) -> SeedReport:
    return SeedReport([SeedRun(seed, metrics=record.test_metrics()) for seed, record in records.items()])


def mean_val(records: dict[int, detector.RunRecord]) -> float:
    values = [r.val.get(r.selection_metric.split(".", 1)[1]) or 0.0 for r in records.values()]
    return sum(values) / len(values)


def check_ablation(records: dict[str, dict[int, detector.RunRecord]]) -> tuple[bool, dict]:
    both_val, base_val = mean_val(records["both"]), mean_val(records["baseline"])
    both_test = seed_report(records["both"]).mean("aerial.map") or 0.0
    base_test = seed_report(records["baseline"]).mean("aerial.map") or 0.0
    detail = {"val": {"both": both_val, "baseline": base_val}, "test_aerial": {"both": both_test, "baseline": base_test}}
    return both_val >= base_val and both_test >= base_test, detail


def check_pathways(records: dict[str, dict[int, detector.RunRecord]]) -> tuple[bool, dict]:
    full, single = mean_val(records["cpa"]), mean_val(records["cpa_single_path"])
    return full >= single, {"val": {"full": full, "single_path": single}}


def check_stability(records: dict[str, dict[int, detector.RunRecord]]) -> tuple[bool, dict]:
    both = seed_report(records["both"]).std("aerial.map")
    curriculum = seed_report(records["curriculum"]).std("aerial.map")
    ok = both is not None and curriculum is not None and both <= curriculum
    return ok, {"std_both": both, "std_curriculum": curriculum}


def check_goldens(records: dict[str, dict[int, detector.RunRecord]], goldens: Path) -> tuple[bool, dict]:
    detail = {}
    ok = True
    for name, by_seed in records.items():
        for seed, record in by_seed.items():
            path = goldens / f"{name}_seed{seed}.json"
            current = normalized(record.to_dict())
            if not path.exists():
                write_json_atomic(path, current)
                detail[path.name] = "written"
                continue
            with path.open("r", encoding="utf-8") as f:
                same = json.load(f) == current
            detail[path.name] = "match" if same else "MISMATCH"
            ok = ok and same
    return ok, detail


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run the seeded acceptance experiments")
    parser.add_argument("--config", default=None, help="Config JSON (default: shipped defaults)")
    parser.add_argument("--out", default="runs/acceptance", help="Where the summary is written")
    parser.add_argument("--goldens", default="goldens", help="Golden RunRecord directory")
    parser.add_argument("--seeds", default=",".join(str(s) for s in SEEDS))
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    logging.basicConfig(level=logging.INFO, format="[%(name)s] %(message)s", force=True)
    config = load_config(Path(args.config) if args.config else None)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    generator = synthdata.GeneratorConfig.from_dict(config["generator"])
    sizes = {name: config["splits"][name] for name in synthdata.SPLITS}
    splits = synthdata.generate_splits(generator, int(config["splits"]["seed"]), sizes)

    records = run_all(config, splits, generator, seeds)
    results = {
        "routing_correlation": check_routing(records["cpa"], list(splits.val.flat)),
        "ablation_direction": check_ablation(records),
        "pathway_ablation": check_pathways(records),
        "stability_direction": check_stability(records),
        "determinism": check_goldens(records, Path(args.goldens)),
    }
    for name, (ok, detail) in results.items():
        logger.info("check=%s status=%s detail=%s", name, "pass" if ok else "FAIL", json.dumps(detail, sort_keys=True))

    summary = {name: {"pass": ok, "detail": detail} for name, (ok, detail) in results.items()}
    write_json_atomic(Path(args.out) / "acceptance.json", normalized(summary))
    return 0 if all(ok for ok, _ in results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
