"""COCO-style detection scoring, cross-view gaps and multi-seed aggregation.

All AP values inside MapBlock are percentages. Truths are Detections with
score 1.0; only their box and category matter.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger("EVAL")

Box = tuple[float, float, float, float]
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAP_COLUMNS = ("map", "map50", "map75", "map_s", "map_m")
EVAL_CSV_HEADER = ("split", "view", "mAP", "mAP50", "mAP75", "mAP_S", "mAP_M", "gap")


@dataclass(frozen=True)
class Detection:
    box: Box
    category: int
    score: float = 1.0

    @property
    def area(self) -> float:
        return float(self.box[2] * self.box[3])

    def sort_key(self) -> tuple[float, float, float, float, float, int]:
        x, y, w, h = self.box
        return (-self.score, y, x, w, h, self.category)


@dataclass
class EvalConfig:
    small_area: float = 32.0**2
    medium_area: float = 96.0**2
    nms_iou: float = 0.5
    iou_start: float = 0.5
    iou_stop: float = 0.95
    iou_count: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.small_area <= self.medium_area:
            raise ValueError(f"area bounds need 0 < small <= medium, got {self.small_area}, {self.medium_area}")
        if self.iou_count < 1:
            raise ValueError(f"iou_count must be positive, got {self.iou_count}")

    @property
    def iou_thresholds(self) -> np.ndarray:
        return np.linspace(self.iou_start, self.iou_stop, self.iou_count)

    def area_ranges(self) -> dict[str, tuple[float, float]]:
        return {
            "all": (0.0, float("inf")),
            "small": (0.0, self.small_area),
            "medium": (self.small_area, self.medium_area),
            "large": (self.medium_area, float("inf")),
        }


def iou(a: Box, b: Box) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(dets: Iterable[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-category suppression in canonical order."""
    kept: list[Detection] = []
    by_category: dict[int, list[Detection]] = {}
    for det in sorted(dets, key=Detection.sort_key):
        same = by_category.setdefault(det.category, [])
        if all(iou(det.box, other.box) <= iou_thresh for other in same):
            same.append(det)
            kept.append(det)
    return kept


def interpolated_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP from cumulative recall/precision arrays."""
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    positions = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(positions < envelope.size, envelope[np.minimum(positions, envelope.size - 1)], 0.0)
    return float(np.mean(sampled))


def average_precision(
    dets: Mapping[Any, Sequence[Detection]],
    truths: Mapping[Any, Sequence[Detection]],
    iou_thresh: float,
    area_range: tuple[float, float] = (0.0, float("inf")),
) -> float | None:
    """AP for one category over a set of images, or None when no truth is in range.

    Truths outside `area_range` are ignored: a detection matched to one of
    them counts as neither hit nor miss, and so does an unmatched detection
    whose own area is out of range.
    """
    lo, hi = area_range
    positives = 0
    ignored: dict[Any, list[bool]] = {}
    for image, boxes in truths.items():
        flags = [not (lo <= t.area < hi) for t in boxes]
        ignored[image] = flags
        positives += flags.count(False)
    if positives == 0:
        return None

    ordered = sorted(
        ((det, image) for image in sorted(dets, key=repr) for det in dets[image]),
        key=lambda pair: (pair[0].sort_key(), repr(pair[1])),
    )
    matched = {image: [False] * len(truths.get(image, ())) for image in dets}
    hits: list[float] = []
    misses: list[float] = []
    for det, image in ordered:
        candidates = truths.get(image, ())
        flags = ignored.get(image, [])
        best = -1
        best_iou = iou_thresh
        # Non-ignored truths win over ignored ones; within a group the highest IoU wins.
        for want_ignored in (False, True):
            for index, truth in enumerate(candidates):
                if matched[image][index] or flags[index] != want_ignored:
                    continue
                overlap = iou(det.box, truth.box)
                if overlap >= best_iou and (best < 0 or overlap > best_iou):
                    best, best_iou = index, overlap
            if best >= 0:
                break
        if best >= 0:
            matched[image][best] = True
            if flags[best]:
                continue
            hits.append(1.0)
            misses.append(0.0)
        elif lo <= det.area < hi:
            hits.append(0.0)
            misses.append(1.0)

    tp = np.cumsum(hits)
    fp = np.cumsum(misses)
    recall = tp / positives
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    return interpolated_precision(recall, precision)


@dataclass
class MapBlock:
    map: float
    map50: float
    map75: float
    map_s: float | None
    map_m: float | None
    map_l: float | None = None

    def to_dict(self) -> dict[str, float | None]:
        return {key: getattr(self, key) for key in MAP_COLUMNS}


def _by_category(items: Mapping[Any, Sequence[Detection]], category: int) -> dict[Any, list[Detection]]:
    return {image: [d for d in entries if d.category == category] for image, entries in items.items()}


def coco_map(
    dets: Mapping[Any, Sequence[Detection]],
    truths: Mapping[Any, Sequence[Detection]],
    cfg: EvalConfig | None = None,
) -> MapBlock | None:
    """Mean AP over IoU thresholds and over categories present in the truths."""
    cfg = cfg or EvalConfig()
    unknown = sorted(set(map(repr, dets)) - set(map(repr, truths)))
    if unknown:
        raise ValueError(f"detections reference images without truths: {unknown}")
    categories = sorted({t.category for entries in truths.values() for t in entries})
    if not categories:
        return None

    thresholds = cfg.iou_thresholds
    table: dict[str, np.ndarray] = {}
    for bucket, area_range in cfg.area_ranges().items():
        grid = np.full((len(categories), thresholds.size), np.nan)
        for ci, category in enumerate(categories):
            cat_dets = _by_category(dets, category)
            cat_truths = _by_category(truths, category)
            for ti, threshold in enumerate(thresholds):
                ap = average_precision(cat_dets, cat_truths, float(threshold), area_range)
                if ap is not None:
                    grid[ci, ti] = ap
        table[bucket] = grid

    def _mean(grid: np.ndarray) -> float | None:
        rows = grid[~np.isnan(grid).all(axis=1)]
        return None if rows.size == 0 else float(100.0 * np.mean(rows))

    overall = table["all"]
    index50 = int(np.argmin(np.abs(thresholds - 0.5)))
    index75 = int(np.argmin(np.abs(thresholds - 0.75)))
    return MapBlock(
        map=float(100.0 * np.mean(overall)),
        map50=float(100.0 * np.mean(overall[:, index50])),
        map75=float(100.0 * np.mean(overall[:, index75])),
        map_s=_mean(table["small"]),
        map_m=_mean(table["medium"]),
        map_l=_mean(table["large"]),
    )


@dataclass
class EvalReport:
    ground: MapBlock | None
    aerial: MapBlock | None
    combined: MapBlock | None
    sample_count: int

    @property
    def gap(self) -> float | None:
        if self.ground is None or self.aerial is None:
            return None
        return self.ground.map - self.aerial.map

    def block(self, view: str) -> MapBlock | None:
        return {"ground": self.ground, "aerial": self.aerial, "all": self.combined}[view]

    def flat(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for view in ("ground", "aerial", "all"):
            block = self.block(view)
            for key in MAP_COLUMNS:
                out[f"{view}.{key}"] = None if block is None else getattr(block, key)
        out["gap"] = self.gap
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "ground": None if self.ground is None else self.ground.to_dict(),
            "aerial": None if self.aerial is None else self.aerial.to_dict(),
            "all": None if self.combined is None else self.combined.to_dict(),
            "gap": self.gap,
            "sample_count": self.sample_count,
        }


PredictFn = Callable[[Any], list[Detection]]


def truth_detections(sample: Any) -> list[Detection]:
    return [Detection(tuple(box), int(cat)) for box, cat in zip(sample.boxes, sample.categories)]


def evaluate_samples(predict_fn: PredictFn, samples: Sequence[Any], cfg: EvalConfig | None = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    dets: dict[str, list[Detection]] = {}
    truths: dict[str, list[Detection]] = {}
    views: dict[str, str] = {}
    for sample in samples:
        dets[sample.sample_id] = predict_fn(sample)
        truths[sample.sample_id] = truth_detections(sample)
        views[sample.sample_id] = sample.view

    def _subset(view: str) -> MapBlock | None:
        ids = [sid for sid, v in views.items() if v == view]
        if not ids:
            return None
        return coco_map({i: dets[i] for i in ids}, {i: truths[i] for i in ids}, cfg)

    return EvalReport(
        ground=_subset("ground"),
        aerial=_subset("aerial"),
        combined=coco_map(dets, truths, cfg) if samples else None,
        sample_count=len(samples),
    )


def cross_view_report(
    predict_fn: PredictFn,
    splits: Mapping[str, Sequence[Any]],
    cfg: EvalConfig | None = None,
) -> dict[str, EvalReport]:
    reports = {}
    for name, samples in splits.items():
        report = evaluate_samples(predict_fn, samples, cfg)
        for view in ("ground", "aerial"):
            if report.block(view) is None:
                logger.warning("split=%s view=%s block=absent", name, view)
        logger.info("split=%s samples=%d gap=%s", name, report.sample_count,
                    "n/a" if report.gap is None else f"{report.gap:.2f}")
        reports[name] = report
    return reports


# --- seeds ---------------------------------------------------------------


@dataclass
class SeedRun:
    seed: int
    metrics: dict[str, float | None] | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SeedReport:
    runs: list[SeedRun] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return [run.seed for run in self.runs]

    @property
    def failures(self) -> dict[int, str]:
        return {run.seed: run.error for run in self.runs if run.error is not None}

    def metrics(self) -> list[str]:
        names: list[str] = []
        for run in self.runs:
            for key in run.metrics or {}:
                if key not in names:
                    names.append(key)
        return names

    def values(self, metric: str) -> np.ndarray:
        return np.array(
            [run.metrics[metric] for run in self.runs if run.ok and run.metrics.get(metric) is not None],
            dtype=np.float64,
        )

    def mean(self, metric: str) -> float | None:
        values = self.values(metric)
        return float(np.mean(values)) if values.size else None

    def std(self, metric: str) -> float | None:
        """Population standard deviation over the successful seeds."""
        values = self.values(metric)
        return float(np.std(values)) if values.size else None

    def outliers(self, metric: str, drop_pp: float) -> list[int]:
        """Seeds whose metric sits more than drop_pp points below the best seed."""
        scored = [(run.seed, run.metrics[metric]) for run in self.runs if run.ok and run.metrics.get(metric) is not None]
        if not scored:
            return []
        best = max(value for _, value in scored)
        return sorted(seed for seed, value in scored if best - value > drop_pp)

    def to_dict(self, drop_pp: float | None = None, outlier_metric: str = "aerial.map") -> dict[str, Any]:
        metrics = self.metrics()
        out: dict[str, Any] = {
            "seeds": self.seeds,
            "runs": [{"seed": r.seed, "status": "ok" if r.ok else "failed", "metrics": r.metrics, "error": r.error}
                     for r in self.runs],
            "mean": {m: self.mean(m) for m in metrics},
            "std": {m: self.std(m) for m in metrics},
        }
        if drop_pp is not None:
            out["outliers"] = {"metric": outlier_metric, "drop_pp": drop_pp,
                               "seeds": self.outliers(outlier_metric, drop_pp)}
        return out


def seed_sweep(seeds: Sequence[int], run_fn: Callable[[int], Mapping[str, float | None]]) -> SeedReport:
    if not seeds:
        raise ValueError("seed_sweep needs at least one seed")
    if len(seeds) == 1:
        logger.warning("seeds=1 std=0.00 single_seed=true")
    report = SeedReport()
    for seed in seeds:
        try:
            metrics = dict(run_fn(seed))
        except Exception as exc:
            logger.error("seed=%d status=failed error=%s", seed, exc)
            report.runs.append(SeedRun(seed, error=f"{type(exc).__name__}: {exc}"))
            continue
        logger.info("seed=%d status=ok metrics=%d", seed, len(metrics))
        report.runs.append(SeedRun(seed, metrics=metrics))
    return report


# --- writers -------------------------------------------------------------


def fmt_metric(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def eval_csv_rows(reports: Mapping[str, EvalReport]) -> list[list[str]]:
    rows = []
    for split, report in reports.items():
        for view in ("ground", "aerial"):
            block = report.block(view)
            values = [None] * len(MAP_COLUMNS) if block is None else [getattr(block, k) for k in MAP_COLUMNS]
            rows.append([split, view, *(fmt_metric(v) for v in values), fmt_metric(report.gap)])
    return rows


def seed_csv_rows(report: SeedReport) -> tuple[list[str], list[list[str]]]:
    metrics = report.metrics()
    header = ["seed", "status", *metrics]
    rows = []
    for run in report.runs:
        if run.ok:
            rows.append([str(run.seed), "ok", *(fmt_metric(run.metrics.get(m)) for m in metrics)])
        else:
            rows.append([str(run.seed), "failed", *([""] * len(metrics))])
    rows.append(["mean", "", *(fmt_metric(report.mean(m)) for m in metrics)])
    rows.append(["std", "", *(fmt_metric(report.std(m)) for m in metrics)])
    return header, rows


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [list(header), *[list(r) for r in rows]]
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(header))]
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row in rows:
            writer.writerow([str(cell).rjust(width) for cell, width in zip(row, widths)])
