"""Synthetic paired ground/aerial scenes, COCO JSON I/O and dataset directories.

Ground views hold few large boxes clustered around one spot; aerial views hold
many small boxes spread uniformly. Both views of a pair share most of their
category set but no geometry.

Dataset directory layout:
  <root>/manifest.json            generator config, master seed, split sizes
  <root>/{train,val,test}/annotations.json

COCO images are named `pair{pair_id:06d}_{view}.png`; that name is how view
and pair id survive a round trip. Category ids are written 1-based.

The centre token of each object carries an objectness flag plus its box code
(dx, dy, log w, log h). With `geometry_jitter = 0` box regression is close to
a linear read-out of those channels, so only classification and crowding
separate the views; the default jitter perturbs the code so localisation has
to lean on the category bumps as well. Tests that need a learnable toy
problem set it to zero.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from cpa import TokenGrid
from curriculum import PairedDataset
from run_config import write_json_atomic

logger = logging.getLogger("SYNTH")

VIEWS = ("ground", "aerial")
SPLITS = ("train", "val", "test")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
DEFAULT_SPLIT_PAIRS = {"train": 400, "val": 50, "test": 150}
GEOMETRY_CHANNELS = 5
BOX_MARGIN = 1.0
DATASET_FORMAT_VERSION = 1
FILE_NAME_PATTERN = re.compile(r"^pair(\d+)_(ground|aerial)(?:\.\w+)?$")

DEFAULT_CATEGORY_NAMES = (
    "car",
    "van",
    "truck",
    "bus",
    "motorcycle",
    "bicycle",
    "person",
    "trailer",
    "boat",
    "tractor",
)

Box = tuple[float, float, float, float]


class CocoFormatError(ValueError):
    """A COCO document is malformed or references ids that do not exist."""


def _range(value: Any, name: str) -> tuple[float, float]:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"{name} range is empty: [{lo}, {hi}]")
    return lo, hi


@dataclass
class GeneratorConfig:
    image_w: int = 256
    image_h: int = 256
    grid_h: int = 16
    grid_w: int = 16
    d: int = 32
    categories: int = 10
    ground_count: tuple[int, int] = (5, 15)
    ground_side: tuple[float, float] = (24.0, 64.0)
    ground_spread: float = 32.0
    aerial_count: tuple[int, int] = (20, 60)
    aerial_side: tuple[float, float] = (6.0, 20.0)
    consistency: float = 0.8
    noise_std: float = 0.05
    max_location_categories: int = 4
    embedding_seed: int = 0
    geometry_jitter: float = 0.1

    def __post_init__(self) -> None:
        self.ground_count = tuple(int(x) for x in _range(self.ground_count, "ground_count"))
        self.aerial_count = tuple(int(x) for x in _range(self.aerial_count, "aerial_count"))
        self.ground_side = tuple(float(x) for x in _range(self.ground_side, "ground_side"))
        self.aerial_side = tuple(float(x) for x in _range(self.aerial_side, "aerial_side"))
        if not 0.0 <= self.consistency <= 1.0:
            raise ValueError(f"consistency must be in [0, 1], got {self.consistency}")
        if self.d <= GEOMETRY_CHANNELS:
            raise ValueError(f"d must exceed {GEOMETRY_CHANNELS} geometry channels, got {self.d}")
        if self.categories < 1:
            raise ValueError(f"categories must be positive, got {self.categories}")
        if self.max_location_categories < 1:
            raise ValueError(f"max_location_categories must be positive, got {self.max_location_categories}")
        if self.noise_std < 0 or self.geometry_jitter < 0:
            raise ValueError("noise_std and geometry_jitter must be non-negative")
        if min(self.ground_count[0], self.aerial_count[0]) < 0:
            raise ValueError("object counts must be non-negative")
        largest = max(self.ground_side[1], self.aerial_side[1])
        if largest + 2 * BOX_MARGIN >= min(self.image_w, self.image_h):
            raise ValueError(f"box side {largest} does not fit inside {self.image_w}x{self.image_h}")
        if min(self.ground_side[0], self.aerial_side[0]) <= 0:
            raise ValueError("box sides must be positive")

    @property
    def cell_w(self) -> float:
        return self.image_w / self.grid_w

    @property
    def cell_h(self) -> float:
        return self.image_h / self.grid_h

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_w": self.image_w,
            "image_h": self.image_h,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "d": self.d,
            "categories": self.categories,
            "ground_count": list(self.ground_count),
            "ground_side": list(self.ground_side),
            "ground_spread": self.ground_spread,
            "aerial_count": list(self.aerial_count),
            "aerial_side": list(self.aerial_side),
            "consistency": self.consistency,
            "noise_std": self.noise_std,
            "max_location_categories": self.max_location_categories,
            "embedding_seed": self.embedding_seed,
            "geometry_jitter": self.geometry_jitter,
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> GeneratorConfig:
        return cls(**raw)


@dataclass
class SceneSample:
    features: TokenGrid | None
    boxes: list[Box]
    categories: list[int]
    view: str
    pair_id: int
    image_w: int
    image_h: int
    noise_seed: int | None = None

    def __post_init__(self) -> None:
        if len(self.boxes) != len(self.categories):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.categories)} categories")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        for x, y, w, h in self.boxes:
            if w <= 0 or h <= 0:
                raise ValueError(f"box extents must be positive: {(x, y, w, h)}")
            if x < 0 or y < 0 or x + w > self.image_w or y + h > self.image_h:
                raise ValueError(f"box {(x, y, w, h)} leaves the {self.image_w}x{self.image_h} image")

    @property
    def sample_id(self) -> str:
        return f"pair{self.pair_id:06d}_{self.view}"


@dataclass
class DatasetSplits:
    train: PairedDataset
    val: PairedDataset
    test: PairedDataset
    category_names: list[str] = field(default_factory=lambda: list(DEFAULT_CATEGORY_NAMES))

    def split(self, name: str) -> PairedDataset:
        if name not in SPLITS:
            raise ValueError(f"unknown split: {name}")
        return getattr(self, name)


def category_names_for(cfg: GeneratorConfig) -> list[str]:
    if cfg.categories <= len(DEFAULT_CATEGORY_NAMES):
        return list(DEFAULT_CATEGORY_NAMES[: cfg.categories])
    return list(DEFAULT_CATEGORY_NAMES) + [f"class{i}" for i in range(len(DEFAULT_CATEGORY_NAMES), cfg.categories)]


# --- generation ----------------------------------------------------------


def _view_categories(shared: Sequence[int], cfg: GeneratorConfig, rng: np.random.Generator) -> list[int]:
    kept: list[int] = []
    for category in shared:
        chosen = int(category) if rng.random() < cfg.consistency else int(rng.integers(cfg.categories))
        if chosen not in kept:
            kept.append(chosen)
    return kept


def _assign_categories(category_set: list[int], count: int, rng: np.random.Generator) -> list[int]:
    # The first objects cover the set; the remainder is drawn from it.
    head = category_set[:count]
    tail = [category_set[int(i)] for i in rng.integers(len(category_set), size=count - len(head))]
    return head + tail


def _clamp_box(cx: float, cy: float, w: float, h: float, cfg: GeneratorConfig) -> Box:
    x = min(max(cx - w / 2.0, BOX_MARGIN), cfg.image_w - BOX_MARGIN - w)
    y = min(max(cy - h / 2.0, BOX_MARGIN), cfg.image_h - BOX_MARGIN - h)
    return (round(x, 2), round(y, 2), round(w, 2), round(h, 2))


def _ground_boxes(count: int, cfg: GeneratorConfig, rng: np.random.Generator) -> list[Box]:
    center_x = rng.uniform(0.25 * cfg.image_w, 0.75 * cfg.image_w)
    center_y = rng.uniform(0.25 * cfg.image_h, 0.75 * cfg.image_h)
    boxes = []
    for _ in range(count):
        w, h = rng.uniform(*cfg.ground_side, size=2)
        cx, cy = rng.normal((center_x, center_y), cfg.ground_spread)
        boxes.append(_clamp_box(float(cx), float(cy), float(w), float(h), cfg))
    return boxes


def _aerial_boxes(count: int, cfg: GeneratorConfig, rng: np.random.Generator) -> list[Box]:
    boxes = []
    for _ in range(count):
        w, h = rng.uniform(*cfg.aerial_side, size=2)
        cx = rng.uniform(BOX_MARGIN + w / 2.0, cfg.image_w - BOX_MARGIN - w / 2.0)
        cy = rng.uniform(BOX_MARGIN + h / 2.0, cfg.image_h - BOX_MARGIN - h / 2.0)
        boxes.append(_clamp_box(float(cx), float(cy), float(w), float(h), cfg))
    return boxes


def generate_pair(
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    pair_id: int = 0,
    render: bool = True,
) -> tuple[SceneSample, SceneSample]:
    low = min(2, cfg.max_location_categories)
    k = min(int(rng.integers(low, cfg.max_location_categories + 1)), cfg.categories)
    shared = [int(c) for c in rng.choice(cfg.categories, size=k, replace=False)]

    samples = []
    for view in VIEWS:
        category_set = _view_categories(shared, cfg, rng)
        lo, hi = cfg.ground_count if view == "ground" else cfg.aerial_count
        count = int(rng.integers(lo, hi + 1))
        categories = _assign_categories(category_set, count, rng)
        boxes = _ground_boxes(count, cfg, rng) if view == "ground" else _aerial_boxes(count, cfg, rng)
        noise_seed = int(rng.integers(0, 2**31 - 1))
        features = None
        if render:
            features = render_features(boxes, categories, cfg, np.random.default_rng(noise_seed))
        samples.append(
            SceneSample(
                features=features,
                boxes=boxes,
                categories=categories,
                view=view,
                pair_id=pair_id,
                image_w=cfg.image_w,
                image_h=cfg.image_h,
                noise_seed=noise_seed,
            )
        )
    return samples[0], samples[1]


# --- rendering -----------------------------------------------------------


def category_embeddings(cfg: GeneratorConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.embedding_seed)
    table = rng.normal(size=(cfg.categories, cfg.d - GEOMETRY_CHANNELS))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def center_cell(box: Box, cfg: GeneratorConfig) -> tuple[int, int, np.ndarray]:
    """Grid cell holding the box centre plus its geometry code (dx, dy, log w, log h)."""
    x, y, w, h = box
    cx, cy = x + w / 2.0, y + h / 2.0
    col = min(int(cx // cfg.cell_w), cfg.grid_w - 1)
    row = min(int(cy // cfg.cell_h), cfg.grid_h - 1)
    code = np.array(
        [
            cx / cfg.cell_w - col,
            cy / cfg.cell_h - row,
            math.log(w / cfg.cell_w),
            math.log(h / cfg.cell_h),
        ]
    )
    return row, col, code


def decode_cell(row: int, col: int, code: np.ndarray, cfg: GeneratorConfig) -> Box:
    cx = (col + float(code[0])) * cfg.cell_w
    cy = (row + float(code[1])) * cfg.cell_h
    w = math.exp(float(code[2])) * cfg.cell_w
    h = math.exp(float(code[3])) * cfg.cell_h
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def render_features(
    boxes: Sequence[Box],
    categories: Sequence[int],
    cfg: GeneratorConfig,
    rng: np.random.Generator | None = None,
) -> TokenGrid:
    """Gaussian category bumps plus centre-token geometry channels.

    With an rng, pixel noise is added everywhere and the box code of every
    centre token is jittered by `geometry_jitter`.
    """
    embed = category_embeddings(cfg)
    semantic = cfg.d - GEOMETRY_CHANNELS
    features = np.zeros((cfg.grid_h, cfg.grid_w, cfg.d))
    ys = (np.arange(cfg.grid_h) + 0.5) * cfg.cell_h
    xs = (np.arange(cfg.grid_w) + 0.5) * cfg.cell_w
    centres = []
    for box, category in zip(boxes, categories):
        x, y, w, h = box
        cx, cy = x + w / 2.0, y + h / 2.0
        sx = max(w / 2.0, cfg.cell_w / 2.0)
        sy = max(h / 2.0, cfg.cell_h / 2.0)
        bump = np.exp(-((ys[:, None] - cy) ** 2) / (2 * sy**2) - ((xs[None, :] - cx) ** 2) / (2 * sx**2))
        features[:, :, :semantic] += bump[:, :, None] * embed[category]
        row, col, code = center_cell(box, cfg)
        features[row, col, semantic] += 1.0
        features[row, col, semantic + 1 :] += code
        centres.append((row, col))
    if rng is not None and cfg.noise_std > 0:
        features += rng.normal(0.0, cfg.noise_std, size=features.shape)
    if rng is not None and cfg.geometry_jitter > 0 and centres:
        jitter = rng.normal(0.0, cfg.geometry_jitter, size=(len(centres), GEOMETRY_CHANNELS - 1))
        for (row, col), offset in zip(centres, jitter):
            features[row, col, semantic + 1 :] += offset
    return TokenGrid.from_array(features.reshape(cfg.grid_h * cfg.grid_w, cfg.d), cfg.grid_h, cfg.grid_w)


def attach_features(samples: Iterable[SceneSample], cfg: GeneratorConfig) -> list[SceneSample]:
    out = []
    for sample in samples:
        rng = np.random.default_rng(sample.noise_seed) if sample.noise_seed is not None else None
        out.append(replace(sample, features=render_features(sample.boxes, sample.categories, cfg, rng)))
    return out


# --- geometry statistics -------------------------------------------------


def _nearest_gaps(boxes: Sequence[Box]) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    x0, y0 = arr[:, 0], arr[:, 1]
    x1, y1 = x0 + arr[:, 2], y0 + arr[:, 3]
    dx = np.maximum(0.0, np.maximum(x0[:, None], x0[None, :]) - np.minimum(x1[:, None], x1[None, :]))
    dy = np.maximum(0.0, np.maximum(y0[:, None], y0[None, :]) - np.minimum(y1[:, None], y1[None, :]))
    gaps = np.hypot(dx, dy)
    np.fill_diagonal(gaps, np.inf)
    return gaps.min(axis=1)


def geometry_statistics(samples: Iterable[SceneSample]) -> dict[str, dict[str, float]]:
    """Per-view means of object count, box area, edge-to-edge nearest gap, spread and coverage."""
    buckets: dict[str, dict[str, list[float]]] = {}
    for sample in samples:
        acc = buckets.setdefault(sample.view, {"count": [], "area": [], "gap": [], "spread": [], "coverage": []})
        acc["count"].append(len(sample.boxes))
        if not sample.boxes:
            continue
        arr = np.asarray(sample.boxes, dtype=np.float64)
        areas = arr[:, 2] * arr[:, 3]
        acc["area"].extend(areas.tolist())
        centres = arr[:, :2] + arr[:, 2:] / 2.0
        acc["spread"].append(float(np.mean(np.linalg.norm(centres - centres.mean(axis=0), axis=1))))
        acc["coverage"].append(float(areas.sum() / (sample.image_w * sample.image_h)))
        if len(sample.boxes) >= 2:
            acc["gap"].extend(_nearest_gaps(sample.boxes).tolist())

    def _mean(values: list[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    return {
        view: {
            "samples": float(len(acc["count"])),
            "mean_object_count": _mean(acc["count"]),
            "mean_box_area": _mean(acc["area"]),
            "mean_nn_gap": _mean(acc["gap"]),
            "mean_spread": _mean(acc["spread"]),
            "mean_coverage": _mean(acc["coverage"]),
        }
        for view, acc in sorted(buckets.items())
    }


# --- COCO I/O ------------------------------------------------------------


def coco_document(samples: Sequence[SceneSample], category_names: Sequence[str]) -> dict[str, Any]:
    images = []
    annotations = []
    for image_index, sample in enumerate(samples, start=1):
        image = {
            "id": image_index,
            "file_name": f"{sample.sample_id}.png",
            "width": sample.image_w,
            "height": sample.image_h,
        }
        if sample.noise_seed is not None:
            image["noise_seed"] = sample.noise_seed
        images.append(image)
        for box, category in zip(sample.boxes, sample.categories):
            if not 0 <= category < len(category_names):
                raise ValueError(f"category {category} outside [0, {len(category_names)})")
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_index,
                    "category_id": category + 1,
                    "bbox": [float(v) for v in box],
                    "area": float(box[2] * box[3]),
                    "iscrowd": 0,
                }
            )
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(category_names)]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_coco(samples: Sequence[SceneSample], path: Path, category_names: Sequence[str] = DEFAULT_CATEGORY_NAMES) -> None:
    write_json_atomic(path, coco_document(samples, category_names))


def _require_list(doc: dict[str, Any], key: str) -> list[dict[str, Any]]:
    value = doc.get(key)
    if not isinstance(value, list) or not all(isinstance(item, dict) for item in value):
        raise CocoFormatError(f"COCO document needs a list of objects under {key!r}")
    return value


def parse_coco(doc: Any) -> tuple[list[SceneSample], list[str]]:
    if not isinstance(doc, dict):
        raise CocoFormatError("COCO document must be a JSON object")
    images = _require_list(doc, "images")
    annotations = _require_list(doc, "annotations")
    categories = _require_list(doc, "categories")

    try:
        category_ids = sorted(int(c["id"]) for c in categories)
        names_by_id = {int(c["id"]): str(c.get("name", c["id"])) for c in categories}
        image_ids = [int(img["id"]) for img in images]
    except (KeyError, TypeError, ValueError) as exc:
        raise CocoFormatError(f"COCO entry missing an integer id: {exc}") from exc
    category_index = {cid: index for index, cid in enumerate(category_ids)}

    known_images = set(image_ids)
    missing_images = sorted({int(a.get("image_id", -1)) for a in annotations} - known_images)
    if missing_images:
        raise CocoFormatError(f"annotations reference missing image ids: {missing_images}")
    missing_categories = sorted({int(a.get("category_id", -1)) for a in annotations} - set(category_ids))
    if missing_categories:
        raise CocoFormatError(f"annotations reference missing category ids: {missing_categories}")

    by_image: dict[int, list[dict[str, Any]]] = {image_id: [] for image_id in image_ids}
    for ann in sorted(annotations, key=lambda a: int(a.get("id", 0))):
        by_image[int(ann["image_id"])].append(ann)

    samples = []
    for image in sorted(images, key=lambda img: int(img["id"])):
        stem = Path(str(image.get("file_name", ""))).name
        match = FILE_NAME_PATTERN.match(stem)
        if match is None:
            raise CocoFormatError(
                f"image {image['id']} file_name {stem!r} does not follow pair<id>_<view>"
            )
        boxes: list[Box] = []
        cats: list[int] = []
        for ann in by_image[int(image["id"])]:
            bbox = ann.get("bbox")
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise CocoFormatError(f"annotation {ann.get('id')} has a malformed bbox: {bbox!r}")
            boxes.append(tuple(float(v) for v in bbox))
            cats.append(category_index[int(ann["category_id"])])
        try:
            samples.append(
                SceneSample(
                    features=None,
                    boxes=boxes,
                    categories=cats,
                    view=match.group(2),
                    pair_id=int(match.group(1)),
                    image_w=int(image["width"]),
                    image_h=int(image["height"]),
                    noise_seed=int(image["noise_seed"]) if "noise_seed" in image else None,
                )
            )
        except (KeyError, ValueError) as exc:
            raise CocoFormatError(f"image {image['id']}: {exc}") from exc
    return samples, [names_by_id[cid] for cid in category_ids]


def load_coco(path: Path) -> list[SceneSample]:
    return read_coco(path)[0]


def read_coco(path: Path) -> tuple[list[SceneSample], list[str]]:
    if not path.exists():
        raise FileNotFoundError(f"COCO file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CocoFormatError(f"{path}: malformed JSON ({exc})") from exc
    return parse_coco(doc)


# --- dataset directories -------------------------------------------------


def generate_split(cfg: GeneratorConfig, master_seed: int, split: str, pairs: int, first_pair_id: int = 0,
                   render: bool = True) -> PairedDataset:
    code = SPLIT_CODES[split]
    members = []
    for index in range(pairs):
        rng = np.random.default_rng([master_seed, code, index])
        members.append(generate_pair(cfg, rng, pair_id=first_pair_id + index, render=render))
    return PairedDataset(members)


def generate_splits(
    cfg: GeneratorConfig,
    master_seed: int,
    split_pairs: dict[str, int] | None = None,
    render: bool = True,
) -> DatasetSplits:
    sizes = dict(DEFAULT_SPLIT_PAIRS if split_pairs is None else split_pairs)
    built = {}
    next_id = 0
    for split in SPLITS:
        count = int(sizes.get(split, 0))
        if count < 0:
            raise ValueError(f"split {split} needs a non-negative pair count, got {count}")
        built[split] = generate_split(cfg, master_seed, split, count, first_pair_id=next_id, render=render)
        next_id += count
    return DatasetSplits(category_names=category_names_for(cfg), **built)


def write_dataset(
    root: Path,
    cfg: GeneratorConfig,
    master_seed: int,
    split_pairs: dict[str, int] | None = None,
) -> Path:
    splits = generate_splits(cfg, master_seed, split_pairs, render=False)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "master_seed": master_seed,
        "generator": cfg.to_dict(),
        "category_names": splits.category_names,
        "splits": {name: len(splits.split(name)) for name in SPLITS},
    }
    for name in SPLITS:
        save_coco(splits.split(name).flat, root / name / "annotations.json", splits.category_names)
        logger.info("split=%s pairs=%d path=%s", name, len(splits.split(name)), root / name / "annotations.json")
    write_json_atomic(root / "manifest.json", manifest)
    return root / "manifest.json"


def read_manifest(root: Path) -> dict[str, Any]:
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        return json.load(f)


def load_dataset(root: Path, render: bool = True) -> tuple[DatasetSplits, GeneratorConfig]:
    manifest = read_manifest(root)
    cfg = GeneratorConfig.from_dict(manifest["generator"])
    built = {}
    for name in SPLITS:
        samples, names = read_coco(root / name / "annotations.json")
        if render:
            samples = attach_features(samples, cfg)
        built[name] = PairedDataset.from_samples(samples)
    logger.info("dataset=%s pairs=%s", root, {name: len(built[name]) for name in SPLITS})
    return DatasetSplits(category_names=list(manifest.get("category_names", names)), **built), cfg
