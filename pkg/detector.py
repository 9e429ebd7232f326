"""Toy cross-view detector: grid encoder, text embedder, grid-cell head and trainer.

Each token of the rendered feature grid goes through a two-layer encoder; the
head predicts C+1 class logits (last = background) and a 4-value box code per
cell. During training the encoder grid also feeds CPA, whose auxiliary losses
reach the trunk through the shared encoder. Inference never touches CPA.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

import numerics as nx
from checkpoint_protocol import read_checkpoint, write_checkpoint
from cpa import (
    CpaCoefficients,
    CpaConfig,
    CpaParams,
    FusionResult,
    RoutingTrace,
    TextSummary,
    TokenGrid,
    cpa_forward,
    routing_balance,
    routing_trace,
)
from curriculum import PairedDataset, SamplerState, Schedule, next_batch
from evalkit import MAP_COLUMNS, Detection, EvalConfig, EvalReport, evaluate_samples, nms
from numerics import Node
from synthdata import DatasetSplits, GeneratorConfig, SceneSample, center_cell, decode_cell

logger = logging.getLogger("TRAIN")

PREFIX = "det."
MODES = ("baseline", "cpa", "curriculum", "both")
CPA_MODES = ("cpa", "both")
CURRICULUM_MODES = ("curriculum", "both")
SELECT_ON = ("aerial", "all")
CHECKPOINT_KIND = "crossview-detector"


class DivergenceError(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int) -> None:
        super().__init__(f"{message} (epoch={epoch} step={step})")
        self.epoch = epoch
        self.step = step


class SplitAccessError(RuntimeError):
    """Test labels were requested before checkpoint selection finished."""


@dataclass
class SplitAudit:
    selection_done: bool = False
    test_reads: int = 0
    early_attempts: int = 0

    def mark_selected(self) -> None:
        self.selection_done = True
        logger.info("audit selection_done=true")

    def test_samples(self, splits: DatasetSplits) -> list[SceneSample]:
        if not self.selection_done:
            self.early_attempts += 1
            raise SplitAccessError("test split requested before checkpoint selection")
        self.test_reads += 1
        logger.info("audit test_reads=%d", self.test_reads)
        return list(splits.test.flat)


@dataclass
class TrainConfig:
    mode: str = "both"
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    lr_schedule: str = "cosine"
    t1: float = 1.0 / 3.0
    t2: float = 2.0 / 3.0
    lambda_align: float = 0.1
    lambda_ent: float = 0.01
    lambda_bal: float = 0.01
    seed: int = 42
    scored: bool = False
    select_on: str = "aerial"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.select_on not in SELECT_ON:
            raise ValueError(f"select_on must be one of {SELECT_ON}, got {self.select_on!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")

    @property
    def uses_cpa(self) -> bool:
        return self.mode in CPA_MODES

    @property
    def uses_curriculum(self) -> bool:
        return self.mode in CURRICULUM_MODES

    @property
    def coefficients(self) -> CpaCoefficients:
        return CpaCoefficients(align=self.lambda_align, ent=self.lambda_ent, bal=self.lambda_bal)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TrainConfig:
        return cls(**raw)


def _detector_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    d, c = cfg.d, cfg.categories
    return {
        "enc.w1": (d, d),
        "enc.b1": (d,),
        "enc.w2": (d, d),
        "enc.b2": (d,),
        "text.embed": (c + 1, d),
        "head.cls_w": (d, c + 1),
        "head.cls_b": (c + 1,),
        "head.box_w": (d, 4),
        "head.box_b": (4,),
    }


@dataclass
class DetectorParams:
    generator: GeneratorConfig
    tensors: dict[str, Node] = field(default_factory=dict)

    @classmethod
    def initialize(cls, generator: GeneratorConfig, rng: np.random.Generator, zero_head: bool = True) -> DetectorParams:
        tensors = {}
        for name, shape in _detector_shapes(generator).items():
            if len(shape) == 1 or (zero_head and name.startswith("head.")):
                value = np.zeros(shape)
            else:
                fan_in = shape[1] if name == "text.embed" else shape[0]
                value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
            tensors[PREFIX + name] = nx.parameter(value)
        return cls(generator, tensors)

    @classmethod
    def from_arrays(cls, generator: GeneratorConfig, arrays: dict[str, np.ndarray]) -> DetectorParams:
        tensors = {}
        for name, shape in _detector_shapes(generator).items():
            key = PREFIX + name
            if key not in arrays:
                raise ValueError(f"missing detector tensor: {key}")
            if tuple(arrays[key].shape) != shape:
                raise ValueError(f"detector tensor {key} has shape {arrays[key].shape}, expected {shape}")
            tensors[key] = nx.parameter(arrays[key])
        return cls(generator, tensors)

    def __getitem__(self, name: str) -> Node:
        return self.tensors[PREFIX + name]

    def named(self) -> dict[str, Node]:
        return dict(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.tensors.items()}

    def parameter_count(self) -> int:
        return int(sum(node.value.size for node in self.tensors.values()))


@dataclass
class DetectorModel:
    detector: DetectorParams
    cpa: CpaParams | None = None

    def named(self) -> dict[str, Node]:
        named = self.detector.named()
        if self.cpa is not None:
            named.update(self.cpa.named())
        return named

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.named().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, node in self.named().items():
            node.value[...] = arrays[name]

    def param_counts(self) -> dict[str, float]:
        det = self.detector.parameter_count()
        extra = self.cpa.parameter_count() if self.cpa is not None else 0
        return {"detector": det, "cpa": extra, "overhead": extra / det}


def build_model(
    generator: GeneratorConfig,
    seed: int,
    cpa_config: CpaConfig | None = None,
) -> DetectorModel:
    detector = DetectorParams.initialize(generator, np.random.default_rng([seed, 0]))
    cpa = None
    if cpa_config is not None:
        if cpa_config.d != generator.d:
            raise ValueError(f"cpa.d={cpa_config.d} must match generator.d={generator.d}")
        cpa = CpaParams.initialize(cpa_config, np.random.default_rng([seed, 1]))
    model = DetectorModel(detector, cpa)
    counts = model.param_counts()
    logger.info("detector_params=%d cpa_params=%d overhead=%.4f", counts["detector"], counts["cpa"],
                counts["overhead"])
    return model


# --- targets -------------------------------------------------------------


@dataclass
class CellTargets:
    classes: np.ndarray
    positives: np.ndarray
    boxes: np.ndarray


def cell_targets(sample: SceneSample, generator: GeneratorConfig) -> CellTargets:
    """Centre-cell assignment; when two centres share a cell the lower object index wins."""
    cells = generator.grid_h * generator.grid_w
    classes = np.full(cells, generator.categories, dtype=np.int64)
    codes = np.zeros((cells, 4))
    taken = np.zeros(cells, dtype=bool)
    for box, category in zip(sample.boxes, sample.categories):
        row, col, code = center_cell(box, generator)
        cell = row * generator.grid_w + col
        if taken[cell]:
            continue
        taken[cell] = True
        classes[cell] = category
        codes[cell] = code
    positives = np.flatnonzero(taken)
    return CellTargets(classes=classes, positives=positives, boxes=codes[positives])


# --- graph forward -------------------------------------------------------


def _features(sample: SceneSample) -> Node:
    if sample.features is None:
        raise ValueError(f"sample {sample.sample_id} has no rendered features")
    return sample.features.tokens


def encode_tokens(sample: SceneSample, params: DetectorParams) -> Node:
    hidden = nx.relu(nx.linear(_features(sample), params["enc.w1"], params["enc.b1"]))
    return nx.linear(hidden, params["enc.w2"], params["enc.b2"])


def text_summary(sample: SceneSample, params: DetectorParams) -> TextSummary:
    rows = [0] + [1 + c for c in sorted(set(sample.categories))]
    return TextSummary(nx.index(params["text.embed"], np.array(rows)))


def detection_loss(tokens: Node, targets: CellTargets, params: DetectorParams) -> Node:
    cells = tokens.shape[0]
    log_probs = nx.log_softmax(nx.linear(tokens, params["head.cls_w"], params["head.cls_b"]), axis=1)
    onehot = np.zeros(log_probs.shape)
    onehot[np.arange(cells), targets.classes] = 1.0
    loss = nx.scale(nx.sum_(log_probs * onehot), -1.0 / cells)
    if targets.positives.size:
        pred = nx.index(nx.linear(tokens, params["head.box_w"], params["head.box_b"]), targets.positives)
        loss = loss + nx.scale(nx.sum_(nx.abs_(pred - targets.boxes)), 1.0 / targets.positives.size)
    return loss


def forward_train(
    batch: Sequence[SceneSample],
    model: DetectorModel,
    run: TrainConfig,
    record: dict[str, Any] | None = None,
) -> Node:
    if not batch:
        raise ValueError("forward_train needs a nonempty batch")
    params = model.detector
    generator = params.generator
    use_cpa = run.uses_cpa and model.cpa is not None
    coefficients = run.coefficients

    det_terms: list[Node] = []
    aux_terms: list[Node] = []
    routing: list[Node] = []
    for sample in batch:
        tokens = encode_tokens(sample, params)
        det_terms.append(detection_loss(tokens, cell_targets(sample, generator), params))
        if use_cpa:
            grid = TokenGrid(tokens, generator.grid_h, generator.grid_w)
            result, aux = cpa_forward(grid, text_summary(sample, params), model.cpa, coefficients)
            aux_terms.append(aux)
            if isinstance(result, FusionResult):
                routing.append(result.w)

    def _mean(terms: list[Node]) -> Node:
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return nx.scale(total, 1.0 / len(terms))

    loss = _mean(det_terms)
    if record is not None:
        record["detection"] = loss.item()
    if use_cpa:
        aux = _mean(aux_terms)
        loss = loss + aux
        if coefficients.bal and routing:
            balance = routing_balance(routing)
            loss = loss - nx.scale(balance, coefficients.bal)
            if record is not None:
                record["balance"] = balance.item()
        if record is not None:
            record["aux"] = aux.item()
    if record is not None:
        record["total"] = loss.item()
    return loss


# --- inference -----------------------------------------------------------


def _head_outputs(sample: SceneSample, params: DetectorParams) -> tuple[np.ndarray, np.ndarray]:
    x = _features(sample).value
    hidden = np.maximum(x @ params["enc.w1"].value + params["enc.b1"].value, 0.0)
    tokens = hidden @ params["enc.w2"].value + params["enc.b2"].value
    logits = tokens @ params["head.cls_w"].value + params["head.cls_b"].value
    codes = tokens @ params["head.box_w"].value + params["head.box_b"].value
    return logits, codes


def infer(
    sample: SceneSample,
    params: DetectorParams,
    scored: bool = False,
    nms_iou: float = 0.5,
) -> list[Detection]:
    generator = params.generator
    logits, codes = _head_outputs(sample, params)
    background = generator.categories
    dets: list[Detection] = []
    for cell in range(logits.shape[0]):
        best = int(np.argmax(logits[cell, :background]))
        if not logits[cell, best] > logits[cell, background]:
            continue
        row, col = divmod(cell, generator.grid_w)
        x, y, w, h = decode_cell(row, col, codes[cell], generator)
        x0, y0 = min(max(x, 0.0), sample.image_w), min(max(y, 0.0), sample.image_h)
        x1, y1 = min(max(x + w, 0.0), sample.image_w), min(max(y + h, 0.0), sample.image_h)
        if x1 <= x0 or y1 <= y0:
            continue
        score = 1.0
        if scored:
            shifted = np.exp(logits[cell] - logits[cell].max())
            score = float(shifted[best] / shifted.sum())
        dets.append(Detection((x0, y0, x1 - x0, y1 - y0), best, score))
    return nms(dets, nms_iou)


def predictor(model: DetectorModel, scored: bool = False, nms_iou: float = 0.5) -> Callable[[SceneSample], list[Detection]]:
    detector = model.detector
    return lambda sample: infer(sample, detector, scored=scored, nms_iou=nms_iou)


# --- routing -------------------------------------------------------------


def analyze_routing(model: DetectorModel, samples: Sequence[SceneSample]) -> RoutingTrace:
    if model.cpa is None:
        raise ValueError("routing analysis needs CPA parameters")
    detector = model.detector
    generator = detector.generator

    def encode(sample: SceneSample) -> tuple[TokenGrid, TextSummary]:
        tokens = encode_tokens(sample, detector)
        return TokenGrid(tokens, generator.grid_h, generator.grid_w), text_summary(sample, detector)

    return routing_trace(samples, model.cpa, encode)


def routing_means(model: DetectorModel, samples: Sequence[SceneSample]) -> dict[str, dict[str, list[float]]]:
    detector = model.detector
    generator = detector.generator
    sums: dict[str, dict[str, Any]] = {}
    quiet = CpaCoefficients(align=0.0, ent=0.0, bal=0.0)
    for sample in samples:
        grid = TokenGrid(encode_tokens(sample, detector), generator.grid_h, generator.grid_w)
        result, _ = cpa_forward(grid, text_summary(sample, detector), model.cpa, quiet)
        acc = sums.setdefault(sample.view, {"w": np.zeros(3), "c": np.zeros(3), "n": 0})
        acc["w"] += result.w.value
        acc["c"] += result.c.c.value
        acc["n"] += 1
    return {
        view: {"w": [float(x) for x in acc["w"] / acc["n"]], "c": [float(x) for x in acc["c"] / acc["n"]]}
        for view, acc in sorted(sums.items())
    }


# --- training ------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val: dict[str, float | None]
    routing: dict[str, dict[str, list[float]]] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "loss": self.loss, "lr": self.lr, "val": self.val, "routing": self.routing}


@dataclass
class RunRecord:
    mode: str
    seed: int
    config: dict[str, Any]
    epochs: list[EpochRecord]
    selected_epoch: int
    selection_metric: str
    val: dict[str, float | None]
    test: dict[str, Any] | None
    param_counts: dict[str, float]
    paired_fraction: float
    cpa_variant: str | None = None
    model: DetectorModel | None = field(default=None, repr=False, compare=False)

    def test_metrics(self) -> dict[str, float | None]:
        if self.test is None:
            return {}
        out: dict[str, float | None] = {}
        for view in ("ground", "aerial", "all"):
            block = self.test.get(view) or {}
            for key in MAP_COLUMNS:
                out[f"{view}.{key}"] = block.get(key)
        out["gap"] = self.test.get("gap")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "epochs": [e.to_dict() for e in self.epochs],
            "selected_epoch": self.selected_epoch,
            "selection_metric": self.selection_metric,
            "val": self.val,
            "test": self.test,
            "param_counts": self.param_counts,
            "paired_fraction": self.paired_fraction,
            "cpa_variant": self.cpa_variant,
        }


def select_epoch(val_scores: Sequence[float | None]) -> int:
    """1-based index of the first best validation score; missing scores never win."""
    if not val_scores:
        raise ValueError("no validation scores to select from")
    best_epoch, best = 1, -math.inf
    for epoch, score in enumerate(val_scores, start=1):
        value = -math.inf if score is None else score
        if value > best:
            best_epoch, best = epoch, value
    return best_epoch


def _selection_score(report: EvalReport, select_on: str) -> float | None:
    block = report.aerial if select_on == "aerial" else report.combined
    return None if block is None else block.map


def train(
    run: TrainConfig,
    splits: DatasetSplits,
    generator: GeneratorConfig,
    cpa_config: CpaConfig | None = None,
    eval_config: EvalConfig | None = None,
    audit: SplitAudit | None = None,
    config_echo: dict[str, Any] | None = None,
) -> RunRecord:
    eval_config = eval_config or EvalConfig()
    audit = audit or SplitAudit()
    train_data: PairedDataset = splits.train
    val_samples = list(splits.val.flat)
    if not train_data.pairs:
        raise ValueError("training split is empty")

    model = build_model(generator, run.seed, (cpa_config or CpaConfig(d=generator.d)) if run.uses_cpa else None)
    params = model.named()
    steps_per_epoch = max(1, math.ceil(len(train_data.flat) / run.batch_size))
    total_steps = run.epochs * steps_per_epoch
    sampler = SamplerState.seeded(
        int(np.random.default_rng([run.seed, 2]).integers(2**31 - 1)),
        Schedule(run.t1, run.t2, total_steps),
        mode="curriculum" if run.uses_curriculum else "uniform",
    )
    optimizer = nx.OptimizerState(lr=run.lr, weight_decay=run.weight_decay)
    predict = predictor(model, scored=run.scored, nms_iou=eval_config.nms_iou)
    logger.info("mode=%s seed=%d steps=%d steps_per_epoch=%d sampler=%s", run.mode, run.seed, total_steps,
                steps_per_epoch, sampler.mode)

    epochs: list[EpochRecord] = []
    scores: list[float | None] = []
    best_arrays = model.arrays()
    step = 0
    for epoch in range(1, run.epochs + 1):
        losses = []
        lr = run.lr
        for _ in range(steps_per_epoch):
            lr = nx.warmup_cosine_lr(step, run.lr, total_steps, run.warmup_steps, run.lr_schedule)
            optimizer.lr = lr
            batch = next_batch(sampler, train_data, run.batch_size)
            nx.zero_grads(params.values())
            try:
                loss = forward_train(batch, model, run)
            except nx.NonFiniteError as exc:
                raise DivergenceError(f"non-finite value in forward pass: {exc}", epoch, step) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss={value}", epoch, step)
            nx.backward(loss)
            nx.optimizer_step(optimizer, params)
            losses.append(value)
            step += 1

        report = evaluate_samples(predict, val_samples, eval_config)
        score = _selection_score(report, run.select_on)
        routing = routing_means(model, val_samples) if model.cpa is not None and model.cpa.routed else None
        mean_loss = float(np.mean(losses))
        epochs.append(EpochRecord(epoch=epoch, loss=mean_loss, lr=lr, val=report.flat(), routing=routing))
        logger.info("epoch=%d loss=%.4f lr=%.2e val_map=%s", epoch, mean_loss, lr,
                    "n/a" if score is None else f"{score:.2f}")
        if routing is not None:
            for view, means in routing.items():
                logger.debug("epoch=%d view=%s w=%s c=%s", epoch, view,
                             ",".join(f"{x:.3f}" for x in means["w"]), ",".join(f"{x:.3f}" for x in means["c"]))
        scores.append(score)
        if select_epoch(scores) == epoch:
            best_arrays = model.arrays()

    selected = select_epoch(scores)
    model.load_arrays(best_arrays)
    audit.mark_selected()
    logger.info("selected_epoch=%d metric=%s.map value=%s", selected, run.select_on, _fmt(scores[selected - 1]))

    test_samples = audit.test_samples(splits)
    test_report = evaluate_samples(predict, test_samples, eval_config) if test_samples else None
    if test_report is not None:
        logger.info("test_map=%s gap=%s", _fmt(_selection_score(test_report, run.select_on)), _fmt(test_report.gap))

    return RunRecord(
        mode=run.mode,
        seed=run.seed,
        config=config_echo or {},
        epochs=epochs,
        selected_epoch=selected,
        selection_metric=f"val.{run.select_on}.map",
        val=epochs[selected - 1].val,
        test=None if test_report is None else test_report.to_dict(),
        param_counts=model.param_counts(),
        paired_fraction=sampler.paired_slots / max(1, sampler.total_slots),
        cpa_variant=None if model.cpa is None else model.cpa.config.variant,
        model=model,
    )


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


# --- checkpoints ---------------------------------------------------------


def save_checkpoint(path: Path, model: DetectorModel, extra: dict[str, Any] | None = None) -> None:
    metadata = {
        "kind": CHECKPOINT_KIND,
        "generator": model.detector.generator.to_dict(),
        "cpa": None if model.cpa is None else model.cpa.config.to_dict(),
    }
    if extra:
        metadata["extra"] = extra
    write_checkpoint(path, model.arrays(), metadata)
    logger.info("checkpoint=%s tensors=%d", path, len(model.named()))


def load_checkpoint(path: Path) -> DetectorModel:
    arrays, metadata = read_checkpoint(path)
    if metadata.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a detector checkpoint (kind={metadata.get('kind')!r})")
    generator = GeneratorConfig.from_dict(metadata["generator"])
    detector = DetectorParams.from_arrays(generator, {k: v for k, v in arrays.items() if k.startswith(PREFIX)})
    cpa = None
    if metadata.get("cpa") is not None:
        cpa = CpaParams.from_arrays(CpaConfig(**metadata["cpa"]), {k: v for k, v in arrays.items()
                                                                 if k.startswith("cpa.")})
    return DetectorModel(detector, cpa)
