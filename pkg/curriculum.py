"""Paired curriculum: the paired-sampling schedule and the batch sampler it drives."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np
from scipy import stats

if TYPE_CHECKING:
    from synthdata import SceneSample

logger = logging.getLogger("CURRICULUM")

DEFAULT_T1 = 1.0 / 3.0
DEFAULT_T2 = 2.0 / 3.0
DEFAULT_SWEEP_GRID: tuple[tuple[float, float], ...] = tuple(
    (t1, t2) for t1 in (0.23, 0.33, 0.43) for t2 in (0.57, 0.67, 0.77)
)
SAMPLER_MODES = ("curriculum", "uniform")
VIEWS = ("ground", "aerial")


@dataclass(frozen=True)
class Schedule:
    t1: float = DEFAULT_T1
    t2: float = DEFAULT_T2
    total_steps: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.t1 <= self.t2 <= 1.0:
            raise ValueError(f"schedule needs 0 <= t1 <= t2 <= 1, got t1={self.t1} t2={self.t2}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    @property
    def boundaries(self) -> tuple[float, float]:
        return self.t1 * self.total_steps, self.t2 * self.total_steps


def p_pair(t: float, s: Schedule) -> float:
    if t < 0 or t > s.total_steps:
        raise ValueError(f"step {t} outside [0, {s.total_steps}]")
    big_t1, big_t2 = s.boundaries
    if t < big_t1:
        return 1.0
    if t >= big_t2:
        return 0.0
    return 1.0 - (t - big_t1) / (big_t2 - big_t1)


def schedule_table(s: Schedule) -> list[tuple[int, float]]:
    return [(step, p_pair(step, s)) for step in range(s.total_steps + 1)]


class PairedDataset:
    """Ground/aerial pairs plus the flat list of their members (g0, a0, g1, a1, ...)."""

    def __init__(self, pairs: Sequence[tuple[SceneSample, SceneSample]]) -> None:
        for ground, aerial in pairs:
            if ground.pair_id != aerial.pair_id:
                raise ValueError(f"pair members disagree on pair id: {ground.pair_id} vs {aerial.pair_id}")
            if (ground.view, aerial.view) != VIEWS:
                raise ValueError(
                    f"pair {ground.pair_id} needs views {VIEWS}, got ({ground.view}, {aerial.view})"
                )
        self.pairs = list(pairs)
        self.flat = [member for pair in self.pairs for member in pair]

    @classmethod
    def from_samples(cls, samples: Iterable[SceneSample]) -> PairedDataset:
        grouped: dict[int, dict[str, SceneSample]] = defaultdict(dict)
        for sample in samples:
            if sample.view in grouped[sample.pair_id]:
                raise ValueError(f"duplicate {sample.view} view for pair {sample.pair_id}")
            grouped[sample.pair_id][sample.view] = sample
        pairs = []
        for pair_id in sorted(grouped):
            members = grouped[pair_id]
            missing = [view for view in VIEWS if view not in members]
            if missing:
                raise ValueError(f"pair {pair_id} is missing view(s): {missing}")
            pairs.append((members["ground"], members["aerial"]))
        return cls(pairs)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class SamplerState:
    rng: np.random.Generator
    schedule: Schedule
    mode: str = "curriculum"
    step: int = 0
    paired_slots: int = 0
    total_slots: int = 0
    history: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"sampler mode must be one of {SAMPLER_MODES}, got {self.mode!r}")

    @classmethod
    def seeded(cls, seed: int, schedule: Schedule, mode: str = "curriculum") -> SamplerState:
        return cls(rng=np.random.default_rng(seed), schedule=schedule, mode=mode)

    def current_p_pair(self) -> float:
        if self.mode == "uniform":
            return 0.0
        return p_pair(min(self.step, self.schedule.total_steps), self.schedule)


def next_batch(state: SamplerState, data: PairedDataset, batch_size: int) -> list[SceneSample]:
    """Fill a batch two slots at a time: a whole pair with probability p_pair, else two free draws."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 2, got {batch_size}")
    if not data.pairs:
        raise ValueError("cannot sample from an empty dataset")

    p = state.current_p_pair()
    batch: list[SceneSample] = []
    paired = 0
    for _ in range(batch_size // 2):
        if state.rng.random() < p:
            ground, aerial = data.pairs[int(state.rng.integers(len(data.pairs)))]
            batch.extend((ground, aerial))
            paired += 1
        else:
            first, second = state.rng.integers(len(data.flat), size=2)
            batch.extend((data.flat[int(first)], data.flat[int(second)]))
    state.paired_slots += paired
    state.total_slots += batch_size // 2
    state.history.append(paired)
    state.step += 1
    logger.debug("step=%d p_pair=%.4f paired_slots=%d", state.step, p, paired)
    return batch


@dataclass
class PairingTest:
    observed: int
    slots: int
    expected_rate: float
    statistic: float
    p_value: float

    @property
    def observed_rate(self) -> float:
        return self.observed / self.slots if self.slots else 0.0


def pairing_test(batches: Iterable[Sequence[SceneSample]], data: PairedDataset, p: float) -> PairingTest:
    """Chi-square test of how often a slot's two samples share a pair id.

    A slot is paired with probability p; two free draws from the 2N flat samples
    land on the same pair with probability 1/N, so the expected rate is
    p + (1 - p) / N.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if not data.pairs:
        raise ValueError("cannot test pairing on an empty dataset")
    observed = slots = 0
    for batch in batches:
        for first, second in zip(batch[0::2], batch[1::2]):
            observed += first.pair_id == second.pair_id
            slots += 1
    if slots == 0:
        raise ValueError("no slots to test")
    rate = p + (1.0 - p) / len(data.pairs)
    if rate >= 1.0:
        # Degenerate: every slot must be paired.
        hit = observed == slots
        return PairingTest(observed, slots, rate, 0.0 if hit else float("inf"), 1.0 if hit else 0.0)
    result = stats.chisquare([observed, slots - observed], [slots * rate, slots * (1.0 - rate)])
    logger.debug("pairing_test slots=%d observed=%d expected_rate=%.4f p=%.4g", slots, observed, rate,
                 result.pvalue)
    return PairingTest(observed, slots, rate, float(result.statistic), float(result.pvalue))


@dataclass
class SweepCell:
    t1: float
    t2: float
    val_map: float


@dataclass
class SweepReport:
    cells: list[SweepCell]

    @property
    def spread(self) -> float:
        values = [cell.val_map for cell in self.cells]
        return max(values) - min(values) if values else 0.0

    def to_dict(self) -> dict[str, object]:
        return {
            "cells": [{"t1": c.t1, "t2": c.t2, "val_map": c.val_map} for c in self.cells],
            "spread": self.spread,
        }


def sensitivity_sweep(
    grid: Iterable[tuple[float, float]],
    train_fn: Callable[[float, float], float],
) -> SweepReport:
    cells: list[SweepCell] = []
    for t1, t2 in grid:
        if not 0.0 <= t1 <= t2 <= 1.0:
            raise ValueError(f"sweep cell needs 0 <= t1 <= t2 <= 1, got ({t1}, {t2})")
        val_map = float(train_fn(t1, t2))
        logger.info("sweep t1=%.2f t2=%.2f val_map=%.2f", t1, t2, val_map)
        cells.append(SweepCell(t1, t2, val_map))
    report = SweepReport(cells)
    logger.info("sweep cells=%d spread=%.2f", len(cells), report.spread)
    return report
