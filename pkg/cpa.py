"""Complexity-aware pathway aggregation.

A small estimator turns token and text statistics into a complexity profile
over three regimes (sparse, medium, dense). Three pathways summarise the token
grid at matching granularities, and a gate conditioned on the pathway outputs
and the profile fuses them. Everything here is training-time only; inference
never calls into this module.

The `single_path` variant replaces estimator, pathways and gate with one
linear pathway over mean-pooled tokens and keeps only the alignment loss. It
is the routing-free ablation of the full module.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

import numerics as nx
from numerics import Node

logger = logging.getLogger("CPA")

PREFIX = "cpa."
PATHWAYS = ("s", "m", "d")
VARIANTS = ("full", "single_path")
ROUTING_CSV_HEADER = ("sample_id", "view", "object_count", "w_s", "w_m", "w_d", "c_s", "c_m", "c_d")
MIN_TRACE_SAMPLES = 3

# Routing blocks start at zero so the profile and the gate are uniform at init.
ZERO_INIT_BLOCKS = ("est.w2", "est.b2", "gate.w", "gate.b")


@dataclass
class TokenGrid:
    tokens: Node
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        rows = self.tokens.shape[0] if self.tokens.value.ndim == 2 else -1
        if rows != self.grid_h * self.grid_w:
            raise ValueError(
                f"token grid {self.grid_h}x{self.grid_w} needs {self.grid_h * self.grid_w} rows, "
                f"got tokens of shape {self.tokens.shape}"
            )

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def from_array(cls, array: np.ndarray, grid_h: int, grid_w: int) -> TokenGrid:
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 3:
            array = array.reshape(grid_h * grid_w, array.shape[2])
        if not np.all(np.isfinite(array)):
            raise ValueError(f"token grid holds {int(np.count_nonzero(~np.isfinite(array)))} non-finite values")
        return cls(nx.constant(array), grid_h, grid_w)


@dataclass
class TextSummary:
    tokens: Node

    def __post_init__(self) -> None:
        if self.tokens.value.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"text summary needs shape (L>=1, d), got {self.tokens.shape}")


@dataclass
class ComplexityProfile:
    c: Node

    def as_array(self) -> np.ndarray:
        return self.c.value.copy()


@dataclass
class FusionResult:
    v_s: Node
    v_m: Node
    v_d: Node
    w: Node
    v_fused: Node
    c: ComplexityProfile


@dataclass
class SinglePathResult:
    v_fused: Node


@dataclass
class CpaConfig:
    d: int = 32
    hidden: int | None = None
    d_align: int | None = None
    region_h: int = 2
    region_w: int = 2
    variant: str = "full"

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError(f"cpa.d must be positive, got {self.d}")
        if self.variant not in VARIANTS:
            raise ValueError(f"cpa.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.region_h < 1 or self.region_w < 1:
            raise ValueError(f"region grid must be positive, got {self.region_h}x{self.region_w}")

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else 2 * self.d

    @property
    def align_width(self) -> int:
        return self.d_align if self.d_align is not None else self.d

    @property
    def routed(self) -> bool:
        return self.variant == "full"

    def to_dict(self) -> dict[str, Any]:
        return {
            "d": self.d,
            "hidden": self.hidden,
            "d_align": self.d_align,
            "region_h": self.region_h,
            "region_w": self.region_w,
            "variant": self.variant,
        }


@dataclass
class CpaCoefficients:
    align: float = 0.1
    ent: float = 0.01
    bal: float = 0.01


def _shapes(config: CpaConfig) -> dict[str, tuple[int, ...]]:
    d, h, da = config.d, config.hidden_width, config.align_width
    if not config.routed:
        return {"single.w": (d, d), "single.b": (d,), "align.w": (d, da)}
    return {
        "est.w1": (5 * d, h),
        "est.b1": (h,),
        "est.w2": (h, 3),
        "est.b2": (3,),
        "sparse.query": (d,),
        "sparse.wq": (d, d),
        "sparse.wk": (d, d),
        "sparse.wv": (d, d),
        "medium.wq": (d, d),
        "medium.wk": (d, d),
        "medium.wv": (d, d),
        "medium.wo": (d, d),
        "dense.wq": (d, d),
        "dense.wk": (d, d),
        "dense.wv": (d, d),
        "dense.wo": (d, d),
        "gate.w": (3 * d + 3, 3),
        "gate.b": (3,),
        "align.w": (d, da),
    }


@dataclass
class CpaParams:
    config: CpaConfig
    tensors: dict[str, Node] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: CpaConfig, rng: np.random.Generator, neutral_routing: bool = True) -> CpaParams:
        tensors: dict[str, Node] = {}
        for name, shape in _shapes(config).items():
            if neutral_routing and name in ZERO_INIT_BLOCKS:
                value = np.zeros(shape)
            elif name.endswith(".b1") or name.endswith(".b2") or name in ("gate.b", "single.b"):
                value = np.zeros(shape)
            else:
                fan_in = shape[0]
                value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
            tensors[PREFIX + name] = nx.parameter(value)
        params = cls(config, tensors)
        logger.info("variant=%s params=%d d=%d hidden=%d d_align=%d", config.variant, params.parameter_count(),
                    config.d, config.hidden_width, config.align_width)
        return params

    @classmethod
    def from_arrays(cls, config: CpaConfig, arrays: dict[str, np.ndarray]) -> CpaParams:
        tensors: dict[str, Node] = {}
        for name, shape in _shapes(config).items():
            key = PREFIX + name
            if key not in arrays:
                raise ValueError(f"missing CPA tensor: {key}")
            if tuple(arrays[key].shape) != shape:
                raise ValueError(f"CPA tensor {key} has shape {arrays[key].shape}, expected {shape}")
            tensors[key] = nx.parameter(arrays[key])
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Node:
        return self.tensors[PREFIX + name]

    def named(self) -> dict[str, Node]:
        return dict(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self.tensors.items()}

    def parameter_count(self) -> int:
        return int(sum(node.value.size for node in self.tensors.values()))

    @property
    def routed(self) -> bool:
        return self.config.routed

    def zero_routing(self) -> None:
        if not self.routed:
            return
        for name in ZERO_INIT_BLOCKS:
            self[name].value[...] = 0.0


def _check_width(v: TokenGrid, params: CpaParams) -> None:
    if v.d != params.config.d:
        raise ValueError(f"token channels {v.d} do not match cpa.d={params.config.d}")


# --- estimator -----------------------------------------------------------


def complexity_features(v: TokenGrid, t: TextSummary) -> Node:
    if t.tokens.shape[1] != v.d:
        raise ValueError(f"text channels {t.tokens.shape[1]} do not match token channels {v.d}")
    return nx.concatenate(
        [
            nx.mean_(v.tokens, axis=0),
            nx.std_(v.tokens, axis=0),
            nx.max_(v.tokens, axis=0),
            nx.mean_(t.tokens, axis=0),
            nx.std_(t.tokens, axis=0),
        ]
    )


def estimate_complexity(v: TokenGrid, t: TextSummary, params: CpaParams) -> ComplexityProfile:
    _check_width(v, params)
    hidden = nx.relu(nx.linear(complexity_features(v, t), params["est.w1"], params["est.b1"]))
    logits = nx.linear(hidden, params["est.w2"], params["est.b2"])
    return ComplexityProfile(nx.softmax(logits, axis=0))


# --- pathways ------------------------------------------------------------


def _attend(q: Node, k: Node, v: Node) -> tuple[Node, Node]:
    """Single-head scaled dot-product attention; rows of q attend over rows of k."""
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    weights = nx.softmax(scores, axis=1)
    return nx.matmul(weights, v), weights


def sparse_attention(v: TokenGrid, params: CpaParams) -> tuple[Node, Node]:
    _check_width(v, params)
    d = v.d
    query = nx.reshape(nx.linear(params["sparse.query"], params["sparse.wq"]), (1, d))
    keys = nx.matmul(v.tokens, params["sparse.wk"])
    values = nx.matmul(v.tokens, params["sparse.wv"])
    out, weights = _attend(query, keys, values)
    return nx.reshape(out, (d,)), nx.reshape(weights, (v.tokens.shape[0],))


def sparse_pathway(v: TokenGrid, params: CpaParams) -> Node:
    return sparse_attention(v, params)[0]


def _bands(extent: int, count: int) -> list[tuple[int, int]]:
    size = extent // count
    if size < 1:
        raise ValueError(f"cannot split extent {extent} into {count} non-empty regions")
    edges = [i * size for i in range(count)] + [extent]
    return list(zip(edges[:-1], edges[1:]))


def region_pooling_matrix(grid_h: int, grid_w: int, region_h: int, region_w: int) -> np.ndarray:
    """Mean-pooling operator of shape (region_h*region_w, grid_h*grid_w).

    Regions tile the grid row-major; when an extent is not divisible the last
    band absorbs the remainder.
    """
    rows = _bands(grid_h, region_h)
    cols = _bands(grid_w, region_w)
    pool = np.zeros((region_h * region_w, grid_h * grid_w))
    for ri, (r0, r1) in enumerate(rows):
        for ci, (c0, c1) in enumerate(cols):
            members = [r * grid_w + c for r in range(r0, r1) for c in range(c0, c1)]
            pool[ri * region_w + ci, members] = 1.0 / len(members)
    return pool


def region_tokens(v: TokenGrid, params: CpaParams) -> Node:
    cfg = params.config
    pool = region_pooling_matrix(v.grid_h, v.grid_w, cfg.region_h, cfg.region_w)
    return nx.matmul(nx.constant(pool), v.tokens)


def medium_pathway(v: TokenGrid, params: CpaParams) -> Node:
    _check_width(v, params)
    regions = region_tokens(v, params)
    updated, _ = _attend(
        nx.matmul(regions, params["medium.wq"]),
        nx.matmul(regions, params["medium.wk"]),
        nx.matmul(regions, params["medium.wv"]),
    )
    return nx.linear(nx.mean_(updated, axis=0), params["medium.wo"])


def dense_attention(v: TokenGrid, params: CpaParams) -> tuple[Node, Node]:
    _check_width(v, params)
    updated, weights = _attend(
        nx.matmul(v.tokens, params["dense.wq"]),
        nx.matmul(v.tokens, params["dense.wk"]),
        nx.matmul(v.tokens, params["dense.wv"]),
    )
    return nx.linear(nx.mean_(updated, axis=0), params["dense.wo"]), weights


def dense_pathway(v: TokenGrid, params: CpaParams) -> Node:
    return dense_attention(v, params)[0]


def single_pathway(v: TokenGrid, params: CpaParams) -> Node:
    _check_width(v, params)
    if params.routed:
        raise ValueError("single_pathway needs the single_path variant")
    return nx.linear(nx.mean_(v.tokens, axis=0), params["single.w"], params["single.b"])


# --- fusion and losses ---------------------------------------------------


def fuse(v_s: Node, v_m: Node, v_d: Node, c: ComplexityProfile, params: CpaParams) -> FusionResult:
    d = params.config.d
    for name, part in (("v_s", v_s), ("v_m", v_m), ("v_d", v_d)):
        if part.shape != (d,):
            raise ValueError(f"{name} has shape {part.shape}, expected ({d},)")
    gate_input = nx.concatenate([v_s, v_m, v_d, c.c])
    w = nx.softmax(nx.linear(gate_input, params["gate.w"], params["gate.b"]), axis=0)
    stacked = nx.concatenate([nx.reshape(p, (1, d)) for p in (v_s, v_m, v_d)], axis=0)
    v_fused = nx.reshape(nx.matmul(nx.reshape(w, (1, 3)), stacked), (d,))
    return FusionResult(v_s=v_s, v_m=v_m, v_d=v_d, w=w, v_fused=v_fused, c=c)


def align_loss(v_fused: Node, t: TextSummary, params: CpaParams) -> Node:
    projected_visual = nx.linear(v_fused, params["align.w"])
    projected_text = nx.linear(nx.mean_(t.tokens, axis=0), params["align.w"])
    diff = projected_visual - projected_text
    return nx.sum_(diff * diff)


def entropy_reg(w: Node) -> Node:
    return nx.entropy(w)


def routing_balance(ws: Sequence[Node]) -> Node:
    """Entropy of the batch-mean routing; the trainer maximises it."""
    if not ws:
        raise ValueError("routing_balance needs at least one routing vector")
    stacked = nx.concatenate([nx.reshape(w, (1, 3)) for w in ws], axis=0)
    return nx.entropy(nx.mean_(stacked, axis=0))


def cpa_forward(
    v: TokenGrid,
    t: TextSummary,
    params: CpaParams,
    coefficients: CpaCoefficients,
) -> tuple[FusionResult | SinglePathResult, Node]:
    result: FusionResult | SinglePathResult
    if params.routed:
        c = estimate_complexity(v, t, params)
        result = fuse(sparse_pathway(v, params), medium_pathway(v, params), dense_pathway(v, params), c, params)
    else:
        result = SinglePathResult(single_pathway(v, params))
    terms: list[Node] = []
    if coefficients.align:
        terms.append(nx.scale(align_loss(result.v_fused, t, params), coefficients.align))
    if coefficients.ent and isinstance(result, FusionResult):
        terms.append(nx.scale(entropy_reg(result.w), coefficients.ent))
    if not terms:
        return result, nx.constant(0.0)
    aux = terms[0]
    for term in terms[1:]:
        aux = aux + term
    return result, aux


# --- routing analysis ----------------------------------------------------


@dataclass
class RoutingRow:
    sample_id: str
    view: str
    object_count: int
    w: tuple[float, float, float]
    c: tuple[float, float, float]

    def as_csv_row(self) -> list[Any]:
        return [self.sample_id, self.view, self.object_count, *(repr(x) for x in self.w), *(repr(x) for x in self.c)]


@dataclass
class Correlation:
    r: float | None
    p: float | None

    @property
    def defined(self) -> bool:
        return self.r is not None

    def to_dict(self) -> dict[str, Any]:
        return {"r": self.r, "p": self.p, "defined": self.defined}


@dataclass
class RoutingTrace:
    rows: list[RoutingRow]
    pearson: dict[str, Correlation]
    spearman_c_d: Correlation

    def summary_by_view(self) -> dict[str, dict[str, Any]]:
        summary: dict[str, dict[str, Any]] = {}
        for view in sorted({row.view for row in self.rows}):
            members = [row for row in self.rows if row.view == view]
            w = np.mean([row.w for row in members], axis=0)
            c = np.mean([row.c for row in members], axis=0)
            summary[view] = {
                "samples": len(members),
                "mean_object_count": float(np.mean([row.object_count for row in members])),
                "mean_w": [float(x) for x in w],
                "mean_c": [float(x) for x in c],
            }
        return summary

    def to_dict(self) -> dict[str, Any]:
        return {
            "samples": len(self.rows),
            "pearson": {f"w_{p}": corr.to_dict() for p, corr in self.pearson.items()},
            "spearman_c_d": self.spearman_c_d.to_dict(),
            "by_view": self.summary_by_view(),
        }


def _correlate(x: np.ndarray, y: np.ndarray, method: Callable[..., Any]) -> Correlation:
    # Constant columns make the coefficient undefined.
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return Correlation(None, None)
    result = method(x, y)
    return Correlation(float(result[0]), float(result[1]))


EncodeFn = Callable[[Any], tuple[TokenGrid, TextSummary]]


def routing_trace(samples: Sequence[Any], params: CpaParams, encode_fn: EncodeFn) -> RoutingTrace:
    """Route every sample through the estimator and gate and correlate with object count.

    `encode_fn` maps a sample to the (TokenGrid, TextSummary) pair CPA sees
    during training; samples need `sample_id`, `view` and `boxes`.
    """
    if not params.routed:
        raise ValueError("the single_path variant has no routing to trace")
    if len(samples) < MIN_TRACE_SAMPLES:
        raise ValueError(f"routing_trace needs at least {MIN_TRACE_SAMPLES} samples, got {len(samples)}")
    rows: list[RoutingRow] = []
    for sample in samples:
        grid, text = encode_fn(sample)
        result, _ = cpa_forward(grid, text, params, CpaCoefficients(align=0.0, ent=0.0, bal=0.0))
        w = result.w.value
        c = result.c.c.value
        rows.append(
            RoutingRow(
                sample_id=sample.sample_id,
                view=sample.view,
                object_count=len(sample.boxes),
                w=(float(w[0]), float(w[1]), float(w[2])),
                c=(float(c[0]), float(c[1]), float(c[2])),
            )
        )

    counts = np.array([row.object_count for row in rows], dtype=np.float64)
    w_matrix = np.array([row.w for row in rows])
    c_d = np.array([row.c[2] for row in rows])
    pearson = {p: _correlate(w_matrix[:, i], counts, stats.pearsonr) for i, p in enumerate(PATHWAYS)}
    spearman = _correlate(c_d, counts, stats.spearmanr)
    for p, corr in pearson.items():
        if corr.defined:
            logger.info("pathway=%s pearson_r=%.4f p=%.3g", p, corr.r, corr.p)
        else:
            logger.warning("pathway=%s pearson=undefined reason=zero_variance", p)
    return RoutingTrace(rows=rows, pearson=pearson, spearman_c_d=spearman)


def write_routing_csv(trace: RoutingTrace, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROUTING_CSV_HEADER)
        for row in trace.rows:
            writer.writerow(row.as_csv_row())
