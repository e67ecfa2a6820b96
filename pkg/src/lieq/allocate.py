"""Score fusion and mixed-precision bit allocation.

Per-layer diagnostics (perplexity drop, compactness drop, top-k energy gain)
are normalized to [0, 1] by their per-metric maxima, fused into a single
effectiveness score by a convex combination, and the top-m layers by score
get the high bit width while the rest get the low one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._util import json_float, json_float_list
from .errors import (
    DegenerateMetric,
    MOutOfRange,
    PlanLengthMismatch,
    SchemaMismatch,
    UnsupportedBitWidth,
    WeightSumInvalid,
)

SUPPORTED_PLAN_BITS = (2, 3, 4, 8, 16)

PLAN_KIND = "lieq-plan"
PLAN_SCHEMA_VERSION = 1

_WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ScoreWeights:
    """Convex-combination weights for the three diagnostics."""

    alpha: float  # perplexity drop
    beta: float  # compactness drop
    gamma: float  # top-k energy gain

    def __post_init__(self) -> None:
        w = (self.alpha, self.beta, self.gamma)
        if any(not np.isfinite(x) or x < 0.0 for x in w):
            raise WeightSumInvalid(f"weights must be finite and >= 0, got {w}")
        if abs(sum(w) - 1.0) > _WEIGHT_SUM_TOL:
            raise WeightSumInvalid(f"weights must sum to 1, got {w} (sum {sum(w)})")

    @classmethod
    def default(cls) -> "ScoreWeights":
        third = 1.0 / 3.0
        return cls(third, third, third)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScoreWeights":
        return cls(float(obj["alpha"]), float(obj["beta"]), float(obj["gamma"]))


def _as_weights(weights) -> ScoreWeights:
    if weights is None:
        return ScoreWeights.default()
    if isinstance(weights, ScoreWeights):
        return weights
    return ScoreWeights(*weights)


def normalize_metrics(
    ppl_drop: Sequence[float],
    compactness_drop: Sequence[float],
    energy_gain: Sequence[float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale each metric into [0, 1] across layers.

    Perplexity drop and energy gain are clamped at zero below (a layer whose
    removal helps carries no effectiveness signal); compactness drop enters
    by absolute value. Each column is divided by its maximum. A column that
    is identically zero after clamping has no usable signal.
    """
    ppl = np.maximum(np.asarray(ppl_drop, dtype=np.float64), 0.0)
    comp = np.abs(np.asarray(compactness_drop, dtype=np.float64))
    energy = np.maximum(np.asarray(energy_gain, dtype=np.float64), 0.0)
    if not (ppl.shape == comp.shape == energy.shape) or ppl.ndim != 1:
        raise PlanLengthMismatch(len(ppl), len(comp))
    for name, col in (
        ("ppl_drop", ppl),
        ("compactness_drop", comp),
        ("energy_gain", energy),
    ):
        if not np.isfinite(col).all():
            raise DegenerateMetric(name)
    out = []
    for name, col in (
        ("ppl_drop", ppl),
        ("compactness_drop", comp),
        ("energy_gain", energy),
    ):
        peak = col.max() if col.size else 0.0
        if peak <= 0.0:
            raise DegenerateMetric(name)
        out.append(col / peak)
    return out[0], out[1], out[2]


def effectiveness_score(
    ppl_norm: Sequence[float],
    compactness_norm: Sequence[float],
    energy_norm: Sequence[float],
    weights: ScoreWeights | tuple | None = None,
) -> np.ndarray:
    """Convex combination of the three normalized metrics, one score per layer."""
    w = _as_weights(weights)
    return (
        w.alpha * np.asarray(ppl_norm, dtype=np.float64)
        + w.beta * np.asarray(compactness_norm, dtype=np.float64)
        + w.gamma * np.asarray(energy_norm, dtype=np.float64)
    )


def select_topk(scores: Sequence[float], m: int) -> frozenset[int]:
    """Indices of the m highest scores; ties resolve to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= m <= n:
        raise MOutOfRange(m, n)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return frozenset(order[:m])


@dataclass
class BitPlan:
    """Per-layer bit widths plus the provenance needed to audit them."""

    bits: list[int]
    scores: list[float]
    m: int
    b_hi: int
    b_lo: int
    weights: ScoreWeights
    high_layers: frozenset[int] = field(default_factory=frozenset)
    model_checksum: str | None = None
    cr: float | None = None
    avg_bits: float | None = None

    def __post_init__(self) -> None:
        self.bits = [int(b) for b in self.bits]
        for b in self.bits:
            if b not in SUPPORTED_PLAN_BITS:
                raise UnsupportedBitWidth(
                    f"bit width {b} not in {SUPPORTED_PLAN_BITS}"
                )
        if len(self.scores) != len(self.bits):
            raise PlanLengthMismatch(len(self.scores), len(self.bits))

    @property
    def n_layers(self) -> int:
        return len(self.bits)

    @property
    def low_layers(self) -> frozenset[int]:
        return frozenset(range(self.n_layers)) - self.high_layers

    def to_json(self) -> dict:
        return {
            "kind": PLAN_KIND,
            "schema_version": PLAN_SCHEMA_VERSION,
            "model_checksum": self.model_checksum,
            "weights": self.weights.to_json(),
            "m": self.m,
            "b_hi": self.b_hi,
            "b_lo": self.b_lo,
            "layers": [
                {"index": i, "score": json_float(s), "bits": b}
                for i, (s, b) in enumerate(zip(self.scores, self.bits))
            ],
            "cr": json_float(self.cr),
            "avg_bits": json_float(self.avg_bits),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "BitPlan":
        if obj.get("kind") != PLAN_KIND:
            raise SchemaMismatch(
                f"expected kind {PLAN_KIND!r}, got {obj.get('kind')!r}"
            )
        if int(obj.get("schema_version", -1)) != PLAN_SCHEMA_VERSION:
            raise SchemaMismatch(
                f"unsupported plan schema_version {obj.get('schema_version')!r}"
            )
        layers = sorted(obj["layers"], key=lambda e: int(e["index"]))
        if [int(e["index"]) for e in layers] != list(range(len(layers))):
            raise SchemaMismatch("plan layer indices are not 0..L-1")
        bits = [int(e["bits"]) for e in layers]
        scores = [float(e["score"]) for e in layers]
        b_hi = int(obj["b_hi"])
        high = frozenset(i for i, b in enumerate(bits) if b == b_hi)
        cr = obj.get("cr")
        avg = obj.get("avg_bits")
        return cls(
            bits=bits,
            scores=scores,
            m=int(obj["m"]),
            b_hi=b_hi,
            b_lo=int(obj["b_lo"]),
            weights=ScoreWeights.from_json(obj["weights"]),
            high_layers=high,
            model_checksum=obj.get("model_checksum"),
            cr=None if cr is None else float(cr),
            avg_bits=None if avg is None else float(avg),
        )


def assign_bits(
    scores: Sequence[float],
    m: int,
    b_hi: int = 4,
    b_lo: int = 2,
    weights: ScoreWeights | tuple | None = None,
    model_checksum: str | None = None,
) -> BitPlan:
    """Give the top-m layers b_hi bits and every other layer b_lo bits."""
    if b_hi not in SUPPORTED_PLAN_BITS or b_lo not in SUPPORTED_PLAN_BITS:
        raise UnsupportedBitWidth(
            f"bit widths must be in {SUPPORTED_PLAN_BITS}, got {b_hi}/{b_lo}"
        )
    if b_hi <= b_lo:
        raise UnsupportedBitWidth(f"b_hi must exceed b_lo, got {b_hi} <= {b_lo}")
    scores = np.asarray(scores, dtype=np.float64)
    high = select_topk(scores, m)
    bits = [b_hi if i in high else b_lo for i in range(scores.shape[0])]
    return BitPlan(
        bits=bits,
        scores=[float(s) for s in scores],
        m=m,
        b_hi=b_hi,
        b_lo=b_lo,
        weights=_as_weights(weights),
        high_layers=high,
        model_checksum=model_checksum,
    )


@dataclass
class CompressionReport:
    """Size accounting for a plan applied to a concrete model."""

    cr: float  # quantized-layer bits over 16-bit baseline, weight-averaged
    avg_bits: float  # 16 * cr
    layer_params: list[int]  # quantizable parameters per layer
    quantizable_params: int
    total_params: int  # includes embeddings, norms, output head
    whole_model_cr: float  # as cr but counting excluded tensors at 16 bits
    packed_weight_bytes: int  # payload bytes for packed codes alone
    fp16_layer_bytes: int  # 16-bit baseline bytes for the same tensors

    def to_json(self) -> dict:
        return {
            "cr": self.cr,
            "avg_bits": self.avg_bits,
            "layer_params": list(self.layer_params),
            "quantizable_params": self.quantizable_params,
            "total_params": self.total_params,
            "whole_model_cr": self.whole_model_cr,
            "packed_weight_bytes": self.packed_weight_bytes,
            "fp16_layer_bytes": self.fp16_layer_bytes,
        }


def compression_ratio(plan: BitPlan, model) -> CompressionReport:
    """Weight-averaged compression of the per-layer linear weights.

    The ratio covers the seven quantizable matrices per layer against a
    16-bit baseline; embeddings, norms, and the output head are excluded
    from it but folded into whole_model_cr at 16 bits for context.
    """
    arch = model.arch
    if plan.n_layers != arch.n_layers:
        raise PlanLengthMismatch(plan.n_layers, arch.n_layers)
    layer_params = [model.layer_param_count(i) for i in range(arch.n_layers)]
    quant_total = sum(layer_params)
    weighted_bits = sum(b * n for b, n in zip(plan.bits, layer_params))
    cr = weighted_bits / (16.0 * quant_total)
    total_params = sum(t.size for t in model.tensors.values())
    excluded = total_params - quant_total
    whole = (weighted_bits + 16.0 * excluded) / (16.0 * total_params)
    packed_bytes = sum(
        (b * n + 7) // 8 for b, n in zip(plan.bits, layer_params)
    )
    return CompressionReport(
        cr=cr,
        avg_bits=16.0 * cr,
        layer_params=layer_params,
        quantizable_params=quant_total,
        total_params=total_params,
        whole_model_cr=whole,
        packed_weight_bytes=packed_bytes,
        fp16_layer_bytes=2 * quant_total,
    )


def plan_layers(
    ppl_drop: Sequence[float],
    compactness_drop: Sequence[float],
    energy_gain: Sequence[float],
    weights: ScoreWeights | tuple | None = None,
    m: int = 1,
    b_hi: int = 4,
    b_lo: int = 2,
    model=None,
    model_checksum: str | None = None,
) -> BitPlan:
    """Full allocation pipeline: normalize, fuse, pick top-m, assign bits.

    When the model is supplied the plan also carries its exact compression
    ratio and average bit width.
    """
    w = _as_weights(weights)
    ppl_n, comp_n, energy_n = normalize_metrics(
        ppl_drop, compactness_drop, energy_gain
    )
    scores = effectiveness_score(ppl_n, comp_n, energy_n, w)
    plan = assign_bits(
        scores, m, b_hi=b_hi, b_lo=b_lo, weights=w, model_checksum=model_checksum
    )
    if model is not None:
        report = compression_ratio(plan, model)
        plan.cr = report.cr
        plan.avg_bits = report.avg_bits
    return plan
