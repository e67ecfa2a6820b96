"""Evaluation harness: quantized-vs-float scoring, bit-budget sweeps, reports.

Report emission is canonical: JSON uses sorted keys and fixed separators, CSV
a fixed header, and volatile fields (wall-clock runtime) stay out of the
serialized bytes so identical inputs produce identical files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

from ._util import canonical_json, json_float
from .allocate import BitPlan, CompressionReport, ScoreWeights, compression_ratio, plan_layers
from .diagnostics import BucketSpec, DiagnosticsReport, baseline_perplexity, perplexity, run_diagnostics
from .errors import ArchMismatch, IoError, MOutOfRange, UnsupportedFormat
from .formats import checkpoint_checksum
from .model import ModelCheckpoint, TokenCorpus
from .quant import QuantModel, quantize_model


@dataclass
class EvalReport:
    """Quantized-model quality against the float baseline on one corpus."""

    ppl_fp: float
    ppl_quant: float
    ppl_recovery: float  # ppl_fp / ppl_quant; 1.0 means no degradation
    cr: float
    avg_bits: float
    layer_bits: list[int]
    m: int
    b_hi: int
    b_lo: int
    group_size: int
    n_sequences: int
    spearman_ppl_compactness: float | None = None
    spearman_ppl_energy: float | None = None
    model_checksum: str | None = None
    runtime_seconds: float = 0.0  # informational; excluded from canonical bytes
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": "lieq-eval",
            "schema_version": 1,
            "ppl_fp": json_float(self.ppl_fp),
            "ppl_quant": json_float(self.ppl_quant),
            "ppl_recovery": json_float(self.ppl_recovery),
            "cr": json_float(self.cr),
            "avg_bits": json_float(self.avg_bits),
            "layer_bits": list(self.layer_bits),
            "m": self.m,
            "b_hi": self.b_hi,
            "b_lo": self.b_lo,
            "group_size": self.group_size,
            "n_sequences": self.n_sequences,
            "spearman_ppl_compactness": json_float(self.spearman_ppl_compactness),
            "spearman_ppl_energy": json_float(self.spearman_ppl_energy),
            "model_checksum": self.model_checksum,
            "config": self.config,
        }

    def to_canonical_json(self) -> str:
        return canonical_json(self.to_json())

    def to_csv(self) -> str:
        """Flat two-column key,value rendering of the scalar fields."""
        obj = self.to_json()
        lines = ["key,value"]
        for key in sorted(obj):
            val = obj[key]
            if isinstance(val, (dict, list)):
                val = "" if not val else ";".join(str(v) for v in (val if isinstance(val, list) else sorted(val.items())))
            lines.append(f"{key},{val}")
        return "\n".join(lines) + "\n"


def evaluate(
    model: ModelCheckpoint,
    qmodel: QuantModel,
    corpus: TokenCorpus,
    diagnostics: DiagnosticsReport | None = None,
    threads: int = 1,
    config: dict | None = None,
) -> EvalReport:
    """Score a quantized model against its float source on a corpus.

    The quantized model must match the checkpoint's architecture, and when
    its plan records a source checksum that checksum must match too.
    """
    t0 = time.perf_counter()
    if qmodel.arch != model.arch:
        raise ArchMismatch(
            f"architectures differ: {qmodel.arch} vs {model.arch}"
        )
    if qmodel.plan.model_checksum is not None:
        actual = f"{checkpoint_checksum(model):08x}"
        if qmodel.plan.model_checksum != actual:
            raise ArchMismatch(
                f"plan was built for checkpoint {qmodel.plan.model_checksum}, "
                f"got {actual}"
            )
    ppl_fp = baseline_perplexity(model, corpus, threads)
    ppl_quant = perplexity(qmodel, corpus.sequences, None, threads)
    comp = compression_ratio(qmodel.plan, model)

    sp_c = sp_e = None
    if diagnostics is not None and diagnostics.buckets:
        cs = [b.spearman_ppl_compactness for b in diagnostics.buckets if b.spearman_ppl_compactness is not None]
        es = [b.spearman_ppl_energy for b in diagnostics.buckets if b.spearman_ppl_energy is not None]
        sp_c = sum(cs) / len(cs) if cs else None
        sp_e = sum(es) / len(es) if es else None

    return EvalReport(
        ppl_fp=ppl_fp,
        ppl_quant=ppl_quant,
        ppl_recovery=ppl_fp / ppl_quant,
        cr=comp.cr,
        avg_bits=comp.avg_bits,
        layer_bits=qmodel.layer_bits(),
        m=qmodel.plan.m,
        b_hi=qmodel.plan.b_hi,
        b_lo=qmodel.plan.b_lo,
        group_size=qmodel.group_size,
        n_sequences=len(corpus.sequences),
        spearman_ppl_compactness=sp_c,
        spearman_ppl_energy=sp_e,
        model_checksum=f"{checkpoint_checksum(model):08x}",
        runtime_seconds=time.perf_counter() - t0,
        config=dict(config or {}),
    )


@dataclass
class SweepResult:
    """Perplexity and bit budget as the high-precision layer count varies."""

    points: list[tuple[int, float, float]]  # (m, avg_bits, ppl_quant)
    b_hi: int
    b_lo: int
    ppl_fp: float

    def __post_init__(self) -> None:
        ms = [p[0] for p in self.points]
        if ms != sorted(ms) or len(set(ms)) != len(ms):
            raise ValueError("sweep points must have strictly increasing m")

    def to_json(self) -> dict:
        return {
            "kind": "lieq-sweep",
            "schema_version": 1,
            "b_hi": self.b_hi,
            "b_lo": self.b_lo,
            "ppl_fp": json_float(self.ppl_fp),
            "points": [
                {"m": m, "avg_bits": json_float(a), "ppl_quant": json_float(p)}
                for m, a, p in self.points
            ],
        }

    def to_canonical_json(self) -> str:
        return canonical_json(self.to_json())

    def to_csv(self) -> str:
        lines = ["m,avg_bits,ppl_quant"]
        for m, avg_bits, ppl in self.points:
            lines.append(f"{m},{avg_bits!r},{ppl!r}")
        return "\n".join(lines) + "\n"


def sweep_m(
    model: ModelCheckpoint,
    corpus: TokenCorpus,
    m_values: Sequence[int],
    weights: ScoreWeights | tuple | None = None,
    b_hi: int = 4,
    b_lo: int = 2,
    buckets: BucketSpec | None = None,
    k: int | None = None,
    seed: int = 0,
    group_size: int = 64,
    threads: int = 1,
    diagnostics: DiagnosticsReport | None = None,
) -> SweepResult:
    """Evaluate one bit plan per m, sharing a single diagnostic pass.

    Every m must lie in [0, n_layers]. Perplexities are computed over the
    full corpus with the fused quantized forward.
    """
    n_layers = model.arch.n_layers
    m_values = sorted(set(int(m) for m in m_values))
    for m in m_values:
        if not 0 <= m <= n_layers:
            raise MOutOfRange(m, n_layers)
    if diagnostics is None:
        diagnostics = run_diagnostics(
            model, corpus, buckets=buckets, k=k, seed=seed, threads=threads,
            model_checksum=f"{checkpoint_checksum(model):08x}",
        )
    ppl, comp, energy = diagnostics.mean_triplet()
    ppl_fp = baseline_perplexity(model, corpus, threads)

    points = []
    for m in m_values:
        plan = plan_layers(
            ppl, comp, energy, weights=weights, m=m, b_hi=b_hi, b_lo=b_lo,
            model=model,
        )
        qmodel = quantize_model(model, plan, group_size)
        ppl_q = perplexity(qmodel, corpus.sequences, None, threads)
        points.append((m, float(plan.avg_bits), float(ppl_q)))
    return SweepResult(points=points, b_hi=b_hi, b_lo=b_lo, ppl_fp=ppl_fp)


def emit_report(report, path: str, fmt: str = "json") -> None:
    """Write a report in canonical form; identical input, identical bytes."""
    if fmt == "json":
        if not hasattr(report, "to_canonical_json"):
            raise UnsupportedFormat(f"{type(report).__name__} has no JSON form")
        text = report.to_canonical_json()
    elif fmt == "csv":
        if not hasattr(report, "to_csv"):
            raise UnsupportedFormat(f"{type(report).__name__} has no CSV form")
        text = report.to_csv()
    else:
        raise UnsupportedFormat(f"unknown report format {fmt!r} (use json or csv)")
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise IoError(f"cannot write report {path}: {e}") from e
