"""Layer-wise effectiveness diagnostics.

Three signals are computed per layer:

* Perplexity drop: corpus perplexity with the whole block bypassed minus the
  intact baseline. Perplexity is exp of the mean over sequences of each
  sequence's mean token NLL.
* Compactness drop: spectral compactness (exp of the Shannon entropy of the
  singular-value distribution) of each Q/K/V head's activation matrix,
  compared against the same activations pushed through a freshly initialized
  weight with matching moments. Trained projections concentrate their
  spectrum, so the relative drop versus the random baseline measures how much
  structure training put in.
* Top-k energy gain: fraction of squared singular-value mass in the leading k
  directions, trained minus random.

Per-projection values average over heads; per-layer values average over the
three projections. Corpus passages are grouped into length buckets so short
and long contexts are diagnosed separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._util import json_float, json_float_list, parallel_map
from .errors import (
    AllZeroSpectrum,
    EmptyBucket,
    EmptyCorpus,
    LengthMismatch,
    SchemaMismatch,
    ZeroVariance,
)
from .model import ModelCheckpoint, TokenCorpus, capture_hidden, forward_nll, project_activation

PROJECTIONS = ("Q", "K", "V")

DIAG_KIND = "lieq-diagnostics"
DIAG_SCHEMA_VERSION = 1

DEFAULT_BUCKET_RANGES = ((33, 128), (129, 512))
DEFAULT_PASSAGES_PER_BUCKET = 100
DEFAULT_RANK_TOL = 1e-10


@dataclass(frozen=True)
class BucketSpec:
    """Length buckets for corpus sampling: inclusive [lo, hi] token ranges."""

    ranges: tuple[tuple[int, int], ...] = DEFAULT_BUCKET_RANGES
    passages_per_bucket: int = DEFAULT_PASSAGES_PER_BUCKET

    def __post_init__(self) -> None:
        if not self.ranges:
            raise ValueError("need at least one bucket range")
        for lo, hi in self.ranges:
            if lo < 1 or hi < lo:
                raise ValueError(f"invalid bucket range [{lo}, {hi}]")
        spans = sorted(self.ranges)
        for (alo, ahi), (blo, bhi) in zip(spans, spans[1:]):
            if blo <= ahi:
                raise ValueError(
                    f"bucket ranges [{alo}, {ahi}] and [{blo}, {bhi}] overlap"
                )
        if self.passages_per_bucket < 1:
            raise ValueError("passages_per_bucket must be >= 1")


# --- perplexity --------------------------------------------------------------


@dataclass
class PerplexityResult:
    """Baseline perplexity and the ablation sweep over layers."""

    ppl_base: float
    ppl_without: list[float]
    ppl_drop: list[float]


def _mean_nll(model, sequences: Sequence[np.ndarray], skip=None, threads: int = 1) -> float:
    """Mean over sequences of per-sequence mean token NLL."""
    per_seq = parallel_map(
        lambda s: float(np.mean(forward_nll(model, s, skip))), sequences, threads
    )
    return float(np.mean(per_seq))


def perplexity(model, sequences: Sequence[np.ndarray], skip=None, threads: int = 1) -> float:
    """exp of the two-level mean NLL over the given sequences."""
    if len(sequences) == 0:
        raise EmptyCorpus("no sequences to score")
    return math.exp(_mean_nll(model, sequences, skip, threads))


def baseline_perplexity(model, corpus: TokenCorpus, threads: int = 1) -> float:
    """Corpus perplexity of the intact model."""
    return perplexity(model, corpus.sequences, None, threads)


def perplexity_drop(model, corpus: TokenCorpus, layer: int, threads: int = 1) -> float:
    """Perplexity increase when one block is bypassed, over the full corpus."""
    base = perplexity(model, corpus.sequences, None, threads)
    without = perplexity(model, corpus.sequences, {layer}, threads)
    return without - base


def perplexity_sweep(model, sequences: Sequence[np.ndarray], threads: int = 1) -> PerplexityResult:
    """Baseline plus one-layer-at-a-time ablation perplexities."""
    if len(sequences) == 0:
        raise EmptyCorpus("no sequences to score")
    base = perplexity(model, sequences, None, threads)
    without = parallel_map(
        lambda layer: perplexity(model, sequences, {layer}),
        range(model.arch.n_layers),
        threads,
    )
    return PerplexityResult(
        ppl_base=base,
        ppl_without=[float(p) for p in without],
        ppl_drop=[float(p - base) for p in without],
    )


# --- spectral ----------------------------------------------------------------


def singular_values(matrix: np.ndarray) -> np.ndarray:
    """Singular values of a 2-D activation matrix, descending, float64."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("singular_values needs a 2-D matrix")
    return np.linalg.svd(m, compute_uv=False)


def compactness(sigma: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """Effective spectral support: exp of the entropy of normalized sigma.

    Values at or below rank_tol * max(sigma) are treated as numerical zeros
    and dropped before normalizing. The result lies in [1, len(sigma)]; it
    equals 1 for a rank-one spectrum and the count for a flat one.
    """
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0 or not np.isfinite(s).all() or (s < 0).any():
        raise AllZeroSpectrum("spectrum must be non-empty, finite, non-negative")
    peak = s.max()
    if peak <= 0.0:
        raise AllZeroSpectrum("all singular values are zero")
    s = s[s > rank_tol * peak]
    p = s / s.sum()
    entropy = float(-(p * np.log(p)).sum())
    return math.exp(entropy)


def topk_energy(sigma: np.ndarray, k: int) -> float:
    """Fraction of squared spectral mass in the k largest singular values."""
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0 or not np.isfinite(s).all() or (s < 0).any():
        raise AllZeroSpectrum("spectrum must be non-empty, finite, non-negative")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = float((s * s).sum())
    if total <= 0.0:
        raise AllZeroSpectrum("all singular values are zero")
    top = np.sort(s)[::-1][: min(k, s.size)]
    return float((top * top).sum() / total)


def random_counterpart(weight: np.ndarray, seed) -> np.ndarray:
    """Fresh Gaussian weight with the same shape and standard deviation.

    seed may be an int, a SeedSequence, or a Generator; the draw is
    deterministic for a given seed and weight shape.
    """
    w = np.asarray(weight, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, float(w.std()), w.shape)


@dataclass
class SpectralRow:
    """Head-averaged spectral measurements for one (layer, projection)."""

    layer: int
    proj: str
    compact_trained: float
    compact_random: float
    compactness_drop: float  # (random - trained) / random
    energy_trained: float
    energy_random: float
    energy_gain: float  # trained - random
    k_used: int

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "proj": self.proj,
            "compact_trained": json_float(self.compact_trained),
            "compact_random": json_float(self.compact_random),
            "compactness_drop": json_float(self.compactness_drop),
            "energy_trained": json_float(self.energy_trained),
            "energy_random": json_float(self.energy_random),
            "energy_gain": json_float(self.energy_gain),
            "k_used": self.k_used,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SpectralRow":
        return cls(
            layer=int(obj["layer"]),
            proj=str(obj["proj"]),
            compact_trained=float(obj["compact_trained"]),
            compact_random=float(obj["compact_random"]),
            compactness_drop=float(obj["compactness_drop"]),
            energy_trained=float(obj["energy_trained"]),
            energy_random=float(obj["energy_random"]),
            energy_gain=float(obj["energy_gain"]),
            k_used=int(obj["k_used"]),
        )


@dataclass
class LayerSpectral:
    """Spectral rows for one layer plus their projection means."""

    layer: int
    rows: dict[str, SpectralRow]
    compactness_drop: float
    energy_gain: float


def default_k(passage_len: int, d_head: int) -> int:
    """Energy rank cutoff: min(8, passage length, head width)."""
    return max(1, min(8, passage_len, d_head))


def spectral_diagnose(
    model: ModelCheckpoint,
    passage: np.ndarray,
    layer: int,
    k: int | None = None,
    seed: int = 0,
) -> LayerSpectral:
    """Spectral compactness and energy diagnostics for one layer.

    The layer input is captured once from the intact model; each Q/K/V head
    slice projects it to a (T, d_head) activation whose spectrum is compared
    against a seed-derived random counterpart of the same weight slice.
    """
    arch = model.arch
    hidden = capture_hidden(model, passage, layer)
    T = hidden.values.shape[0]
    dh = arch.d_head
    k_used = k if k is not None else default_k(T, dh)
    k_used = max(1, min(k_used, T, dh))

    rows: dict[str, SpectralRow] = {}
    for p_idx, proj in enumerate(PROJECTIONS):
        w = model.tensors[f"layer.{layer}.W_{proj}"]
        ct, cr_, et, er = [], [], [], []
        for head in range(arch.n_heads):
            w_head = w[head * dh : (head + 1) * dh]
            z = project_activation(w_head, hidden)
            seed_seq = np.random.SeedSequence([seed, layer, p_idx, head])
            w_rand = random_counterpart(w_head, seed_seq)
            z_rand = hidden.values @ w_rand.T
            s_t = singular_values(z)
            s_r = singular_values(z_rand)
            ct.append(compactness(s_t))
            cr_.append(compactness(s_r))
            et.append(topk_energy(s_t, k_used))
            er.append(topk_energy(s_r, k_used))
        compact_t = float(np.mean(ct))
        compact_r = float(np.mean(cr_))
        drops = [(r - t) / r for t, r in zip(ct, cr_)]
        gains = [t - r for t, r in zip(et, er)]
        rows[proj] = SpectralRow(
            layer=layer,
            proj=proj,
            compact_trained=compact_t,
            compact_random=compact_r,
            compactness_drop=float(np.mean(drops)),
            energy_trained=float(np.mean(et)),
            energy_random=float(np.mean(er)),
            energy_gain=float(np.mean(gains)),
            k_used=k_used,
        )
    return LayerSpectral(
        layer=layer,
        rows=rows,
        compactness_drop=float(np.mean([rows[p].compactness_drop for p in PROJECTIONS])),
        energy_gain=float(np.mean([rows[p].energy_gain for p in PROJECTIONS])),
    )


# --- rank correlation ---------------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"paired vectors have shapes {x.shape} and {y.shape}")
    if x.size < 2:
        raise LengthMismatch("need at least two pairs for rank correlation")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    vx = float((dx * dx).sum())
    vy = float((dy * dy).sum())
    if vx == 0.0 or vy == 0.0:
        raise ZeroVariance("rank correlation undefined for a constant input")
    return float((dx * dy).sum() / math.sqrt(vx * vy))


# --- bucketed runner ----------------------------------------------------------


@dataclass
class BucketDiagnostics:
    """All diagnostics for one length bucket."""

    bucket: tuple[int, int]
    passage_count: int
    representative: int  # corpus index of the passage used for spectra
    k_used: int
    ppl_base: float
    ppl_without: list[float]
    ppl_drop: list[float]
    compactness_drop: list[float]
    energy_gain: list[float]
    rows: list[SpectralRow]
    spearman_ppl_compactness: float | None
    spearman_ppl_energy: float | None

    def to_json(self) -> dict:
        return {
            "bucket": list(self.bucket),
            "passage_count": self.passage_count,
            "representative": self.representative,
            "k_used": self.k_used,
            "ppl_base": json_float(self.ppl_base),
            "ppl_without": json_float_list(self.ppl_without),
            "ppl_drop": json_float_list(self.ppl_drop),
            "compactness_drop": json_float_list(self.compactness_drop),
            "energy_gain": json_float_list(self.energy_gain),
            "projections": [r.to_json() for r in self.rows],
            "spearman_ppl_compactness": json_float(self.spearman_ppl_compactness),
            "spearman_ppl_energy": json_float(self.spearman_ppl_energy),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "BucketDiagnostics":
        sc = obj["spearman_ppl_compactness"]
        se = obj["spearman_ppl_energy"]
        return cls(
            bucket=(int(obj["bucket"][0]), int(obj["bucket"][1])),
            passage_count=int(obj["passage_count"]),
            representative=int(obj["representative"]),
            k_used=int(obj["k_used"]),
            ppl_base=float(obj["ppl_base"]),
            ppl_without=[float(x) for x in obj["ppl_without"]],
            ppl_drop=[float(x) for x in obj["ppl_drop"]],
            compactness_drop=[float(x) for x in obj["compactness_drop"]],
            energy_gain=[float(x) for x in obj["energy_gain"]],
            rows=[SpectralRow.from_json(r) for r in obj["projections"]],
            spearman_ppl_compactness=None if sc is None else float(sc),
            spearman_ppl_energy=None if se is None else float(se),
        )


@dataclass
class DiagnosticsReport:
    """Bucketed diagnostics plus the provenance needed to reproduce them."""

    buckets: list[BucketDiagnostics]
    n_layers: int
    provenance: dict = field(default_factory=dict)

    def mean_triplet(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-layer metrics averaged across buckets (unweighted)."""
        ppl = np.mean([b.ppl_drop for b in self.buckets], axis=0)
        comp = np.mean([b.compactness_drop for b in self.buckets], axis=0)
        energy = np.mean([b.energy_gain for b in self.buckets], axis=0)
        return ppl, comp, energy

    def to_json(self) -> dict:
        return {
            "kind": DIAG_KIND,
            "schema_version": DIAG_SCHEMA_VERSION,
            "n_layers": self.n_layers,
            "provenance": self.provenance,
            "buckets": [b.to_json() for b in self.buckets],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DiagnosticsReport":
        if obj.get("kind") != DIAG_KIND:
            raise SchemaMismatch(f"expected kind {DIAG_KIND!r}, got {obj.get('kind')!r}")
        if int(obj.get("schema_version", -1)) != DIAG_SCHEMA_VERSION:
            raise SchemaMismatch(
                f"unsupported diagnostics schema_version {obj.get('schema_version')!r}"
            )
        return cls(
            buckets=[BucketDiagnostics.from_json(b) for b in obj["buckets"]],
            n_layers=int(obj["n_layers"]),
            provenance=dict(obj.get("provenance", {})),
        )


def _diagnose_bucket(
    model: ModelCheckpoint,
    corpus: TokenCorpus,
    bucket: tuple[int, int],
    bucket_index: int,
    passages_per_bucket: int,
    k: int | None,
    seed: int,
    threads: int,
) -> BucketDiagnostics:
    lo, hi = bucket
    eligible = [i for i, s in enumerate(corpus.sequences) if lo <= s.size <= hi]
    if not eligible:
        raise EmptyBucket(bucket)
    rng = np.random.default_rng(np.random.SeedSequence([seed, bucket_index]))
    take = min(passages_per_bucket, len(eligible))
    chosen = sorted(rng.choice(len(eligible), size=take, replace=False).tolist())
    indices = [eligible[j] for j in chosen]
    passages = [corpus.sequences[i] for i in indices]

    sweep = perplexity_sweep(model, passages, threads)

    representative = indices[0]
    rep = corpus.sequences[representative]
    spectra = parallel_map(
        lambda layer: spectral_diagnose(model, rep, layer, k=k, seed=seed),
        range(model.arch.n_layers),
        threads,
    )
    comp_drop = [s.compactness_drop for s in spectra]
    energy_gain = [s.energy_gain for s in spectra]
    rows = [s.rows[p] for s in spectra for p in PROJECTIONS]

    def _safe_spearman(a, b):
        try:
            return spearman(a, b)
        except ZeroVariance:
            return None

    return BucketDiagnostics(
        bucket=bucket,
        passage_count=take,
        representative=representative,
        k_used=spectra[0].rows["Q"].k_used if spectra else 0,
        ppl_base=sweep.ppl_base,
        ppl_without=sweep.ppl_without,
        ppl_drop=sweep.ppl_drop,
        compactness_drop=comp_drop,
        energy_gain=energy_gain,
        rows=rows,
        spearman_ppl_compactness=_safe_spearman(sweep.ppl_drop, comp_drop),
        spearman_ppl_energy=_safe_spearman(sweep.ppl_drop, energy_gain),
    )


def run_diagnostics(
    model: ModelCheckpoint,
    corpus: TokenCorpus,
    buckets: BucketSpec | None = None,
    k: int | None = None,
    seed: int = 0,
    threads: int = 1,
    model_checksum: str | None = None,
    corpus_checksum: str | None = None,
) -> DiagnosticsReport:
    """Full diagnostic pass: bucketed ablations plus spectral measurements.

    Passages are drawn without replacement from each length bucket with a
    seed-derived stream, so reruns with the same inputs are bit-identical.
    """
    spec = buckets if buckets is not None else BucketSpec()
    if len(corpus.sequences) == 0:
        raise EmptyCorpus("corpus holds no sequences")
    out = [
        _diagnose_bucket(
            model, corpus, tuple(rng), i, spec.passages_per_bucket, k, seed, threads
        )
        for i, rng in enumerate(spec.ranges)
    ]
    provenance = {
        "seed": seed,
        "k": k,
        "bucket_ranges": [list(r) for r in spec.ranges],
        "passages_per_bucket": spec.passages_per_bucket,
        "model_checksum": model_checksum,
        "corpus_checksum": corpus_checksum,
    }
    return DiagnosticsReport(
        buckets=out, n_layers=model.arch.n_layers, provenance=provenance
    )
