"""Estimator-style facade over the diagnose / allocate / quantize pipeline.

LieQuantizer follows the scikit-learn contract: constructor arguments are
stored verbatim, fit() learns everything derived from data into
trailing-underscore attributes and returns self, transform() produces the
quantized model, and get_params / set_params come from BaseEstimator so the
object clones and grid-searches like any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._util import resolve_threads
from .allocate import ScoreWeights, plan_layers
from .diagnostics import BucketSpec, run_diagnostics
from .errors import ArchMismatch
from .formats import checkpoint_checksum, corpus_checksum
from .harness import evaluate
from .model import ModelCheckpoint, TokenCorpus
from .quant import QuantModel, quantize_model


class LieQuantizer(BaseEstimator):
    """Layer-effectiveness-guided mixed-precision weight quantizer.

    Parameters
    ----------
    m : number of layers kept at the high bit width.
    b_hi, b_lo : bit widths for the selected and remaining layers.
    alpha, beta, gamma : score weights for perplexity drop, compactness
        drop, and top-k energy gain; must be non-negative and sum to one.
    k : energy rank cutoff; None derives it from passage length and head
        width.
    seed : seed for passage sampling and random counterparts.
    group_size : quantization group width along weight rows.
    bucket_ranges : inclusive passage-length buckets for diagnostics.
    passages_per_bucket : diagnostic sample size per bucket.
    threads : worker threads; None falls back to LIEQ_THREADS, then all
        cores.
    """

    def __init__(
        self,
        m: int = 1,
        b_hi: int = 4,
        b_lo: int = 2,
        alpha: float = 1.0 / 3.0,
        beta: float = 1.0 / 3.0,
        gamma: float = 1.0 / 3.0,
        k: int | None = None,
        seed: int = 0,
        group_size: int = 64,
        bucket_ranges: tuple = ((33, 128), (129, 512)),
        passages_per_bucket: int = 100,
        threads: int | None = 1,
    ) -> None:
        self.m = m
        self.b_hi = b_hi
        self.b_lo = b_lo
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.k = k
        self.seed = seed
        self.group_size = group_size
        self.bucket_ranges = bucket_ranges
        self.passages_per_bucket = passages_per_bucket
        self.threads = threads

    def fit(self, X: ModelCheckpoint, y: TokenCorpus) -> "LieQuantizer":
        """Run diagnostics on (checkpoint, corpus) and derive the bit plan."""
        weights = ScoreWeights(self.alpha, self.beta, self.gamma)
        spec = BucketSpec(
            ranges=tuple(tuple(r) for r in self.bucket_ranges),
            passages_per_bucket=self.passages_per_bucket,
        )
        threads = resolve_threads(self.threads)
        checksum = f"{checkpoint_checksum(X):08x}"
        self.diagnostics_ = run_diagnostics(
            X,
            y,
            buckets=spec,
            k=self.k,
            seed=self.seed,
            threads=threads,
            model_checksum=checksum,
            corpus_checksum=f"{corpus_checksum(y):08x}",
        )
        ppl, comp, energy = self.diagnostics_.mean_triplet()
        self.plan_ = plan_layers(
            ppl,
            comp,
            energy,
            weights=weights,
            m=self.m,
            b_hi=self.b_hi,
            b_lo=self.b_lo,
            model=X,
            model_checksum=checksum,
        )
        self.scores_ = np.asarray(self.plan_.scores, dtype=np.float64)
        self.model_checksum_ = checksum
        self.checkpoint_ = X
        return self

    def transform(self, X: ModelCheckpoint | None = None) -> QuantModel:
        """Quantize a checkpoint with the fitted plan (default: the fit one)."""
        check_is_fitted(self, "plan_")
        target = X if X is not None else self.checkpoint_
        if X is not None:
            checksum = f"{checkpoint_checksum(X):08x}"
            if checksum != self.model_checksum_:
                raise ArchMismatch(
                    f"plan was fitted on checkpoint {self.model_checksum_}, "
                    f"got {checksum}"
                )
        return quantize_model(target, self.plan_, self.group_size)

    def fit_transform(self, X: ModelCheckpoint, y: TokenCorpus) -> QuantModel:
        return self.fit(X, y).transform()

    def score(self, X: ModelCheckpoint, y: TokenCorpus) -> float:
        """Perplexity recovery (float / quantized) of the fitted plan on data."""
        check_is_fitted(self, "plan_")
        qmodel = self.transform(X)
        report = evaluate(
            X, qmodel, y, diagnostics=self.diagnostics_,
            threads=resolve_threads(self.threads),
        )
        return report.ppl_recovery
