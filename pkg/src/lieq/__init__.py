"""lieq: layer-effectiveness diagnostics and mixed-precision quantization.

The pipeline has four stages, each usable on its own:

1. diagnose: measure per-layer effectiveness (perplexity drop under block
   ablation, spectral compactness drop, top-k energy gain) on a bucketed
   corpus sample.
2. allocate: fuse the metrics into scores and assign per-layer bit widths.
3. quantize: pack weights with uniform-within-layer group quantization.
4. evaluate: score the quantized model against its float source.

LieQuantizer wraps stages 1-3 behind the scikit-learn fit/transform
contract.
"""

from . import errors
from .allocate import (
    BitPlan,
    CompressionReport,
    ScoreWeights,
    assign_bits,
    compression_ratio,
    effectiveness_score,
    normalize_metrics,
    plan_layers,
    select_topk,
)
from .diagnostics import (
    BucketDiagnostics,
    BucketSpec,
    DiagnosticsReport,
    LayerSpectral,
    PerplexityResult,
    SpectralRow,
    baseline_perplexity,
    compactness,
    default_k,
    perplexity,
    perplexity_drop,
    perplexity_sweep,
    random_counterpart,
    run_diagnostics,
    singular_values,
    spearman,
    spectral_diagnose,
    topk_energy,
)
from .estimator import LieQuantizer
from .fixtures import FixtureSpec, make_fixture
from .formats import (
    checkpoint_checksum,
    corpus_checksum,
    load_checkpoint,
    load_corpus,
    load_qmodel,
    save_checkpoint,
    save_corpus,
    save_qmodel,
)
from .harness import EvalReport, SweepResult, emit_report, evaluate, sweep_m
from .model import (
    ArchConfig,
    HiddenMatrix,
    ModelCheckpoint,
    TokenCorpus,
    capture_hidden,
    expected_shapes,
    forward_nll,
    project_activation,
)
from .quant import (
    QuantGroup,
    QuantModel,
    QuantTensor,
    dequantize_group,
    dequantize_model,
    pack_codes,
    qforward_nll,
    quantize_group,
    quantize_model,
    unpack_codes,
)

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "BitPlan",
    "BucketDiagnostics",
    "BucketSpec",
    "CompressionReport",
    "DiagnosticsReport",
    "EvalReport",
    "FixtureSpec",
    "HiddenMatrix",
    "LayerSpectral",
    "LieQuantizer",
    "ModelCheckpoint",
    "PerplexityResult",
    "QuantGroup",
    "QuantModel",
    "QuantTensor",
    "ScoreWeights",
    "SpectralRow",
    "SweepResult",
    "TokenCorpus",
    "assign_bits",
    "baseline_perplexity",
    "capture_hidden",
    "checkpoint_checksum",
    "compactness",
    "default_k",
    "compression_ratio",
    "corpus_checksum",
    "dequantize_group",
    "dequantize_model",
    "effectiveness_score",
    "emit_report",
    "errors",
    "evaluate",
    "expected_shapes",
    "forward_nll",
    "load_checkpoint",
    "load_corpus",
    "load_qmodel",
    "make_fixture",
    "normalize_metrics",
    "pack_codes",
    "perplexity",
    "perplexity_drop",
    "perplexity_sweep",
    "plan_layers",
    "project_activation",
    "qforward_nll",
    "quantize_group",
    "quantize_model",
    "random_counterpart",
    "run_diagnostics",
    "save_checkpoint",
    "save_corpus",
    "save_qmodel",
    "select_topk",
    "singular_values",
    "spearman",
    "spectral_diagnose",
    "sweep_m",
    "topk_energy",
    "unpack_codes",
]
