"""Command-line interface.

Every command accepts --config FILE with flat key=value lines (# comments
allowed); explicit flags take precedence over config values, which take
precedence over built-in defaults.

Exit codes: 0 success, 2 invalid input or validation failure, 3 degenerate
diagnostics (a metric with no usable signal), 1 internal error.
"""

from __future__ import annotations

import functools
import json
import sys

import click

from ._util import canonical_json, resolve_threads
from .allocate import BitPlan, ScoreWeights, compression_ratio, plan_layers
from .diagnostics import (
    DEFAULT_BUCKET_RANGES,
    DEFAULT_PASSAGES_PER_BUCKET,
    BucketSpec,
    DiagnosticsReport,
    run_diagnostics,
)
from .errors import DegenerateMetric, IoError, LieqError
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
from .harness import emit_report, evaluate, sweep_m
from .quant import quantize_model

EXIT_INVALID_INPUT = 2
EXIT_DEGENERATE = 3


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map exception classes onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DegenerateMetric as e:
            _fail(str(e), EXIT_DEGENERATE)
        except (LieqError, OSError, ValueError) as e:
            _fail(str(e), EXIT_INVALID_INPUT)

    return wrapper


def _load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    cfg: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise LieqError(
                        f"{path}:{lineno}: expected key=value, got {line!r}"
                    )
                key, value = line.split("=", 1)
                cfg[key.strip()] = value.strip()
    except OSError as e:
        raise IoError(f"cannot read config {path}: {e}") from e
    return cfg


def _pick(flag, cfg: dict, key: str, default=None, cast=str):
    """Flag value, else config value, else default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cast(cfg[key])
    return default


def _parse_ranges(text: str) -> tuple[tuple[int, int], ...]:
    """Parse bucket ranges like '33-128,129-512'."""
    out = []
    for part in text.split(","):
        part = part.strip()
        lo, sep, hi = part.partition("-")
        if not sep:
            raise ValueError(f"bad bucket range {part!r}, expected LO-HI")
        out.append((int(lo), int(hi)))
    return tuple(out)


def _parse_weights(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"weights need three comma-separated values, got {text!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _parse_m_range(text: str) -> list[int]:
    """Parse 'A..B' (inclusive) or a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty m range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _required(value, name: str):
    if value is None:
        raise LieqError(f"missing required option --{name} (or config key {name})")
    return value


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise LieqError(f"{what} {path} is not valid JSON: {e}") from e


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


@click.group()
def main() -> None:
    """Layer-effectiveness diagnostics and mixed-precision quantization."""


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="key=value config file")
@click.option("--layers", type=int, default=None)
@click.option("--dim", type=int, default=None)
@click.option("--heads", type=int, default=None)
@click.option("--d-ff", type=int, default=None)
@click.option("--vocab", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--hot-layer", type=int, default=None)
@click.option("--hot-gain", type=float, default=None)
@click.option("--sequences-per-bucket", type=int, default=None)
@click.option("--max-passage-len", type=int, default=None)
@click.option("--buckets", type=str, default=None, help="e.g. 33-128,129-512")
@click.option("--out-model", type=str, default=None)
@click.option("--out-corpus", type=str, default=None)
@_guard
def fixture(config_path, layers, dim, heads, d_ff, vocab, seed, hot_layer,
            hot_gain, sequences_per_bucket, max_passage_len, buckets,
            out_model, out_corpus):
    """Generate a synthetic checkpoint and matching sampled corpus."""
    cfg = _load_config(config_path)
    ranges_text = _pick(buckets, cfg, "buckets", None)
    spec = FixtureSpec(
        n_layers=_pick(layers, cfg, "layers", 4, int),
        d_model=_pick(dim, cfg, "dim", 64, int),
        n_heads=_pick(heads, cfg, "heads", 4, int),
        d_ff=_pick(d_ff, cfg, "d_ff", 128, int),
        vocab_size=_pick(vocab, cfg, "vocab", 97, int),
        seed=_pick(seed, cfg, "seed", 0, int),
        hot_layer=_pick(hot_layer, cfg, "hot_layer", 2, int),
        hot_gain=_pick(hot_gain, cfg, "hot_gain", 10.0, float),
        sequences_per_bucket=_pick(sequences_per_bucket, cfg, "sequences_per_bucket", 8, int),
        max_passage_len=_pick(max_passage_len, cfg, "max_passage_len", 192, int),
        **(
            {"bucket_ranges": _parse_ranges(ranges_text)}
            if ranges_text is not None
            else {}
        ),
    )
    out_model = _required(_pick(out_model, cfg, "out_model"), "out-model")
    out_corpus = _required(_pick(out_corpus, cfg, "out_corpus"), "out-corpus")
    model, corpus = make_fixture(spec)
    save_checkpoint(model, out_model)
    save_corpus(corpus, out_corpus)
    click.echo(
        f"fixture: layers={spec.n_layers} d_model={spec.d_model} "
        f"heads={spec.n_heads} vocab={spec.vocab_size} hot_layer={spec.hot_layer}"
    )
    click.echo(f"model {out_model} checksum {checkpoint_checksum(model):08x}")
    click.echo(
        f"corpus {out_corpus} checksum {corpus_checksum(corpus):08x} "
        f"({len(corpus.sequences)} sequences)"
    )


def _resolve_buckets(buckets_flag, cfg, passages_flag) -> BucketSpec:
    ranges = _pick(buckets_flag, cfg, "buckets", None)
    parsed = _parse_ranges(ranges) if ranges is not None else DEFAULT_BUCKET_RANGES
    passages = _pick(passages_flag, cfg, "passages_per_bucket",
                     DEFAULT_PASSAGES_PER_BUCKET, int)
    return BucketSpec(ranges=parsed, passages_per_bucket=passages)


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="key=value config file")
@click.option("--model", "model_path", type=str, default=None)
@click.option("--corpus", "corpus_path", type=str, default=None)
@click.option("--out", "out_path", type=str, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--buckets", type=str, default=None, help="e.g. 33-128,129-512")
@click.option("--passages-per-bucket", type=int, default=None)
@click.option("--weights", type=str, default=None, help="alpha,beta,gamma for the score preview")
@click.option("--threads", type=int, default=None)
@_guard
def diagnose(config_path, model_path, corpus_path, out_path, seed, k, buckets,
             passages_per_bucket, weights, threads):
    """Measure per-layer effectiveness and write a diagnostics report."""
    cfg = _load_config(config_path)
    model_path = _required(_pick(model_path, cfg, "model"), "model")
    corpus_path = _required(_pick(corpus_path, cfg, "corpus"), "corpus")
    out_path = _required(_pick(out_path, cfg, "out"), "out")
    seed = _pick(seed, cfg, "seed", 0, int)
    k = _pick(k, cfg, "k", None, int)
    w = ScoreWeights(*_parse_weights(_pick(weights, cfg, "weights", "") or "")) \
        if _pick(weights, cfg, "weights", None) else ScoreWeights.default()
    n_threads = resolve_threads(_pick(threads, cfg, "threads", None, int))

    model = load_checkpoint(model_path)
    corpus = load_corpus(corpus_path)
    spec = _resolve_buckets(buckets, cfg, passages_per_bucket)
    report = run_diagnostics(
        model, corpus, buckets=spec, k=k, seed=seed, threads=n_threads,
        model_checksum=f"{checkpoint_checksum(model):08x}",
        corpus_checksum=f"{corpus_checksum(corpus):08x}",
    )
    _write_text(out_path, canonical_json(report.to_json()))

    ppl, comp, energy = report.mean_triplet()
    try:
        from .allocate import effectiveness_score, normalize_metrics

        pn, cn, en = normalize_metrics(ppl, comp, energy)
        scores = effectiveness_score(pn, cn, en, w)
    except DegenerateMetric:
        scores = [float("nan")] * len(ppl)
    click.echo(f"{'layer':>5}  {'ppl_drop':>12}  {'compact_drop':>12}  {'energy_gain':>12}  {'score':>8}")
    for i in range(len(ppl)):
        click.echo(
            f"{i:>5}  {ppl[i]:>12.6f}  {comp[i]:>12.6f}  {energy[i]:>12.6f}  {scores[i]:>8.4f}"
        )
    click.echo(f"diagnostics written to {out_path}")


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="key=value config file")
@click.option("--diagnostics", "diag_path", type=str, default=None)
@click.option("--model", "model_path", type=str, default=None)
@click.option("--weights", type=str, default=None, help="alpha,beta,gamma")
@click.option("--m", "m_", type=int, default=None)
@click.option("--b-hi", type=int, default=None)
@click.option("--b-lo", type=int, default=None)
@click.option("--out", "out_path", type=str, default=None)
@_guard
def allocate(config_path, diag_path, model_path, weights, m_, b_hi, b_lo, out_path):
    """Turn a diagnostics report into a per-layer bit plan."""
    cfg = _load_config(config_path)
    diag_path = _required(_pick(diag_path, cfg, "diagnostics"), "diagnostics")
    model_path = _required(_pick(model_path, cfg, "model"), "model")
    out_path = _required(_pick(out_path, cfg, "out"), "out")
    m_ = _pick(m_, cfg, "m", 1, int)
    b_hi = _pick(b_hi, cfg, "b_hi", 4, int)
    b_lo = _pick(b_lo, cfg, "b_lo", 2, int)
    w_text = _pick(weights, cfg, "weights", None)
    w = ScoreWeights(*_parse_weights(w_text)) if w_text else ScoreWeights.default()

    report = DiagnosticsReport.from_json(_read_json(diag_path, "diagnostics"))
    model = load_checkpoint(model_path)
    checksum = f"{checkpoint_checksum(model):08x}"
    recorded = report.provenance.get("model_checksum")
    if recorded is not None and recorded != checksum:
        raise LieqError(
            f"diagnostics were computed on checkpoint {recorded}, "
            f"but {model_path} has checksum {checksum}"
        )
    ppl, comp, energy = report.mean_triplet()
    plan = plan_layers(
        ppl, comp, energy, weights=w, m=m_, b_hi=b_hi, b_lo=b_lo,
        model=model, model_checksum=checksum,
    )
    _write_text(out_path, canonical_json(plan.to_json()))
    high = ",".join(str(i) for i in sorted(plan.high_layers)) or "-"
    click.echo(f"high-precision layers ({plan.b_hi}-bit): {high}")
    click.echo(f"avg_bits={plan.avg_bits:.4f} cr={plan.cr:.6f}")
    click.echo(f"plan written to {out_path}")


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="key=value config file")
@click.option("--model", "model_path", type=str, default=None)
@click.option("--plan", "plan_path", type=str, default=None)
@click.option("--group-size", type=int, default=None)
@click.option("--out", "out_path", type=str, default=None)
@_guard
def quantize(config_path, model_path, plan_path, group_size, out_path):
    """Pack a checkpoint to the bit widths in a plan."""
    cfg = _load_config(config_path)
    model_path = _required(_pick(model_path, cfg, "model"), "model")
    plan_path = _required(_pick(plan_path, cfg, "plan"), "plan")
    out_path = _required(_pick(out_path, cfg, "out"), "out")
    group_size = _pick(group_size, cfg, "group_size", 64, int)

    model = load_checkpoint(model_path)
    plan = BitPlan.from_json(_read_json(plan_path, "plan"))
    checksum = f"{checkpoint_checksum(model):08x}"
    if plan.model_checksum is not None and plan.model_checksum != checksum:
        raise LieqError(
            f"plan was built for checkpoint {plan.model_checksum}, "
            f"but {model_path} has checksum {checksum}"
        )
    qmodel = quantize_model(model, plan, group_size)
    save_qmodel(qmodel, out_path)
    bits = " ".join(f"{i}:{b}" for i, b in enumerate(qmodel.layer_bits()))
    click.echo(f"layer bits: {bits}")
    click.echo(f"packed code bytes: {qmodel.packed_bytes()}")
    click.echo(f"quantized model written to {out_path}")


@main.command(name="eval")
@click.option("--config", "config_path", type=str, default=None, help="key=value config file")
@click.option("--model", "model_path", type=str, default=None)
@click.option("--corpus", "corpus_path", type=str, default=None)
@click.option("--quant", "quant_path", type=str, default=None)
@click.option("--diagnostics", "diag_path", type=str, default=None)
@click.option("--out", "out_path", type=str, default=None)
@click.option("--format", "fmt", type=str, default=None, help="json or csv")
@click.option("--threads", type=int, default=None)
@_guard
def eval_cmd(config_path, model_path, corpus_path, quant_path, diag_path,
             out_path, fmt, threads):
    """Score a quantized model against its float source."""
    cfg = _load_config(config_path)
    model_path = _required(_pick(model_path, cfg, "model"), "model")
    corpus_path = _required(_pick(corpus_path, cfg, "corpus"), "corpus")
    quant_path = _required(_pick(quant_path, cfg, "quant"), "quant")
    out_path = _required(_pick(out_path, cfg, "out"), "out")
    fmt = _pick(fmt, cfg, "format", "json")
    diag_path = _pick(diag_path, cfg, "diagnostics", None)
    n_threads = resolve_threads(_pick(threads, cfg, "threads", None, int))

    model = load_checkpoint(model_path)
    corpus = load_corpus(corpus_path)
    qmodel = load_qmodel(quant_path)
    diagnostics = (
        DiagnosticsReport.from_json(_read_json(diag_path, "diagnostics"))
        if diag_path
        else None
    )
    report = evaluate(
        model, qmodel, corpus, diagnostics=diagnostics, threads=n_threads,
        config={"model": model_path, "corpus": corpus_path, "quant": quant_path},
    )
    emit_report(report, out_path, fmt)
    click.echo(
        f"ppl_fp={report.ppl_fp:.6f} ppl_quant={report.ppl_quant:.6f} "
        f"ppl_recovery={report.ppl_recovery:.6f} avg_bits={report.avg_bits:.4f} "
        f"cr={report.cr:.6f}"
    )
    click.echo(f"runtime_seconds={report.runtime_seconds:.3f}")
    click.echo(f"report written to {out_path} ({fmt})")


@main.command()
@click.option("--config", "config_path", type=str, default=None, help="key=value config file")
@click.option("--model", "model_path", type=str, default=None)
@click.option("--corpus", "corpus_path", type=str, default=None)
@click.option("--m-range", "m_range", type=str, default=None, help="e.g. 1..16")
@click.option("--weights", type=str, default=None, help="alpha,beta,gamma")
@click.option("--b-hi", type=int, default=None)
@click.option("--b-lo", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--buckets", type=str, default=None)
@click.option("--passages-per-bucket", type=int, default=None)
@click.option("--group-size", type=int, default=None)
@click.option("--out-prefix", type=str, default=None)
@click.option("--threads", type=int, default=None)
@_guard
def sweep(config_path, model_path, corpus_path, m_range, weights, b_hi, b_lo,
          seed, k, buckets, passages_per_bucket, group_size, out_prefix, threads):
    """Evaluate plans across a range of high-precision layer counts."""
    cfg = _load_config(config_path)
    model_path = _required(_pick(model_path, cfg, "model"), "model")
    corpus_path = _required(_pick(corpus_path, cfg, "corpus"), "corpus")
    out_prefix = _pick(out_prefix, cfg, "out_prefix", "sweep")
    b_hi = _pick(b_hi, cfg, "b_hi", 4, int)
    b_lo = _pick(b_lo, cfg, "b_lo", 2, int)
    seed = _pick(seed, cfg, "seed", 0, int)
    k = _pick(k, cfg, "k", None, int)
    group_size = _pick(group_size, cfg, "group_size", 64, int)
    w_text = _pick(weights, cfg, "weights", None)
    w = ScoreWeights(*_parse_weights(w_text)) if w_text else ScoreWeights.default()
    n_threads = resolve_threads(_pick(threads, cfg, "threads", None, int))

    model = load_checkpoint(model_path)
    corpus = load_corpus(corpus_path)
    n_layers = model.arch.n_layers
    raw_range = _pick(m_range, cfg, "m_range", f"1..{min(16, n_layers)}")
    ms = _parse_m_range(raw_range)
    clamped = [m for m in ms if 0 <= m <= n_layers]
    if not clamped:
        raise LieqError(f"m range {raw_range!r} has no value in [0, {n_layers}]")
    if clamped != ms:
        click.echo(
            f"warning: m range clamped to {clamped[0]}..{clamped[-1]} "
            f"(model has {n_layers} layers)",
            err=True,
        )

    spec = _resolve_buckets(buckets, cfg, passages_per_bucket)
    result = sweep_m(
        model, corpus, clamped, weights=w, b_hi=b_hi, b_lo=b_lo,
        buckets=spec, k=k, seed=seed, group_size=group_size, threads=n_threads,
    )
    emit_report(result, out_prefix + ".json", "json")
    emit_report(result, out_prefix + ".csv", "csv")
    click.echo(f"{'m':>3}  {'avg_bits':>9}  {'ppl_quant':>12}")
    for m, avg_bits, ppl in result.points:
        click.echo(f"{m:>3}  {avg_bits:>9.4f}  {ppl:>12.6f}")
    click.echo(f"sweep written to {out_prefix}.json and {out_prefix}.csv")


if __name__ == "__main__":
    main()
