"""Evaluation harness tests: scoring, sweeps, and canonical report bytes."""

from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_random_checkpoint, make_random_corpus

from lieq import (
    ArchConfig,
    BitPlan,
    BucketSpec,
    FixtureSpec,
    ScoreWeights,
    SweepResult,
    baseline_perplexity,
    checkpoint_checksum,
    emit_report,
    evaluate,
    make_fixture,
    quantize_model,
    run_diagnostics,
    sweep_m,
)
from lieq.allocate import assign_bits
from lieq.errors import ArchMismatch, MOutOfRange, UnsupportedFormat


@pytest.fixture(scope="module")
def setup():
    arch = ArchConfig(
        n_layers=2, d_model=16, n_heads=2, d_head=8, d_ff=32,
        vocab_size=23, max_seq_len=128,
    )
    model = make_random_checkpoint(arch, seed=40)
    corpus = make_random_corpus(arch, [6, 9, 14, 20, 26], seed=41)
    return model, corpus


@pytest.fixture(scope="module")
def hot_setup():
    # sweeps normalize the diagnostic metrics, which needs a model whose
    # layers actually differ; a plain random checkpoint has no signal
    spec = FixtureSpec(
        n_layers=3, d_model=32, n_heads=4, d_ff=64, vocab_size=31,
        seed=17, hot_layer=1, sequences_per_bucket=3,
        bucket_ranges=((8, 16), (17, 24)), max_passage_len=24,
    )
    return make_fixture(spec)


def _bucket_spec():
    return BucketSpec(ranges=((5, 15), (16, 30)), passages_per_bucket=3)


def _hot_bucket_spec():
    return BucketSpec(ranges=((8, 16), (17, 24)), passages_per_bucket=3)


class TestEvaluate:
    def test_basic_report(self, setup):
        model, corpus = setup
        plan = assign_bits([0.9, 0.1], m=1, b_hi=8, b_lo=4)
        qm = quantize_model(model, plan, group_size=8)
        rep = evaluate(model, qm, corpus)
        assert rep.ppl_fp == pytest.approx(baseline_perplexity(model, corpus))
        assert rep.ppl_quant > 0
        assert rep.ppl_recovery == pytest.approx(rep.ppl_fp / rep.ppl_quant)
        assert rep.layer_bits == [8, 4]
        assert rep.avg_bits == pytest.approx(6.0)
        assert rep.n_sequences == 5
        assert rep.group_size == 8
        assert rep.runtime_seconds > 0

    def test_16bit_recovery_is_one(self, setup):
        model, corpus = setup
        plan = BitPlan(
            bits=[16, 16], scores=[0.0, 0.0], m=0, b_hi=4, b_lo=2,
            weights=ScoreWeights.default(), high_layers=frozenset(),
        )
        qm = quantize_model(model, plan, group_size=8)
        rep = evaluate(model, qm, corpus)
        assert rep.ppl_recovery == pytest.approx(1.0, rel=1e-12)

    def test_arch_mismatch(self, setup):
        model, corpus = setup
        other_arch = ArchConfig(
            n_layers=2, d_model=16, n_heads=2, d_head=8, d_ff=32,
            vocab_size=29, max_seq_len=128,
        )
        other = make_random_checkpoint(other_arch, seed=1)
        plan = assign_bits([0.9, 0.1], m=1)
        qm = quantize_model(other, plan, group_size=8)
        with pytest.raises(ArchMismatch):
            evaluate(model, qm, corpus)

    def test_checksum_mismatch(self, setup):
        model, corpus = setup
        wrong = assign_bits([0.9, 0.1], m=1, model_checksum="00000000")
        qm = quantize_model(model, wrong, group_size=8)
        with pytest.raises(ArchMismatch):
            evaluate(model, qm, corpus)

    def test_recorded_checksum_accepted(self, setup):
        model, corpus = setup
        good = assign_bits(
            [0.9, 0.1], m=1,
            model_checksum=f"{checkpoint_checksum(model):08x}",
        )
        qm = quantize_model(model, good, group_size=8)
        rep = evaluate(model, qm, corpus)
        assert rep.model_checksum == good.model_checksum

    def test_spearman_summary_from_diagnostics(self, setup):
        model, corpus = setup
        diag = run_diagnostics(model, corpus, buckets=_bucket_spec(), seed=2)
        plan = assign_bits([0.9, 0.1], m=1)
        qm = quantize_model(model, plan, group_size=8)
        rep = evaluate(model, qm, corpus, diagnostics=diag)
        per_bucket = [
            b.spearman_ppl_compactness
            for b in diag.buckets
            if b.spearman_ppl_compactness is not None
        ]
        if per_bucket:
            assert rep.spearman_ppl_compactness == pytest.approx(
                sum(per_bucket) / len(per_bucket)
            )
        else:
            assert rep.spearman_ppl_compactness is None


class TestReportBytes:
    def test_canonical_json_excludes_runtime(self, setup):
        model, corpus = setup
        plan = assign_bits([0.9, 0.1], m=1)
        qm = quantize_model(model, plan, group_size=8)
        a = evaluate(model, qm, corpus)
        b = evaluate(model, qm, corpus)
        assert a.runtime_seconds != b.runtime_seconds
        assert a.to_canonical_json() == b.to_canonical_json()
        assert "runtime" not in a.to_canonical_json()

    def test_json_is_parseable_and_sorted(self, setup):
        model, corpus = setup
        plan = assign_bits([0.9, 0.1], m=1)
        qm = quantize_model(model, plan, group_size=8)
        text = evaluate(model, qm, corpus).to_canonical_json()
        obj = json.loads(text)
        assert obj["kind"] == "lieq-eval"
        assert list(obj) == sorted(obj)

    def test_csv_has_header_and_rows(self, setup):
        model, corpus = setup
        plan = assign_bits([0.9, 0.1], m=1)
        qm = quantize_model(model, plan, group_size=8)
        csv = evaluate(model, qm, corpus).to_csv()
        lines = csv.strip().split("\n")
        assert lines[0] == "key,value"
        keys = {line.split(",", 1)[0] for line in lines[1:]}
        assert {"ppl_fp", "ppl_quant", "avg_bits"} <= keys

    def test_emit_report_files(self, setup, tmp_path):
        model, corpus = setup
        plan = assign_bits([0.9, 0.1], m=1)
        qm = quantize_model(model, plan, group_size=8)
        rep = evaluate(model, qm, corpus)
        jp, cp = str(tmp_path / "r.json"), str(tmp_path / "r.csv")
        emit_report(rep, jp, "json")
        emit_report(rep, cp, "csv")
        assert json.load(open(jp))["kind"] == "lieq-eval"
        assert open(cp).read() == rep.to_csv()
        with pytest.raises(UnsupportedFormat):
            emit_report(rep, jp, "xml")


class TestSweep:
    def test_points_and_monotone_bits(self, hot_setup):
        model, corpus = hot_setup
        res = sweep_m(
            model, corpus, m_values=[0, 1, 2, 3],
            buckets=_hot_bucket_spec(), k=4, group_size=8,
        )
        assert [p[0] for p in res.points] == [0, 1, 2, 3]
        bits = [p[1] for p in res.points]
        assert all(b2 > b1 for b1, b2 in zip(bits, bits[1:]))
        assert res.points[0][1] == pytest.approx(2.0)
        assert res.points[-1][1] == pytest.approx(4.0)
        assert all(p[2] > 0 for p in res.points)

    def test_shared_diagnostics_reused(self, hot_setup):
        model, corpus = hot_setup
        diag = run_diagnostics(
            model, corpus, buckets=_hot_bucket_spec(), k=4, seed=0,
            model_checksum=f"{checkpoint_checksum(model):08x}",
        )
        a = sweep_m(model, corpus, [0, 2], diagnostics=diag, group_size=8)
        b = sweep_m(
            model, corpus, [0, 2], buckets=_hot_bucket_spec(), k=4, seed=0,
            group_size=8,
        )
        assert a.to_canonical_json() == b.to_canonical_json()

    def test_byte_stable_reruns(self, hot_setup, tmp_path):
        model, corpus = hot_setup
        paths = []
        for i in range(2):
            res = sweep_m(
                model, corpus, [0, 1], buckets=_hot_bucket_spec(), k=4,
                seed=3, group_size=8,
            )
            jp = str(tmp_path / f"s{i}.json")
            cp = str(tmp_path / f"s{i}.csv")
            emit_report(res, jp, "json")
            emit_report(res, cp, "csv")
            paths.append((jp, cp))
        assert open(paths[0][0], "rb").read() == open(paths[1][0], "rb").read()
        assert open(paths[0][1], "rb").read() == open(paths[1][1], "rb").read()

    def test_csv_shape(self, hot_setup):
        model, corpus = hot_setup
        res = sweep_m(
            model, corpus, [0, 1], buckets=_hot_bucket_spec(), k=4, group_size=8
        )
        lines = res.to_csv().strip().split("\n")
        assert lines[0] == "m,avg_bits,ppl_quant"
        assert len(lines) == 3

    def test_m_out_of_range(self, hot_setup):
        model, corpus = hot_setup
        with pytest.raises(MOutOfRange):
            sweep_m(model, corpus, [0, 5], buckets=_hot_bucket_spec())

    def test_result_rejects_unsorted_points(self):
        with pytest.raises(ValueError):
            SweepResult(
                points=[(1, 2.0, 5.0), (0, 2.0, 5.0)], b_hi=4, b_lo=2,
                ppl_fp=4.0,
            )
