"""Score fusion, layer selection, bit assignment, and size accounting."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_random_checkpoint

from lieq import (
    ArchConfig,
    BitPlan,
    ScoreWeights,
    assign_bits,
    compression_ratio,
    effectiveness_score,
    normalize_metrics,
    plan_layers,
    select_topk,
)
from lieq.errors import (
    DegenerateMetric,
    MOutOfRange,
    PlanLengthMismatch,
    SchemaMismatch,
    UnsupportedBitWidth,
    WeightSumInvalid,
)


class TestScoreWeights:
    def test_default_is_uniform(self):
        w = ScoreWeights.default()
        assert w.alpha == w.beta == w.gamma
        assert w.alpha + w.beta + w.gamma == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize(
        "bad", [(0.5, 0.5, 0.5), (1.0, 0.1, 0.0), (0.0, 0.0, 0.0)]
    )
    def test_sum_must_be_one(self, bad):
        with pytest.raises(WeightSumInvalid):
            ScoreWeights(*bad)

    def test_negative_rejected(self):
        with pytest.raises(WeightSumInvalid):
            ScoreWeights(1.5, -0.5, 0.0)

    def test_json_roundtrip(self):
        w = ScoreWeights(0.5, 0.25, 0.25)
        assert ScoreWeights.from_json(w.to_json()) == w


class TestNormalizeMetrics:
    def test_each_column_peaks_at_one(self):
        ppl, comp, energy = normalize_metrics(
            [2.0, 4.0, 1.0], [0.1, -0.3, 0.2], [0.05, 0.01, 0.02]
        )
        assert ppl.max() == comp.max() == energy.max() == 1.0
        assert ppl.tolist() == [0.5, 1.0, 0.25]

    def test_negative_ppl_and_energy_clamped(self):
        ppl, _, energy = normalize_metrics(
            [-5.0, 2.0], [0.1, 0.2], [-1.0, 0.5]
        )
        assert ppl.tolist() == [0.0, 1.0]
        assert energy.tolist() == [0.0, 1.0]

    def test_compactness_enters_by_magnitude(self):
        _, comp, _ = normalize_metrics([1.0, 1.0], [-0.4, 0.2], [0.1, 0.1])
        assert comp.tolist() == [1.0, 0.5]

    @pytest.mark.parametrize(
        "ppl,comp,energy,name",
        [
            ([0.0, -1.0], [0.1, 0.2], [0.3, 0.4], "ppl_drop"),
            ([1.0, 2.0], [0.0, 0.0], [0.3, 0.4], "compactness_drop"),
            ([1.0, 2.0], [0.1, 0.2], [-0.3, 0.0], "energy_gain"),
        ],
    )
    def test_dead_column_raises(self, ppl, comp, energy, name):
        with pytest.raises(DegenerateMetric) as exc:
            normalize_metrics(ppl, comp, energy)
        assert exc.value.name == name

    def test_nonfinite_raises(self):
        with pytest.raises(DegenerateMetric):
            normalize_metrics([1.0, np.nan], [0.1, 0.2], [0.3, 0.4])

    def test_length_mismatch(self):
        with pytest.raises(PlanLengthMismatch):
            normalize_metrics([1.0], [0.1, 0.2], [0.3, 0.4])


class TestScoreAndSelect:
    def test_convex_combination(self):
        s = effectiveness_score([1.0, 0.0], [0.0, 1.0], [0.5, 0.5],
                                ScoreWeights(0.6, 0.3, 0.1))
        assert s.tolist() == pytest.approx([0.65, 0.35])

    def test_uniform_weights_by_default(self):
        s = effectiveness_score([0.3, 0.9], [0.3, 0.9], [0.3, 0.9])
        assert s.tolist() == pytest.approx([0.3, 0.9])

    def test_topk_basic(self):
        assert select_topk([0.1, 0.9, 0.5], 1) == frozenset({1})
        assert select_topk([0.1, 0.9, 0.5], 2) == frozenset({1, 2})

    def test_topk_ties_take_lower_index(self):
        assert select_topk([0.5, 0.5, 0.5], 1) == frozenset({0})
        assert select_topk([0.2, 0.5, 0.5], 1) == frozenset({1})
        assert select_topk([0.5, 0.5, 0.5], 2) == frozenset({0, 1})

    def test_topk_extremes(self):
        assert select_topk([0.1, 0.2], 0) == frozenset()
        assert select_topk([0.1, 0.2], 2) == frozenset({0, 1})

    def test_topk_m_out_of_range(self):
        with pytest.raises(MOutOfRange):
            select_topk([0.1, 0.2], 3)
        with pytest.raises(MOutOfRange):
            select_topk([0.1, 0.2], -1)


class TestAssignBits:
    def test_structure(self):
        plan = assign_bits([0.3, 0.9, 0.1], m=1)
        assert plan.bits == [2, 4, 2]
        assert plan.high_layers == frozenset({1})
        assert plan.low_layers == frozenset({0, 2})
        assert plan.m == 1 and plan.b_hi == 4 and plan.b_lo == 2

    def test_m_zero_and_m_full(self):
        assert assign_bits([0.1, 0.2], m=0).bits == [2, 2]
        assert assign_bits([0.1, 0.2], m=2).bits == [4, 4]

    def test_alternate_widths(self):
        plan = assign_bits([0.9, 0.1], m=1, b_hi=8, b_lo=3)
        assert plan.bits == [8, 3]

    def test_bit_width_validation(self):
        with pytest.raises(UnsupportedBitWidth):
            assign_bits([0.1], m=0, b_hi=5, b_lo=2)
        with pytest.raises(UnsupportedBitWidth):
            assign_bits([0.1], m=0, b_hi=2, b_lo=4)
        with pytest.raises(UnsupportedBitWidth):
            assign_bits([0.1], m=0, b_hi=4, b_lo=4)

    def test_plan_json_roundtrip(self):
        plan = assign_bits([0.3, 0.9, 0.1], m=1, model_checksum="cafe")
        back = BitPlan.from_json(plan.to_json())
        assert back.bits == plan.bits
        assert back.scores == pytest.approx(plan.scores)
        assert back.high_layers == plan.high_layers
        assert back.weights == plan.weights
        assert back.model_checksum == "cafe"

    def test_from_json_rejects_bad_kind(self):
        obj = assign_bits([0.1, 0.9], m=1).to_json()
        obj["kind"] = "other"
        with pytest.raises(SchemaMismatch):
            BitPlan.from_json(obj)

    def test_from_json_rejects_bad_schema_version(self):
        obj = assign_bits([0.1, 0.9], m=1).to_json()
        obj["schema_version"] = 99
        with pytest.raises(SchemaMismatch):
            BitPlan.from_json(obj)

    def test_from_json_rejects_inconsistent_layers(self):
        obj = assign_bits([0.1, 0.9], m=1).to_json()
        obj["layers"][0]["index"] = 5
        with pytest.raises(SchemaMismatch):
            BitPlan.from_json(obj)


def _equal_layer_model(n_layers: int) -> object:
    arch = ArchConfig(
        n_layers=n_layers, d_model=8, n_heads=2, d_head=4, d_ff=16,
        vocab_size=11, max_seq_len=64,
    )
    return make_random_checkpoint(arch, seed=0)


class TestCompression:
    def test_equal_layers_m1_formula(self):
        """With identical layer sizes, avg_bits = (4 + 2(L-1)) / L."""
        for L in (3, 5, 7):
            model = _equal_layer_model(L)
            plan = assign_bits([1.0] + [0.0] * (L - 1), m=1)
            rep = compression_ratio(plan, model)
            expected = (4 + 2 * (L - 1)) / L
            assert rep.avg_bits == pytest.approx(expected, rel=1e-12)
            assert rep.cr == pytest.approx(expected / 16.0, rel=1e-12)

    def test_weighted_by_parameter_count(self):
        model = _equal_layer_model(2)
        plan = assign_bits([1.0, 0.0], m=1)
        rep = compression_ratio(plan, model)
        n = model.layer_param_count(0)
        assert rep.layer_params == [n, n]
        assert rep.quantizable_params == 2 * n
        assert rep.cr == pytest.approx((4 * n + 2 * n) / (16.0 * 2 * n))
        assert rep.fp16_layer_bytes == 2 * 2 * n
        assert rep.packed_weight_bytes == (4 * n + 7) // 8 + (2 * n + 7) // 8

    def test_whole_model_cr_counts_excluded_at_16(self):
        model = _equal_layer_model(2)
        plan = assign_bits([1.0, 0.0], m=1)
        rep = compression_ratio(plan, model)
        quant = rep.quantizable_params
        excl = rep.total_params - quant
        expected = (4 * quant // 2 + 2 * quant // 2 + 16 * excl) / (
            16.0 * rep.total_params
        )
        assert rep.whole_model_cr == pytest.approx(expected, rel=1e-12)
        assert rep.whole_model_cr > rep.cr

    def test_plan_length_checked(self):
        model = _equal_layer_model(2)
        plan = assign_bits([1.0, 0.0, 0.0], m=1)
        with pytest.raises(PlanLengthMismatch):
            compression_ratio(plan, model)


class TestPlanLayers:
    def test_end_to_end_selects_strongest(self):
        plan = plan_layers(
            ppl_drop=[0.5, 3.0, 0.2],
            compactness_drop=[0.05, 0.4, 0.01],
            energy_gain=[0.01, 0.2, 0.005],
            m=1,
        )
        assert plan.high_layers == frozenset({1})
        assert plan.bits == [2, 4, 2]
        assert plan.scores[1] == pytest.approx(1.0)
        assert plan.cr is None and plan.avg_bits is None

    def test_model_fills_size_fields(self):
        model = _equal_layer_model(3)
        plan = plan_layers(
            [1.0, 0.1, 0.1], [0.2, 0.1, 0.1], [0.3, 0.1, 0.1],
            m=1, model=model, model_checksum="beef",
        )
        assert plan.avg_bits == pytest.approx((4 + 2 + 2) / 3)
        assert plan.cr == pytest.approx(plan.avg_bits / 16.0)
        assert plan.model_checksum == "beef"

    def test_custom_weights_change_selection(self):
        # layer 0 wins on ppl, layer 1 wins on energy
        common = dict(
            ppl_drop=[1.0, 0.2], compactness_drop=[0.1, 0.1],
            energy_gain=[0.1, 1.0], m=1,
        )
        ppl_led = plan_layers(weights=ScoreWeights(0.8, 0.1, 0.1), **common)
        energy_led = plan_layers(weights=ScoreWeights(0.1, 0.1, 0.8), **common)
        assert ppl_led.high_layers == frozenset({0})
        assert energy_led.high_layers == frozenset({1})
