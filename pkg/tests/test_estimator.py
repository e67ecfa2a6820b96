"""Estimator facade tests: sklearn contract plus pipeline behavior."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lieq import FixtureSpec, LieQuantizer, make_fixture
from lieq.errors import ArchMismatch, WeightSumInvalid
from lieq.quant import QuantModel, QuantTensor


@pytest.fixture(scope="module")
def fitted_setup():
    spec = FixtureSpec(
        n_layers=3, d_model=32, n_heads=2, d_ff=64, vocab_size=31,
        seed=23, hot_layer=1, sequences_per_bucket=4,
        bucket_ranges=((8, 16), (17, 24)), max_passage_len=24,
    )
    model, corpus = make_fixture(spec)
    est = LieQuantizer(
        m=1, group_size=16, bucket_ranges=((8, 16), (17, 24)),
        passages_per_bucket=4, seed=0,
    )
    est.fit(model, corpus)
    return est, model, corpus


class TestSklearnContract:
    def test_get_params_round_trips(self):
        est = LieQuantizer(m=2, b_hi=8, b_lo=3, seed=7)
        params = est.get_params()
        assert params["m"] == 2
        assert params["b_hi"] == 8
        assert params["b_lo"] == 3
        est2 = LieQuantizer(**params)
        assert est2.get_params() == params

    def test_set_params(self):
        est = LieQuantizer()
        est.set_params(m=3, seed=9)
        assert est.m == 3
        assert est.seed == 9

    def test_clone_keeps_params_drops_state(self, fitted_setup):
        est, _, _ = fitted_setup
        fresh = clone(est)
        assert fresh.get_params() == est.get_params()
        with pytest.raises(NotFittedError):
            fresh.transform()

    def test_unfitted_transform_raises(self):
        with pytest.raises(NotFittedError):
            LieQuantizer().transform()

    def test_unfitted_score_raises(self, fitted_setup):
        _, model, corpus = fitted_setup
        with pytest.raises(NotFittedError):
            LieQuantizer().score(model, corpus)


class TestFit:
    def test_fit_returns_self_and_sets_state(self, fitted_setup):
        est, model, _ = fitted_setup
        assert est.fit is not None
        assert hasattr(est, "plan_")
        assert hasattr(est, "diagnostics_")
        assert est.scores_.shape == (3,)
        assert est.plan_.m == 1
        assert len(est.plan_.bits) == 3
        assert est.plan_.model_checksum == est.model_checksum_

    def test_hot_layer_selected(self, fitted_setup):
        est, _, _ = fitted_setup
        assert est.plan_.high_layers == frozenset({1})
        assert est.plan_.bits == [2, 4, 2]

    def test_invalid_weights_rejected_at_fit(self, fitted_setup):
        _, model, corpus = fitted_setup
        est = LieQuantizer(alpha=0.9, beta=0.9, gamma=0.9)
        with pytest.raises(WeightSumInvalid):
            est.fit(model, corpus)

    def test_refit_is_deterministic(self, fitted_setup):
        est, model, corpus = fitted_setup
        est2 = clone(est).fit(model, corpus)
        assert est2.plan_.to_json() == est.plan_.to_json()
        assert est2.diagnostics_.to_json() == est.diagnostics_.to_json()


class TestTransform:
    def test_produces_quant_model(self, fitted_setup):
        est, model, _ = fitted_setup
        qm = est.transform()
        assert isinstance(qm, QuantModel)
        assert qm.arch == model.arch
        assert qm.layer_bits() == est.plan_.bits
        assert qm.group_size == 16
        assert isinstance(qm.tensors["layer.1.W_Q"], QuantTensor)
        assert qm.tensors["layer.1.W_Q"].bits == 4

    def test_explicit_matching_checkpoint_accepted(self, fitted_setup):
        est, model, _ = fitted_setup
        qm = est.transform(model)
        assert qm.layer_bits() == est.plan_.bits

    def test_foreign_checkpoint_rejected(self, fitted_setup):
        est, _, _ = fitted_setup
        spec = FixtureSpec(
            n_layers=3, d_model=32, n_heads=2, d_ff=64, vocab_size=31,
            seed=99, hot_layer=1, sequences_per_bucket=2,
            bucket_ranges=((8, 16),), max_passage_len=16,
        )
        other, _ = make_fixture(spec)
        with pytest.raises(ArchMismatch):
            est.transform(other)

    def test_fit_transform_equals_fit_then_transform(self, fitted_setup):
        est, model, corpus = fitted_setup
        qm1 = clone(est).fit_transform(model, corpus)
        qm2 = est.transform()
        for name, t in qm1.tensors.items():
            t2 = qm2.tensors[name]
            if isinstance(t, QuantTensor):
                assert t.packed == t2.packed
                assert np.array_equal(t.scales, t2.scales)
            else:
                assert np.array_equal(t, t2)


class TestScore:
    def test_recovery_in_unit_interval(self, fitted_setup):
        est, model, corpus = fitted_setup
        r = est.score(model, corpus)
        assert 0.0 < r <= 1.0 + 1e-9
