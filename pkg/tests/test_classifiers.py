import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xcmix.classifiers import (
    apply_classifier_updates,
    apply_classifier_updates_arrays,
    init_classifiers,
    score_all,
    score_labels,
)
from xcmix.errors import ConfigError, NumericalError


class TestScoring:
    def test_basis_inner_product(self):
        bank = init_classifiers(2, 2, "zeros", seed=0)
        bank.weights[1] = [0.0, 1.0]
        out = score_labels(bank, np.array([2.0, 3.0]), [1])
        assert out.scores[0] == pytest.approx(3.0)

    def test_zero_embedding(self):
        bank = init_classifiers(5, 3, "uniform-scaled", seed=1)
        out = score_labels(bank, np.zeros(3), [0, 2, 4])
        np.testing.assert_allclose(out.scores, 0.0)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        bank = init_classifiers(50, 8, "uniform-scaled", seed=3)
        emb = rng.standard_normal(8).astype(np.float32)
        ids = rng.choice(50, size=12, replace=False)
        out = score_labels(bank, emb, ids)
        np.testing.assert_allclose(out.scores, (bank.weights @ emb)[ids], rtol=1e-6)

    def test_score_all_identity_rows(self):
        bank = init_classifiers(3, 3, "zeros", seed=0)
        bank.weights[:] = np.eye(3, dtype=np.float32)
        np.testing.assert_allclose(score_all(bank, np.array([1.0, 2.0, 3.0])), [1, 2, 3])

    def test_score_all_zero_bank(self):
        bank = init_classifiers(4, 2, "zeros", seed=0)
        np.testing.assert_allclose(score_all(bank, np.ones(2)), 0.0)

    def test_score_all_equals_partitioned_score_labels(self):
        rng = np.random.default_rng(4)
        bank = init_classifiers(20, 4, "uniform-scaled", seed=5)
        emb = rng.standard_normal(4).astype(np.float32)
        full = score_all(bank, emb)
        parts = np.concatenate(
            [score_labels(bank, emb, r).scores for r in (range(0, 7), range(7, 15), range(15, 20))]
        )
        np.testing.assert_allclose(full, parts, rtol=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        bank = init_classifiers(10, 5, "uniform-scaled", seed=7)
        u, v = rng.standard_normal((2, 5)).astype(np.float32)
        lhs = score_all(bank, 2.0 * u + 0.5 * v)
        rhs = 2.0 * score_all(bank, u) + 0.5 * score_all(bank, v)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-5)

    def test_id_out_of_range(self):
        bank = init_classifiers(3, 2, "zeros", seed=0)
        with pytest.raises(ConfigError):
            score_labels(bank, np.ones(2), [5])


class TestInit:
    def test_zeros(self):
        bank = init_classifiers(6, 4, "zeros", seed=0)
        assert not bank.weights.any()

    def test_uniform_bounds_d64(self):
        bank = init_classifiers(100, 64, "uniform-scaled", seed=1)
        assert np.abs(bank.weights).max() <= 1.0 / 8.0

    def test_determinism(self):
        a = init_classifiers(10, 4, "uniform-scaled", seed=9)
        b = init_classifiers(10, 4, "uniform-scaled", seed=9)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            init_classifiers(4, 4, "gaussian", seed=0)


class TestUpdates:
    def test_full_cancellation(self):
        bank = init_classifiers(3, 2, "uniform-scaled", seed=0)
        w = bank.weights[1].copy()
        apply_classifier_updates(bank, {1: w}, lr=1.0, weight_decay=0.0)
        np.testing.assert_allclose(bank.weights[1], 0.0, atol=1e-7)

    def test_empty_map_no_change(self):
        bank = init_classifiers(3, 2, "uniform-scaled", seed=1)
        before = bank.weights.copy()
        apply_classifier_updates(bank, {}, lr=0.5)
        np.testing.assert_array_equal(bank.weights, before)

    def test_untouched_rows_unchanged(self):
        rng = np.random.default_rng(2)
        bank = init_classifiers(20, 4, "uniform-scaled", seed=3)
        before = bank.weights.copy()
        touched = [2, 7, 11]
        grads = {i: rng.standard_normal(4) for i in touched}
        apply_classifier_updates(bank, grads, lr=0.1, weight_decay=1e-3)
        untouched = [i for i in range(20) if i not in touched]
        np.testing.assert_array_equal(bank.weights[untouched], before[untouched])
        for i in touched:
            assert not np.array_equal(bank.weights[i], before[i])

    def test_matches_dense_sgd_restricted(self):
        rng = np.random.default_rng(4)
        bank = init_classifiers(10, 3, "uniform-scaled", seed=5)
        dense = bank.weights.astype(np.float64).copy()
        ids = [0, 3, 4, 8, 9]
        grads = {i: rng.standard_normal(3) for i in ids}
        lr, wd = 0.2, 1e-3
        apply_classifier_updates(bank, grads, lr, wd)
        for i in ids:
            dense[i] = dense[i] - lr * (np.asarray(grads[i]) + wd * dense[i])
        np.testing.assert_allclose(bank.weights[ids], dense[ids], rtol=1e-5, atol=1e-6)

    def test_non_finite_rejected(self):
        bank = init_classifiers(3, 2, "zeros", seed=0)
        with pytest.raises(NumericalError):
            apply_classifier_updates(bank, {0: np.array([np.nan, 0.0])}, lr=0.1)

    def test_out_of_range_rejected(self):
        bank = init_classifiers(3, 2, "zeros", seed=0)
        with pytest.raises(ConfigError):
            apply_classifier_updates(bank, {7: np.zeros(2)}, lr=0.1)

    def test_array_form_matches_dict_form(self):
        rng = np.random.default_rng(6)
        a = init_classifiers(8, 3, "uniform-scaled", seed=7)
        b = init_classifiers(8, 3, "uniform-scaled", seed=7)
        ids = np.array([1, 4, 6])
        grads = rng.standard_normal((3, 3)).astype(np.float32)
        apply_classifier_updates(b, {int(i): g for i, g in zip(ids, grads)}, 0.1, 1e-3)
        apply_classifier_updates_arrays(a, ids, grads, 0.1, 1e-3)
        np.testing.assert_allclose(a.weights, b.weights, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_update_touches_only_given_rows(seed):
    rng = np.random.default_rng(seed)
    bank = init_classifiers(12, 3, "uniform-scaled", seed=seed)
    before = bank.weights.copy()
    ids = rng.choice(12, size=4, replace=False)
    grads = {int(i): rng.standard_normal(3) for i in ids}
    apply_classifier_updates(bank, grads, lr=0.05)
    mask = np.ones(12, dtype=bool)
    mask[list(grads)] = False
    np.testing.assert_array_equal(bank.weights[mask], before[mask])
