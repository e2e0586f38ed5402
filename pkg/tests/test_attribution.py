import itertools
import math

import numpy as np
import pytest

from conformal_shapley.attribution import (instance_shapley, shapley_from_values, shapley_table,
                                           shapley_weight, value, value_matrix)
from conformal_shapley.data import split
from conformal_shapley.errors import AttributionError
from conformal_shapley.learners import LearnerSpec, train_all_subsets

from conftest import make_classification, with_dummy


def permutation_shapley(V, p):
    """Average marginal contribution over all p! orderings."""
    phi = np.zeros((V.shape[1], p))
    for order in itertools.permutations(range(p)):
        mask = 0
        for j in order:
            phi[:, j] += V[mask | (1 << j)] - V[mask]
            mask |= 1 << j
    return phi / math.factorial(p)


def game(p, f):
    return np.array([[f(mask)] for mask in range(1 << p)], dtype=float)


@pytest.mark.parametrize("p", range(1, 13))
def test_weights_normalize(p):
    total = sum(math.comb(p - 1, s) * shapley_weight(p, s) for s in range(p))
    assert abs(total - 1.0) < 1e-12


def test_weight_values():
    assert shapley_weight(3, 0) == pytest.approx(1 / 3, rel=1e-15)
    assert shapley_weight(3, 1) == pytest.approx(1 / 6, rel=1e-15)
    with pytest.raises(AttributionError):
        shapley_weight(3, 3)


def test_majority_game():
    V = game(3, lambda m: float(bin(m).count("1") >= 2))
    np.testing.assert_allclose(shapley_from_values(V, 3), [[1 / 3] * 3], atol=1e-15)


def test_glove_game():
    # player 0 owns a left glove, players 1 and 2 own right gloves
    V = game(3, lambda m: min(m & 1, bin(m >> 1).count("1")))
    np.testing.assert_allclose(shapley_from_values(V, 3), [[2 / 3, 1 / 6, 1 / 6]], atol=1e-15)


def test_additive_game():
    w = np.array([0.3, -1.2, 2.0, 0.5])
    V = game(4, lambda m: sum(w[j] for j in range(4) if m >> j & 1))
    np.testing.assert_allclose(shapley_from_values(V, 4)[0], w, atol=1e-14)


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5])
def test_matches_permutation_oracle_random_games(p):
    rng = np.random.default_rng(p)
    V = rng.normal(size=(1 << p, 6))
    V[0] = 0
    np.testing.assert_allclose(shapley_from_values(V, p), permutation_shapley(V, p),
                               atol=1e-12)


def test_bad_table_shape():
    with pytest.raises(AttributionError):
        shapley_from_values(np.zeros((7, 2)), 3)


@pytest.fixture(scope="module")
def fitted(small_regression):
    ds = with_dummy(small_regression[0], 2)
    s = split(ds.n, 0)
    return ds, s, train_all_subsets(ds, s.I1, LearnerSpec())


def test_value_function(fitted):
    ds, s, cache = fitted
    i = s.I2[0]
    x, y = ds.X[i], ds.y[i]
    base = (y - float(cache[0].value)) ** 2
    pred = cache.predict_rows(0b011, x)[0]
    assert value(x, y, 0b011, cache) == pytest.approx(base - (y - pred) ** 2, rel=1e-12)
    assert value(x, y, 0, cache) == 0.0


def test_efficiency_dummy_and_enumeration(fitted):
    ds, s, cache = fitted
    table = shapley_table(ds, s, cache)
    assert table.values.shape == (s.m, 3)
    full = value_matrix(cache, ds.X[s.I2], ds.y[s.I2])[7]
    np.testing.assert_allclose(table.values.sum(1), full, atol=1e-8)
    np.testing.assert_allclose(table.values[:, 2], 0.0, atol=1e-8)
    for r in range(3):
        i = s.I2[r]
        for j in range(3):
            assert instance_shapley(i, j, cache, ds) == pytest.approx(table.values[r, j],
                                                                       abs=1e-10)


def test_classification_efficiency():
    ds = make_classification(n=120, p=3, d=1)
    s = split(ds.n, 1)
    cache = train_all_subsets(ds, s.I1, LearnerSpec("softmax", epochs=200))
    table = shapley_table(ds, s.I2, cache)
    full = value_matrix(cache, ds.X[s.I2], ds.y[s.I2])[7]
    np.testing.assert_allclose(table.values.sum(1), full, atol=1e-10)


def test_table_outputs(tmp_path, fitted):
    ds, s, cache = fitted
    table = shapley_table(ds, s, cache)
    table.to_csv(tmp_path / "t.csv")
    back = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(back[:, 1:], table.values)
    summ = table.summary()
    assert summ["modalities"][0]["mean"] == pytest.approx(table.values[:, 0].mean())


def test_value_hand_example():
    from conformal_shapley.learners import BaselinePredictor, ModelCache, Predictor
    from conformal_shapley.data import ModalityLayout
    cache = ModelCache(1, "regression", None)
    cache.models[0] = BaselinePredictor("regression", np.array(2.0))
    cache.models[1] = Predictor(1, "regression", np.array(3.0), np.zeros(1))
    cache.bind_layout(ModalityLayout((1,)))
    assert value(np.array([0.7]), 3.0, 1, cache) == 1.0
    # p = 1: the only coalition is the empty one
    assert shapley_from_values(value_matrix(cache, [[0.7]], [3.0]), 1)[0, 0] == 1.0


def test_value_recompute_oracle(fitted):
    ds, s, cache = fitted
    rng = np.random.default_rng(0)
    for _ in range(100):
        i, S = int(rng.choice(s.I2)), int(rng.integers(0, 8))
        cols = ds.layout.subset_columns(S)
        if S:
            m = cache[S]
            pred = float(m.intercept) + ds.X[i, cols] @ m.weights
        else:
            pred = float(cache[0].value)
        base = float(cache[0].value)
        expect = (ds.y[i] - base) ** 2 - (ds.y[i] - pred) ** 2
        assert value(ds.X[i], ds.y[i], S, cache) == pytest.approx(expect, abs=1e-10)


def test_symmetry_duplicate_modalities(small_regression):
    from conformal_shapley.data import ModalityLayout, MultimodalDataset
    ds, _ = small_regression
    X = np.column_stack([ds.X[:, :2], ds.X[:, :2], ds.X[:, 4:]])
    dup = MultimodalDataset(ModalityLayout((2, 2, 2)), X, ds.y, "regression")
    s = split(dup.n, 0)
    cache = train_all_subsets(dup, s.I1, LearnerSpec("ridge", lam=1.0))
    phi = shapley_table(dup, s, cache).values
    np.testing.assert_allclose(phi[:, 0], phi[:, 1], atol=1e-6)


def test_linearity_in_game():
    V = np.random.default_rng(2).normal(size=(16, 5))
    V[0] = 0
    # a power-of-two scale is exact in floating point
    np.testing.assert_array_equal(shapley_from_values(4.0 * V, 4), 4.0 * shapley_from_values(V, 4))
    np.testing.assert_allclose(shapley_from_values(3.5 * V, 4), 3.5 * shapley_from_values(V, 4),
                               rtol=1e-13, atol=1e-15)


def test_column_means_recompute(fitted):
    ds, s, cache = fitted
    table = shapley_table(ds, s, cache)
    means = np.array([np.mean([instance_shapley(i, j, cache, ds) for i in s.I2])
                      for j in range(3)])
    np.testing.assert_allclose(table.column_means(), means, atol=1e-10)
    one = shapley_table(ds, s.I2[:1], cache)
    assert one.values.shape == (1, 3)
