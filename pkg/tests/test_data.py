import json

import numpy as np
import pytest

from conformal_shapley.data import (CLASSIFICATION, ModalityLayout, MultimodalDataset,
                                    SyntheticConfig, build_covariance, covariance_components,
                                    generate_synthetic_regression, holdout, layout_sidecar,
                                    load_dataset, save_dataset, split)
from conformal_shapley.errors import DataError
from conformal_shapley.rng import make_rng

from conftest import make_classification


def test_layout_offsets_and_columns():
    lay = ModalityLayout((2, 3, 1))
    assert lay.p == 3 and lay.width == 6
    np.testing.assert_array_equal(lay.columns(1), [2, 3, 4])
    np.testing.assert_array_equal(lay.subset_columns(0b101), [0, 1, 5])
    assert lay.column_names()[:3] == ["m0_0", "m0_1", "m1_0"]


@pytest.mark.parametrize("dims", [(), (0, 2), (2, -1)])
def test_layout_rejects_bad_dims(dims):
    with pytest.raises(DataError):
        ModalityLayout(dims)


def test_dataset_validates_and_is_readonly():
    lay = ModalityLayout.uniform(2, 2)
    with pytest.raises(DataError):
        MultimodalDataset(lay, np.zeros((5, 3)), np.zeros(5), "regression")
    with pytest.raises(DataError):
        MultimodalDataset(lay, np.zeros((5, 4)), np.zeros(4), "regression")
    with pytest.raises(DataError):
        MultimodalDataset(lay, np.zeros((3, 4)), np.array([0, 1, 3]), CLASSIFICATION, 3)
    ds = MultimodalDataset(lay, np.ones((4, 4)), np.zeros(4), "regression")
    with pytest.raises(ValueError):
        ds.X[0, 0] = 2.0


def test_covariance_components_match_construction():
    # oracle: rebuild the components by hand from the same stream
    p, d = 3, 2
    A, B = covariance_components(p, d, make_rng(5, "x"))
    rng = make_rng(5, "x")
    G = rng.uniform(-1, 1, size=(6, 6))
    M = G @ G.T
    M = M / np.abs(M).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(B, (M + M.T) / 2, rtol=0, atol=1e-15)
    for j in range(p):
        G = rng.uniform(-1, 1, size=(d, d))
        M = G @ G.T
        M = M / np.abs(M).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(A[2 * j:2 * j + 2, 2 * j:2 * j + 2], (M + M.T) / 2, atol=1e-15)
    off = A.copy()
    for j in range(p):
        off[2 * j:2 * j + 2, 2 * j:2 * j + 2] = 0
    assert not off.any()


@pytest.mark.parametrize("eps", [0.0, 0.3, 1.0])
def test_covariance_symmetric_and_mixes(eps):
    S = build_covariance(4, 3, eps, 11)
    np.testing.assert_allclose(S, S.T, atol=0)
    A, B = covariance_components(4, 3, make_rng(11, "covariance"))
    np.testing.assert_allclose(S, (1 - eps) * A + eps * B, atol=1e-15)


def test_covariance_rejects_eps():
    with pytest.raises(DataError):
        build_covariance(2, 2, 1.5, 0)


def test_synthetic_shapes_ranges_and_determinism():
    cfg = SyntheticConfig(p=10, d=3, n=1000, seed=4)
    ds, truth = generate_synthetic_regression(cfg)
    assert ds.X.shape == (1000, 30) and ds.p == 10
    assert np.all(np.abs(truth["beta"]) <= 1) and abs(truth["alpha"]) <= 1
    ds2, _ = generate_synthetic_regression(cfg)
    np.testing.assert_array_equal(ds.X, ds2.X)
    np.testing.assert_array_equal(ds.y, ds2.y)
    ds3, _ = generate_synthetic_regression(SyntheticConfig(p=10, d=3, n=1000, seed=5))
    assert not np.array_equal(ds.y, ds3.y)


def test_synthetic_response_model():
    ds, t = generate_synthetic_regression(SyntheticConfig(p=2, d=2, n=50, noise_sd=0.0, seed=1))
    np.testing.assert_allclose(ds.y, ds.X @ t["beta"] + t["alpha"], atol=1e-12)


def test_synthetic_sample_covariance():
    ds, t = generate_synthetic_regression(SyntheticConfig(p=2, d=2, n=200000, seed=3))
    np.testing.assert_allclose(np.cov(ds.X.T), t["Sigma"] + t["jitter"] * np.eye(4), atol=0.01)


def test_split_halves():
    s = split(20, 3)
    assert s.m == 10
    np.testing.assert_array_equal(np.sort(np.concatenate([s.I1, s.I2])), np.arange(20))
    assert np.all(np.diff(s.I1) > 0)
    s2 = split(20, 3)
    np.testing.assert_array_equal(s.I1, s2.I1)
    with pytest.raises(DataError, match="odd"):
        split(21, 0)
    with pytest.raises(DataError):
        split(2, 0)


def test_holdout():
    fit, test = holdout(50, 10, 0)
    assert len(test) == 10 and len(fit) == 40
    assert not set(fit) & set(test)


def test_csv_roundtrip_exact(tmp_path, small_regression):
    ds, _ = small_regression
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.layout == ds.layout
    assert back.fingerprint() == ds.fingerprint()
    meta = json.loads(layout_sidecar(path).read_text())
    assert meta["dims"] == [2, 2, 2]


def test_csv_roundtrip_classification(tmp_path):
    ds = make_classification(n=30)
    save_dataset(ds, tmp_path / "c.csv")
    back = load_dataset(tmp_path / "c.csv")
    assert back.task == CLASSIFICATION and back.n_classes == 3
    np.testing.assert_array_equal(back.y, ds.y)


def test_load_reports_line(tmp_path, small_regression):
    ds, _ = small_regression
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3] + ",1.0"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 4"):
        load_dataset(path)


def test_split_membership_frequency():
    counts = np.zeros(1000)
    for seed in range(200):
        counts[split(1000, seed).I1] += 1
    freq = counts / 200
    assert abs(freq.mean() - 0.5) < 1e-12
    # each index is a fair coin over 200 draws: sd 0.0354, and 0.5 +- 0.05 is a
    # 1.41-sigma band (expected coverage 0.84)
    assert abs(freq.std() / np.sqrt(0.25 / 200) - 1) < 0.1
    assert np.mean(np.abs(freq - 0.5) <= 0.05) > 0.8


@pytest.mark.parametrize("n", [4, 6, 10, 2000])
def test_split_partition_all_sizes(n):
    s = split(n, n)
    assert len(s.I1) == len(s.I2) == n // 2
    np.testing.assert_array_equal(np.union1d(s.I1, s.I2), np.arange(n))


def test_covariance_endpoints():
    A, B = covariance_components(3, 2, make_rng(8, "covariance"))
    np.testing.assert_array_equal(build_covariance(3, 2, 0.0, 8), A)
    np.testing.assert_array_equal(build_covariance(3, 2, 1.0, 8), B)


def test_near_noiseless_generator():
    ds, t = generate_synthetic_regression(SyntheticConfig(p=3, d=2, n=200, noise_sd=1e-12, seed=0))
    assert np.max(np.abs(ds.y - ds.X @ t["beta"] - t["alpha"])) < 1e-6


def test_load_small_csv_and_width_error(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,b,y\n1,2,3\n4,5,6\n7,8,9\n0,0,1\n")
    ds = load_dataset(path, layout=ModalityLayout((1, 1)), task="regression")
    assert ds.n == 4 and ds.X.shape == (4, 2)
    np.testing.assert_array_equal(ds.y, [3, 6, 9, 1])
    with pytest.raises(DataError, match="columns"):
        load_dataset(path, layout=ModalityLayout((2, 2)), task="regression")


def test_classification_label_range(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("a,y\n0.5,0\n0.1,4\n")
    with pytest.raises(DataError, match="label"):
        load_dataset(path, layout=ModalityLayout((1,)), task=CLASSIFICATION, n_classes=3)
