import numpy as np
import pytest

from conformal_shapley.data import (CLASSIFICATION, ModalityLayout, MultimodalDataset,
                                    SyntheticConfig, generate_synthetic_regression)


@pytest.fixture(scope="session")
def small_regression():
    ds, truth = generate_synthetic_regression(SyntheticConfig(p=3, d=2, n=120, seed=7))
    return ds, truth


def make_classification(n=200, p=2, d=2, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p * d))
    W = rng.normal(size=(n_classes, p * d)) * 2
    y = np.argmax(X @ W.T + rng.gumbel(size=(n, n_classes)), axis=1)
    return MultimodalDataset(ModalityLayout.uniform(p, d), X, y, CLASSIFICATION, n_classes)


def with_dummy(ds, j):
    """Copy of ``ds`` with modality ``j`` zeroed out."""
    X = np.array(ds.X)
    X[:, ds.layout.columns(j)] = 0.0
    return MultimodalDataset(ds.layout, X, ds.y, ds.task, ds.n_classes)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
