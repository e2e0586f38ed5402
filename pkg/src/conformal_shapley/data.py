"""Multimodal data model, splitting, CSV ingestion and the synthetic benchmark."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .rng import make_rng

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class ModalityLayout:
    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 1:
            raise DataError("layout needs at least one modality")
        if any(d < 1 for d in dims):
            raise DataError(f"every modality dimension must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def p(self) -> int:
        return len(self.dims)

    @property
    def offsets(self) -> tuple:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.dims)[:-1]]))

    @property
    def width(self) -> int:
        return int(sum(self.dims))

    def columns(self, j: int) -> np.ndarray:
        start = self.offsets[j]
        return np.arange(start, start + self.dims[j])

    def subset_columns(self, mask: int) -> np.ndarray:
        """Flattened column indices of the modalities in bitmask ``mask``."""
        cols = [self.columns(j) for j in range(self.p) if mask >> j & 1]
        if not cols:
            return np.empty(0, dtype=int)
        return np.concatenate(cols)

    def column_names(self) -> list:
        return [f"m{j}_{k}" for j in range(self.p) for k in range(self.dims[j])]

    @classmethod
    def uniform(cls, p: int, d: int) -> "ModalityLayout":
        return cls(tuple([d] * p))


@dataclass(frozen=True)
class MultimodalDataset:
    layout: ModalityLayout
    X: np.ndarray
    y: np.ndarray
    task: str = REGRESSION
    n_classes: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError("X must be a 2-D matrix")
        if X.shape[1] != self.layout.width:
            raise DataError(
                f"X has {X.shape[1]} columns but the layout requires {self.layout.width}")
        if self.task == REGRESSION:
            y = np.asarray(self.y, dtype=float)
        elif self.task == CLASSIFICATION:
            if self.n_classes is None or self.n_classes < 2:
                raise DataError("classification needs n_classes >= 2")
            y_raw = np.asarray(self.y)
            y = y_raw.astype(int)
            if not np.array_equal(y, y_raw) or y.min(initial=0) < 0 \
                    or y.max(initial=0) >= self.n_classes:
                raise DataError(f"class labels must lie in 0..{self.n_classes - 1}")
        else:
            raise DataError(f"unknown task {self.task!r}")
        if y.ndim != 1 or len(y) != X.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {len(y)} entries")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.layout.p

    def subset(self, rows) -> "MultimodalDataset":
        rows = np.asarray(rows, dtype=int)
        return MultimodalDataset(self.layout, self.X[rows], self.y[rows], self.task,
                                 self.n_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"dims": self.layout.dims, "task": self.task,
                             "classes": self.n_classes}).encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitIndices:
    I1: np.ndarray
    I2: np.ndarray

    @property
    def m(self) -> int:
        return len(self.I2)


@dataclass(frozen=True)
class SyntheticConfig:
    p: int = 10
    d: int = 3
    n: int = 1000
    epsilon: float = 0.0
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 1 or self.d < 1:
            raise DataError("p and d must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise DataError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.n < 4:
            raise DataError("n must be >= 4")
        if not self.noise_sd >= 0:
            raise DataError("noise_sd must be >= 0")


# ---------------------------------------------------------------- file I/O

def layout_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".layout.json")


def save_dataset(dataset: MultimodalDataset, path) -> None:
    """Write ``dataset`` as CSV plus a JSON layout sidecar."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset.layout.column_names() + ["y"])
        for xi, yi in zip(dataset.X, dataset.y):
            # repr round-trips binary64 exactly
            w.writerow([repr(float(v)) for v in xi] + [repr(yi.item())])
    meta = {"p": dataset.p, "dims": list(dataset.layout.dims), "task": dataset.task}
    if dataset.task == CLASSIFICATION:
        meta["classes"] = dataset.n_classes
    layout_sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")


def read_layout(path):
    """Read a layout sidecar; returns ``(layout, task, n_classes)``."""
    try:
        meta = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read layout sidecar {path}: {exc}") from exc
    layout = ModalityLayout(tuple(meta["dims"]))
    if "p" in meta and meta["p"] != layout.p:
        raise DataError(f"sidecar p={meta['p']} disagrees with dims {layout.dims}")
    return layout, meta.get("task", REGRESSION), meta.get("classes")


def load_dataset(path, layout: Optional[ModalityLayout] = None, task: Optional[str] = None,
                 n_classes: Optional[int] = None) -> MultimodalDataset:
    """Read a CSV written by :func:`save_dataset` (or any CSV with the same shape).

    The file must have a header row; columns are the flattened modality
    features followed by a single response column. When ``layout`` is
    omitted it is read from the ``<stem>.layout.json`` sidecar.
    """
    path = Path(path)
    if layout is None:
        layout, side_task, side_classes = read_layout(layout_sidecar(path))
        task = task or side_task
        n_classes = n_classes if n_classes is not None else side_classes
    task = task or REGRESSION
    ncol = layout.width + 1
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if len(header) != ncol:
            raise DataError(f"{path}, line 1: header has {len(header)} columns, "
                            f"layout requires {ncol}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != ncol:
                raise DataError(f"{path}, line {lineno}: expected {ncol} columns, "
                                f"found {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}, line {lineno}: non-numeric cell ({exc})") from exc
    arr = np.array(rows, dtype=float).reshape(-1, ncol)
    y = arr[:, -1]
    if task == CLASSIFICATION:
        if np.any(y != np.round(y)) or np.any(y < 0) or \
                (n_classes is not None and np.any(y >= n_classes)):
            raise DataError(f"{path}: class label outside 0..{(n_classes or 0) - 1}")
        y = y.astype(int)
    return MultimodalDataset(layout, arr[:, :-1], y, task, n_classes)


# ---------------------------------------------------------------- splitting

def split(n: int, seed) -> SplitIndices:
    """Uniformly random partition of ``range(n)`` into two sorted halves."""
    if n < 4:
        raise DataError(f"need n >= 4 to split, got {n}")
    if n % 2:
        raise DataError(f"n={n} is odd; drop one row so both halves have equal size")
    perm = make_rng(seed, "split").permutation(n)
    half = n // 2
    return SplitIndices(np.sort(perm[:half]), np.sort(perm[half:]))


def holdout(n: int, n_test: int, seed):
    """Seeded partition into (fit rows, test rows), both sorted."""
    if not 0 < n_test < n:
        raise DataError(f"n_test must lie in 1..{n - 1}, got {n_test}")
    perm = make_rng(seed, "holdout").permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------- synthetic

def _normalized_gram(k: int, rng) -> np.ndarray:
    G = rng.uniform(-1.0, 1.0, size=(k, k))
    M = G @ G.T
    M = M / np.abs(M).sum(axis=1, keepdims=True)
    return 0.5 * (M + M.T)


def covariance_components(p: int, d: int, rng):
    """Draw the dense component B and block-diagonal component A (in that order)."""
    if p < 1 or d < 1:
        raise DataError("p and d must be >= 1")
    B = _normalized_gram(p * d, rng)
    A = np.zeros((p * d, p * d))
    for j in range(p):
        A[j * d:(j + 1) * d, j * d:(j + 1) * d] = _normalized_gram(d, rng)
    return A, B


def build_covariance(p: int, d: int, epsilon: float, rng) -> np.ndarray:
    """Cross-modality covariance ``(1 - epsilon) A + epsilon B``."""
    if not 0.0 <= epsilon <= 1.0:
        raise DataError(f"epsilon must lie in [0, 1], got {epsilon}")
    A, B = covariance_components(p, d, make_rng(rng, "covariance"))
    return (1.0 - epsilon) * A + epsilon * B


def generate_synthetic_regression(config: SyntheticConfig):
    """Sample ``X ~ N(0, Sigma)`` and ``y = X beta + alpha + noise``.

    Returns ``(dataset, truth)`` where ``truth`` holds ``beta``, ``alpha``,
    ``Sigma`` and the diagonal ``jitter`` added before factorization.
    """
    rng = make_rng(config.seed, "synthetic")
    p, d = config.p, config.d
    Sigma = build_covariance(p, d, config.epsilon, rng)
    lam_min = float(np.linalg.eigvalsh(Sigma)[0])
    jitter = max(0.0, -lam_min) + 1e-8
    try:
        L = np.linalg.cholesky(Sigma + jitter * np.eye(p * d))
    except np.linalg.LinAlgError as exc:
        raise DataError(f"covariance not positive definite after jitter {jitter:g}") from exc
    beta = rng.uniform(-1.0, 1.0, size=p * d)
    alpha = float(rng.uniform(-1.0, 1.0))
    X = rng.standard_normal((config.n, p * d)) @ L.T
    y = X @ beta + alpha + config.noise_sd * rng.standard_normal(config.n)
    dataset = MultimodalDataset(ModalityLayout.uniform(p, d), X, y, REGRESSION)
    truth = {"beta": beta, "alpha": alpha, "Sigma": Sigma, "jitter": jitter}
    return dataset, truth
