"""Per-subset learners, the no-modality baseline, and losses."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CLASSIFICATION, REGRESSION, MultimodalDataset
from .errors import LearnerError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
MAX_MODALITIES = 15


@dataclass(frozen=True)
class LearnerSpec:
    """Learning algorithm applied to every modality subset.

    ``kind`` is one of ``"ols"``, ``"ridge"`` (uses ``lam``) or ``"softmax"``
    (uses ``lr``, ``epochs`` and ``l2``).
    """
    kind: str = "ols"
    lam: float = 0.0
    lr: float = 0.1
    epochs: int = 500
    l2: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("ols", "ridge", "softmax"):
            raise LearnerError(f"unknown learner kind {self.kind!r}")
        if self.kind == "ridge" and self.lam < 0:
            raise LearnerError("ridge lambda must be >= 0")
        if self.kind == "softmax" and (self.lr <= 0 or self.epochs < 1):
            raise LearnerError("softmax needs lr > 0 and epochs >= 1")

    def supports(self, task: str) -> bool:
        return (task == CLASSIFICATION) == (self.kind == "softmax")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Predictor:
    mask: int
    task: str
    intercept: np.ndarray   # scalar array (regression) or (C,) bias
    weights: np.ndarray     # (k,) or (C, k)

    @property
    def width(self) -> int:
        return self.weights.shape[-1]


@dataclass(frozen=True)
class BaselinePredictor:
    task: str
    value: np.ndarray  # scalar array (regression) or (C,) probabilities

    mask = 0
    width = 0


# ---------------------------------------------------------------- fitting

def fit_baseline(y, task: str = REGRESSION, n_classes: Optional[int] = None) -> BaselinePredictor:
    """Empirical-loss-minimizing constant (mean, or Laplace-smoothed class frequencies)."""
    y = np.asarray(y)
    if y.size == 0:
        raise LearnerError("baseline needs at least one training label")
    if task == REGRESSION:
        return BaselinePredictor(task, np.array(float(np.mean(y))))
    counts = np.bincount(y.astype(int), minlength=n_classes).astype(float)
    return BaselinePredictor(task, (counts + 1.0) / (len(y) + n_classes))


def _fit_linear(X, y, lam, ridge):
    n, k = X.shape
    # identically-zero columns carry no information; pin their weight to 0
    live = np.flatnonzero(np.any(X != 0.0, axis=0))
    Z = np.column_stack([np.ones(n), X[:, live]])
    G = Z.T @ Z
    if lam > 0:
        G[1:, 1:] += lam * np.eye(len(live))
    rhs = Z.T @ y
    if not ridge or lam == 0:
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 1e-12 * max(ev[-1], 1.0):
            raise LearnerError("normal-equations matrix is singular under OLS; "
                               "use a ridge learner (kind='ridge', lam>0)")
    try:
        coef = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise LearnerError(f"normal equations could not be solved: {exc}") from exc
    w = np.zeros(k)
    w[live] = coef[1:]
    return np.array(coef[0]), w


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fit_softmax(X, y, n_classes, spec: LearnerSpec):
    n, k = X.shape
    W = np.zeros((n_classes, k))
    b = np.zeros(n_classes)
    Y = np.eye(n_classes)[y]
    prev = np.inf
    rising = 0
    for epoch in range(spec.epochs):
        P = _softmax(X @ W.T + b)
        obj = -np.mean(np.log(np.maximum(P[np.arange(n), y], PROB_FLOOR))) \
            + 0.5 * spec.l2 * np.sum(W * W)
        rising = rising + 1 if obj > prev else 0
        if rising >= 5:
            raise LearnerError(f"softmax diverging: objective rose 5 epochs in a row "
                               f"(epoch {epoch}, objective {obj:.6g}, lr {spec.lr}); "
                               f"lower the learning rate")
        prev = obj
        G = (P - Y) / n
        W -= spec.lr * (G.T @ X + spec.l2 * W)
        b -= spec.lr * G.sum(axis=0)
    if not np.all(np.isfinite(W)):
        raise LearnerError("softmax weights became non-finite")
    return b, W


def fit_subset_model(dataset: MultimodalDataset, I1, mask: int, spec: LearnerSpec) -> Predictor:
    """Fit ``spec`` on training rows ``I1`` restricted to the modalities in ``mask``."""
    if mask == 0:
        raise LearnerError("the empty subset is served by fit_baseline")
    if mask >> dataset.p:
        raise LearnerError(f"bitmask {mask:#x} references modalities beyond p={dataset.p}")
    if not spec.supports(dataset.task):
        raise LearnerError(f"learner {spec.kind!r} does not support task {dataset.task!r}")
    I1 = np.asarray(I1, dtype=int)
    X = dataset.X[np.ix_(I1, dataset.layout.subset_columns(mask))]
    y = dataset.y[I1]
    if spec.kind == "softmax":
        b, W = _fit_softmax(X, y, dataset.n_classes, spec)
    else:
        b, W = _fit_linear(X, y, spec.lam if spec.kind == "ridge" else 0.0,
                           spec.kind == "ridge")
    return Predictor(mask, dataset.task, b, W)


def predict(model, x_S) -> np.ndarray:
    """Predictions for rows of ``x_S`` (already restricted to the model's modalities).

    Accepts a single row or a matrix. Regression returns reals, classification
    returns probability rows.
    """
    x_S = np.asarray(x_S, dtype=float)
    single = x_S.ndim == 1
    X = np.atleast_2d(x_S)
    if isinstance(model, BaselinePredictor):
        out = np.broadcast_to(model.value, (X.shape[0],) + model.value.shape).copy()
        return out[0] if single else out
    if X.shape[1] != model.width:
        raise LearnerError(f"feature width {X.shape[1]} does not match predictor "
                           f"width {model.width} (mask {model.mask:#x})")
    if model.task == REGRESSION:
        out = model.intercept + X @ model.weights
    else:
        out = _softmax(X @ model.weights.T + model.intercept)
        out = np.maximum(out, PROB_FLOOR)
        out /= out.sum(axis=1, keepdims=True)
        # renormalizing can push floored entries a hair below the floor
        out = np.maximum(out, PROB_FLOOR)
    return out[0] if single else out


def losses(task: str, y, pred):
    """Vectorized loss. Returns ``(values, n_clamped)``."""
    y = np.asarray(y)
    pred = np.asarray(pred, dtype=float)
    if task == REGRESSION:
        return (y - pred) ** 2, 0
    pred = np.atleast_2d(pred)
    yi = np.atleast_1d(y).astype(int)
    if pred.shape[0] == 1 and len(yi) > 1:
        pred = np.broadcast_to(pred, (len(yi), pred.shape[1]))
    p_true = pred[np.arange(len(yi)), yi]
    clamped = p_true < PROB_FLOOR
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.debug("clamped %d probabilities to %g before log", n_clamped, PROB_FLOOR)
    return -np.log(np.maximum(p_true, PROB_FLOOR)), n_clamped


def loss(task: str, y, prediction) -> float:
    """Squared error (regression) or negative log true-class probability."""
    vals, _ = losses(task, np.atleast_1d(y), prediction)
    return float(np.asarray(vals).ravel()[0])


# ---------------------------------------------------------------- model cache

@dataclass
class ModelCache:
    """One fitted predictor per modality bitmask; key 0 holds the baseline."""
    p: int
    task: str
    spec: LearnerSpec
    models: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __getitem__(self, mask: int):
        try:
            return self.models[mask]
        except KeyError:
            raise LearnerError(f"no cached model for bitmask {mask:#x}") from None

    def __contains__(self, mask):
        return mask in self.models

    def __len__(self):
        return len(self.models)

    def predict_rows(self, mask: int, X) -> np.ndarray:
        """Predictions of the model for ``mask`` on full-width rows ``X``."""
        model = self[mask]
        X = np.atleast_2d(X)
        if mask == 0:
            return predict(model, X[:, :0])
        return predict(model, X[:, self._cols[mask]])

    def bind_layout(self, layout):
        self._cols = {mask: layout.subset_columns(mask) for mask in range(1 << self.p)}
        return self

    def save(self, directory, seed=None) -> None:
        """Write one JSON file per bitmask plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for mask, model in sorted(self.models.items()):
            if mask == 0:
                rec = {"mask": 0, "task": model.task, "baseline": np.asarray(model.value).tolist()}
            else:
                rec = {"mask": mask, "task": model.task,
                       "intercept": np.asarray(model.intercept).tolist(),
                       "weights": np.asarray(model.weights).tolist()}
            (d / f"{mask:04x}.json").write_text(json.dumps(rec, sort_keys=True) + "\n",
                                                encoding="utf-8")
        manifest = {"p": self.p, "task": self.task, "spec": self.spec.to_dict(),
                    "seed": seed, "data_fingerprint": self.fingerprint,
                    "entries": [f"{m:04x}" for m in sorted(self.models)]}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")

    @classmethod
    def load(cls, directory, layout) -> "ModelCache":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        cache = cls(manifest["p"], manifest["task"], LearnerSpec(**manifest["spec"]),
                    fingerprint=manifest["data_fingerprint"])
        for key in manifest["entries"]:
            rec = json.loads((d / f"{key}.json").read_text(encoding="utf-8"))
            if rec["mask"] == 0:
                cache.models[0] = BaselinePredictor(rec["task"], np.array(rec["baseline"]))
            else:
                cache.models[rec["mask"]] = Predictor(rec["mask"], rec["task"],
                                                      np.array(rec["intercept"]),
                                                      np.array(rec["weights"]))
        return cache.bind_layout(layout)


def train_all_subsets(dataset: MultimodalDataset, I1, spec: LearnerSpec,
                      max_modalities: int = MAX_MODALITIES) -> ModelCache:
    """Fit the baseline and one model per non-empty modality subset."""
    p = dataset.p
    if p > max_modalities:
        raise LearnerError(f"p={p} exceeds the cap of {max_modalities}: exact enumeration "
                           f"fits 2^p = {2 ** p} models")
    I1 = np.asarray(I1, dtype=int)
    cache = ModelCache(p, dataset.task, spec, fingerprint=dataset.fingerprint())
    cache.models[0] = fit_baseline(dataset.y[I1], dataset.task, dataset.n_classes)
    for mask in range(1, 1 << p):
        try:
            cache.models[mask] = fit_subset_model(dataset, I1, mask, spec)
        except LearnerError as exc:
            raise LearnerError(f"subset {mask:#x}: {exc}") from exc
    return cache.bind_layout(dataset.layout)
