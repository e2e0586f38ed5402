"""Prediction-based value function and exact instance-level Shapley values."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import MultimodalDataset
from .errors import AttributionError
from .learners import ModelCache, losses


@dataclass(frozen=True)
class ShapleyTable:
    """``values[i, j]`` is the Shapley value of modality ``j`` at row ``index_map[i]``."""
    values: np.ndarray
    index_map: np.ndarray

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def column_means(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def summary(self, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)) -> dict:
        """Per-modality mean and quantiles, for marginal-distribution plots."""
        out = {"m": self.m, "p": self.p, "modalities": []}
        for j in range(self.p):
            col = self.values[:, j]
            out["modalities"].append({
                "modality": j,
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=1)) if self.m > 1 else 0.0,
                "quantiles": {f"{q:g}": float(np.quantile(col, q)) for q in quantiles},
            })
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row"] + [f"phi_{j}" for j in range(self.p)])
            for r, vals in zip(self.index_map, self.values):
                w.writerow([int(r)] + [repr(float(v)) for v in vals])

    def summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------- value function

def _check_mask(cache: ModelCache, mask: int):
    if mask not in cache:
        raise AttributionError(f"model cache has no entry for bitmask {mask:#x}")


def value(x, y, mask: int, cache: ModelCache) -> float:
    """Loss reduction of the subset model over the baseline at one observation."""
    if mask == 0:
        return 0.0
    _check_mask(cache, mask)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(y)
    base, _ = losses(cache.task, y, cache.predict_rows(0, x))
    sub, _ = losses(cache.task, y, cache.predict_rows(mask, x))
    return float(base[0] - sub[0])


def loss_matrix(cache: ModelCache, X, y) -> np.ndarray:
    """Losses of every cached model on every row: shape ``(2^p, n_rows)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(y)
    n_masks = 1 << cache.p
    L = np.empty((n_masks, X.shape[0]))
    for mask in range(n_masks):
        _check_mask(cache, mask)
        L[mask], _ = losses(cache.task, y, cache.predict_rows(mask, X))
    return L


def value_matrix(cache: ModelCache, X, y) -> np.ndarray:
    """``V[S, i] = val(x_i, y_i; S)``; row 0 is exactly zero."""
    L = loss_matrix(cache, X, y)
    V = L[0] - L
    V[0] = 0.0
    return V


# ---------------------------------------------------------------- Shapley values

def shapley_weight(p: int, s: int) -> float:
    """``s! (p - s - 1)! / p!`` evaluated through log-gamma."""
    if not 0 <= s <= p - 1:
        raise AttributionError(f"coalition size {s} outside 0..{p - 1}")
    return math.exp(math.lgamma(s + 1) + math.lgamma(p - s) - math.lgamma(p + 1))


@lru_cache(maxsize=None)
def _enumeration_plan(p: int):
    masks = np.arange(1 << p)
    pop = np.array([bin(m).count("1") for m in masks])
    weights = np.array([shapley_weight(p, s) for s in range(p)])
    plan = []
    for j in range(p):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        plan.append((without, without | bit, weights[pop[without]]))
    return plan


def shapley_from_values(V: np.ndarray, p: int) -> np.ndarray:
    """Exact Shapley values from a game table ``V`` of shape ``(2^p, n)``.

    Returns an ``(n, p)`` matrix.
    """
    V = np.asarray(V, dtype=float)
    if V.shape[0] != 1 << p:
        raise AttributionError(f"value table has {V.shape[0]} rows, expected 2^{p}")
    phi = np.empty((V.shape[1], p))
    for j, (without, with_j, w) in enumerate(_enumeration_plan(p)):
        phi[:, j] = w @ (V[with_j] - V[without])
    return phi


def instance_shapley(i: int, j: int, cache: ModelCache, dataset: MultimodalDataset) -> float:
    """Shapley value of modality ``j`` at dataset row ``i``, by direct enumeration."""
    p = dataset.p
    if not 0 <= j < p:
        raise AttributionError(f"modality {j} outside 0..{p - 1}")
    x, y = dataset.X[i], dataset.y[i]
    bit = 1 << j
    total = 0.0
    for mask in range(1 << p):
        if mask & bit:
            continue
        w = shapley_weight(p, bin(mask).count("1"))
        total += w * (value(x, y, mask | bit, cache) - value(x, y, mask, cache))
    return total


def shapley_table(dataset: MultimodalDataset, rows, cache: ModelCache) -> ShapleyTable:
    """Shapley values of every modality at each of ``rows`` (normally the calibration set)."""
    rows = np.asarray(getattr(rows, "I2", rows), dtype=int)
    if cache.p != dataset.p:
        raise AttributionError(f"cache covers p={cache.p} modalities, dataset has {dataset.p}")
    V = value_matrix(cache, dataset.X[rows], dataset.y[rows])
    phi = shapley_from_values(V, dataset.p)
    if not np.all(np.isfinite(phi)):
        raise AttributionError("non-finite Shapley values")
    return ShapleyTable(phi, rows)


def shapley_at(cache: ModelCache, X, y) -> np.ndarray:
    """Shapley rows for arbitrary labeled points (e.g. held-out test rows)."""
    return shapley_from_values(value_matrix(cache, X, y), cache.p)
