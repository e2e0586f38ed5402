"""Conformal Shapley intervals, modality selection and subgroup t-tests."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import attribution
from .data import CLASSIFICATION, REGRESSION, MultimodalDataset, split
from .errors import ConformalShapleyError, StageError
from .learners import LearnerSpec, MAX_MODALITIES, ModelCache, losses, train_all_subsets
from .quantile import (DEFAULT_GRID, KernelBasis, KernelSpec, QuantileModel,
                       cross_validate_lambdas, evaluate_quantile, fit_feature_map,
                       fit_quantile, impute_test_point, numerical_rank)
from .rng import derive_seed
from .studentt import student_t_sf

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConformalConfig:
    """Settings for the interval pipeline.

    ``q`` is the selection cap that also sets the interval levels
    ``alpha / (2q)`` and ``1 - alpha / (2q)``; ``None`` means ``q = p``.
    ``d_omega=None`` picks ``min(dims[j], 2, rank)`` per modality.
    ``lambda_policy`` is ``"cv"`` (search ``lambda_grid``) or ``"fixed"``.
    ``cv_scope="level"`` cross-validates every (modality, level) pair;
    ``"modality"`` cross-validates once per modality at ``1 - alpha/2`` and
    reuses the pair at every level (much cheaper along a selection path).
    """
    alpha: float = 0.1
    q: Optional[int] = None
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    d_omega: object = None
    lambda_policy: str = "cv"
    lambda_grid: tuple = DEFAULT_GRID
    lambda1: float = 0.01
    lambda2: float = 0.01
    folds: int = 5
    cv_scope: str = "level"
    test_mode: str = "impute"
    seed: int = 0
    solver: str = "newton"
    max_modalities: int = MAX_MODALITIES

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConformalShapleyError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.q is not None and self.q < 1:
            raise ConformalShapleyError("q must be >= 1")
        if self.lambda_policy not in ("cv", "fixed"):
            raise ConformalShapleyError(f"unknown lambda policy {self.lambda_policy!r}")
        if self.cv_scope not in ("level", "modality"):
            raise ConformalShapleyError(f"unknown cv scope {self.cv_scope!r}")
        if self.test_mode not in ("omit", "impute"):
            raise ConformalShapleyError(f"unknown test mode {self.test_mode!r}")

    def levels(self, p: int, q: Optional[int] = None):
        q = q or self.q or p
        if not 1 <= q <= p:
            raise ConformalShapleyError(f"q={q} outside 1..{p}")
        lo = self.alpha / (2 * q)
        if not 0.0 < lo < 0.5:
            raise ConformalShapleyError(f"alpha/(2q) = {lo} outside (0, 0.5)")
        return lo, 1.0 - lo


@dataclass(frozen=True)
class ModalityInterval:
    modality: int
    lo: float
    hi: float
    levels: tuple
    crossing_repaired: bool = False

    def contains(self, value) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {"modality": self.modality, "lo": self.lo, "hi": self.hi,
                "levels": list(self.levels), "crossing_repaired": self.crossing_repaired}


@dataclass(frozen=True)
class SelectionResult:
    selected: tuple
    scores: np.ndarray
    threshold: float

    @property
    def mask(self) -> int:
        return sum(1 << j for j in self.selected)

    def to_dict(self) -> dict:
        return {"selected": list(self.selected), "scores": [float(s) for s in self.scores],
                "threshold": self.threshold}


@dataclass(frozen=True)
class HypothesisResult:
    modality: int
    subgroup: dict
    mean: float
    sd: float
    t_stat: float
    df: int
    p_value: float
    m: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"modality": self.modality, "subgroup": self.subgroup, "mean": self.mean,
                "sd": self.sd, "t_stat": self.t_stat, "df": self.df, "m": self.m,
                "p_value": self.p_value, "degenerate": self.degenerate}


# ---------------------------------------------------------------- selection

def select_modalities(upper_scores, q: int) -> SelectionResult:
    """Keep up to ``q`` modalities whose upper score reaches the ``q``-th largest and is positive.

    Ties at the threshold go to the smaller modality index.
    """
    s = np.asarray(upper_scores, dtype=float)
    p = len(s)
    if not 1 <= q <= p:
        raise ConformalShapleyError(f"q={q} outside 1..{p}")
    order = sorted(range(p), key=lambda j: (-s[j], j))
    threshold = float(s[order[q - 1]])
    chosen = [j for j in order if s[j] >= threshold and s[j] > 0][:q]
    return SelectionResult(tuple(chosen), s.copy(), threshold)


# ---------------------------------------------------------------- pipeline

def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except ConformalShapleyError as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


class ConformalShapley:
    """Split, per-subset training, calibration Shapley scores and quantile fits.

    ``fit`` runs everything that does not depend on a test point. Quantile
    models in omit mode are fitted lazily per level and cached; impute mode
    refits them for every test point.
    """

    def __init__(self, config: ConformalConfig = ConformalConfig()):
        self.config = config
        self._models = {}
        self._lambdas = {}

    # -- stages ---------------------------------------------------------
    @_stage("split")
    def _split(self, dataset):
        return split(dataset.n, self.config.seed)

    @_stage("train")
    def _train(self, dataset, I1):
        if not self.config.learner.supports(dataset.task):
            raise ConformalShapleyError(f"learner {self.config.learner.kind!r} does not "
                                        f"support task {dataset.task!r}")
        return train_all_subsets(dataset, I1, self.config.learner, self.config.max_modalities)

    @_stage("shapley")
    def _shapley(self, dataset, I2, cache):
        return attribution.shapley_table(dataset, I2, cache)

    @_stage("feature_map")
    def _feature_map(self, X_cal, layout):
        d = self.config.d_omega
        if d is None:
            d = [min(layout.dims[j], 2, numerical_rank(X_cal[:, layout.columns(j)]))
                 for j in range(layout.p)]
        elif np.isscalar(d):
            d = [int(d)] * layout.p
        return fit_feature_map(X_cal, layout, list(d))

    def fit(self, dataset: MultimodalDataset) -> "ConformalShapley":
        if dataset.p > self.config.max_modalities:
            raise StageError("train", ConformalShapleyError(
                f"p={dataset.p} exceeds cap {self.config.max_modalities}"))
        self.dataset = dataset
        self.splits = self._split(dataset)
        self.cache = self._train(dataset, self.splits.I1)
        self.table = self._shapley(dataset, self.splits.I2, self.cache)
        self.X_cal = dataset.X[self.splits.I2]
        self.fmap = self._feature_map(self.X_cal, dataset.layout)
        try:
            self.kernel = self.config.kernel.resolve(self.X_cal)
            self.basis = KernelBasis(self.X_cal, self.kernel)
        except ConformalShapleyError as exc:
            raise StageError("quantile", exc) from exc
        return self

    @property
    def p(self) -> int:
        return self.dataset.p

    # -- quantile models ------------------------------------------------
    def lambdas(self, j: int, tau: float):
        cfg = self.config
        if cfg.cv_scope == "modality":
            tau = 1.0 - cfg.alpha / 2
        key = (j, round(tau, 15))
        if key not in self._lambdas:
            if cfg.lambda_policy == "fixed":
                self._lambdas[key] = (cfg.lambda1, cfg.lambda2)
            else:
                self._lambdas[key] = cross_validate_lambdas(
                    self.table.values[:, j], self.X_cal, self.kernel, self.fmap, tau,
                    grid=cfg.lambda_grid, folds=cfg.folds,
                    seed=derive_seed(cfg.seed, f"cv/{j}/{tau!r}"), method=cfg.solver)
        return self._lambdas[key]

    @_stage("quantile")
    def quantile_model(self, j: int, tau: float) -> QuantileModel:
        """Omit-mode quantile model of modality ``j``'s Shapley scores at level ``tau``."""
        key = (j, round(tau, 15))
        if key not in self._models:
            l1, l2 = self.lambdas(j, tau)
            self._models[key] = fit_quantile(self.table.values[:, j], self.X_cal, self.kernel,
                                             self.fmap, tau, l1, l2, basis=self.basis,
                                             method=self.config.solver)
        return self._models[key]

    @_stage("quantile")
    def _imputed(self, j, tau, x, test_basis):
        return impute_test_point(self.quantile_model(j, tau), self.table.values[:, j],
                                 self.X_cal, x, self.fmap, method=self.config.solver,
                                 test_basis=test_basis)

    def _test_basis(self, x):
        return KernelBasis(np.vstack([self.X_cal, np.atleast_2d(x)]), self.kernel)

    def _level_values(self, X_new, taus, modalities=None):
        """``out[t][i, j]`` = fitted level-``taus[t]`` quantile of modality ``j`` at row ``i``."""
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        if X_new.shape[1] != self.dataset.layout.width:
            raise StageError("evaluate", ConformalShapleyError(
                f"test features have width {X_new.shape[1]}, expected "
                f"{self.dataset.layout.width}"))
        mods = range(self.p) if modalities is None else modalities
        out = [np.full((len(X_new), self.p), np.nan) for _ in taus]
        if self.config.test_mode == "omit":
            for t, tau in enumerate(taus):
                for j in mods:
                    out[t][:, j] = evaluate_quantile(self.quantile_model(j, tau), X_new)
            return out
        for i, x in enumerate(X_new):
            big = self._test_basis(x)
            for t, tau in enumerate(taus):
                for j in mods:
                    out[t][i, j] = self._imputed(j, tau, x, big).imputed_score
        return out

    def intervals(self, X_new, q: Optional[int] = None):
        """One list of :class:`ModalityInterval` (length p) per row of ``X_new``."""
        lo_tau, hi_tau = self.config.levels(self.p, q)
        lo, hi = self._level_values(X_new, (lo_tau, hi_tau))
        result = []
        for i in range(lo.shape[0]):
            row = []
            for j in range(self.p):
                a, b = float(lo[i, j]), float(hi[i, j])
                crossed = a > b
                if crossed:
                    a, b = b, a
                row.append(ModalityInterval(j, a, b, (lo_tau, hi_tau), crossed))
            result.append(row)
        return result

    def upper_scores(self, X_new, q: Optional[int] = None) -> np.ndarray:
        _, hi_tau = self.config.levels(self.p, q)
        return self._level_values(X_new, (hi_tau,))[0]

    def select(self, X_new, q: Optional[int] = None):
        q = q or self.config.q or self.p
        return [select_modalities(row, q) for row in self.upper_scores(X_new, q)]

    # -- diagnostics ----------------------------------------------------
    def test_shapley(self, X, y) -> np.ndarray:
        """Shapley values at labeled points (needed only to check coverage)."""
        return attribution.shapley_at(self.cache, X, y)

    def coverage(self, X, y, q: Optional[int] = None) -> np.ndarray:
        """Per-modality fraction of labeled rows whose Shapley value falls in its interval."""
        phi = self.test_shapley(X, y)
        ivs = self.intervals(X, q)
        lo = np.array([[iv.lo for iv in row] for row in ivs])
        hi = np.array([[iv.hi for iv in row] for row in ivs])
        return np.mean((phi >= lo) & (phi <= hi), axis=0)

    # -- hypothesis tests -----------------------------------------------
    def covariates(self, columns=None) -> np.ndarray:
        """Calibration covariates: ``Omega(x)`` by default, else the named dataset columns."""
        if columns is None:
            return self.fmap.transform(self.X_cal)
        return self.X_cal[:, resolve_columns(columns, self.dataset.layout)]

    @_stage("quantile")
    def median_model(self, j: int, z) -> QuantileModel:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        zmap = fit_feature_map(z, [np.arange(z.shape[1])], [numerical_rank(z)])
        kernel = self.config.kernel.resolve(z)
        cfg = self.config
        if cfg.lambda_policy == "fixed":
            l1, l2 = cfg.lambda1, cfg.lambda2
        else:
            l1, l2 = cross_validate_lambdas(self.table.values[:, j], z, kernel, zmap, 0.5,
                                            grid=cfg.lambda_grid, folds=cfg.folds,
                                            seed=derive_seed(cfg.seed, f"cv-median/{j}"),
                                            method=cfg.solver)
        return fit_quantile(self.table.values[:, j], z, kernel, zmap, 0.5, l1, l2,
                            method=cfg.solver)

    def hypothesis_tests(self, subgroups, columns=None):
        """t-test results for every (modality, subgroup) pair."""
        z = self.covariates(columns)
        results = []
        for j in range(self.p):
            model = self.median_model(j, z)
            for sg in subgroups:
                results.append(conditional_hypothesis_test(model, z, sg, j))
        return results


def resolve_columns(columns, layout):
    names = layout.column_names()
    out = []
    for c in columns:
        if isinstance(c, str):
            if c not in names:
                raise ConformalShapleyError(f"unknown column {c!r}")
            out.append(names.index(c))
        else:
            out.append(int(c))
    return np.array(out, dtype=int)


def conformal_shapley_intervals(dataset: MultimodalDataset, x_new,
                                config: ConformalConfig = ConformalConfig()):
    """Run the full pipeline and return the intervals at ``x_new``.

    A single feature row gives a list of p intervals; a matrix gives one such
    list per row.
    """
    x_new = np.asarray(x_new, dtype=float)
    ivs = ConformalShapley(config).fit(dataset).intervals(x_new)
    return ivs[0] if x_new.ndim == 1 else ivs


# ---------------------------------------------------------------- path and oracle

def _metrics(task, y, pred):
    if task == REGRESSION:
        pred = np.asarray(pred, dtype=float)
        mse = float(np.mean((y - pred) ** 2))
        sst = float(np.mean((y - np.mean(y)) ** 2))
        return {"mse": mse, "r2": 1.0 - mse / sst if sst > 0 else float("nan")}
    ce, _ = losses(CLASSIFICATION, y, pred)
    return {"ce": float(np.mean(ce)), "accuracy": float(np.mean(np.argmax(pred, axis=1) == y))}


def predict_masks(cache: ModelCache, X, masks) -> np.ndarray:
    """Prediction of the cached model for ``masks[i]`` at row ``X[i]``."""
    X = np.atleast_2d(X)
    masks = np.asarray(masks, dtype=int)
    out = None
    for mask in np.unique(masks):
        rows = np.flatnonzero(masks == mask)
        pred = cache.predict_rows(int(mask), X[rows])
        if out is None:
            out = np.zeros((len(X),) + pred.shape[1:])
        out[rows] = pred
    return out


@dataclass
class PathReport:
    task: str
    rows: list
    full_model: dict
    selections: dict

    @property
    def metric_names(self):
        return ["mse", "r2"] if self.task == REGRESSION else ["ce", "accuracy"]

    def metric(self, q, name):
        return next(r[name] for r in self.rows if r["q"] == q)


def selection_path(dataset: MultimodalDataset, test: MultimodalDataset,
                   config: ConformalConfig, q_values: Sequence[int],
                   pipeline: Optional[ConformalShapley] = None) -> PathReport:
    """Test metrics of per-point modality selection for each cap ``q``.

    Only the upper quantile drives selection, so only that level is fitted.
    An empty selection predicts with the baseline.
    """
    q_values = list(q_values)
    if not q_values:
        raise ConformalShapleyError("q_values must be non-empty")
    if pipeline is None:
        pipeline = ConformalShapley(config).fit(dataset)
    p = pipeline.p
    for q in q_values:
        if not 1 <= q <= p:
            raise ConformalShapleyError(f"q={q} outside 1..{p}")
    rows, selections = [], {}
    for q in q_values:
        sel = pipeline.select(test.X, q)
        masks = np.array([s.mask for s in sel])
        pred = predict_masks(pipeline.cache, test.X, masks)
        row = {"q": q, **_metrics(test.task, test.y, pred),
               "mean_selected": float(np.mean([len(s.selected) for s in sel]))}
        rows.append(row)
        selections[q] = masks
    full = (1 << p) - 1
    full_metrics = _metrics(test.task, test.y, pipeline.cache.predict_rows(full, test.X))
    return PathReport(test.task, rows, full_metrics, selections)


def brute_force_optimal_subset(dataset: MultimodalDataset, rows, cache: ModelCache, q: int):
    """Subset of size <= q with the largest mean value over ``rows`` (ties: smaller bitmask)."""
    rows = np.asarray(rows, dtype=int)
    V = attribution.value_matrix(cache, dataset.X[rows], dataset.y[rows])
    util = V.mean(axis=1)
    pop = np.array([bin(m).count("1") for m in range(len(util))])
    util = np.where(pop <= q, util, -np.inf)
    best = int(np.argmax(util))
    return best, float(util[best])


def selection_utility(cache: ModelCache, X, y, masks) -> float:
    """Mean over rows of ``val(x_i, y_i; masks[i])``."""
    V = attribution.value_matrix(cache, X, y)
    return float(np.mean(V[np.asarray(masks, dtype=int), np.arange(len(masks))]))


def near_optimality_slack(pipeline: ConformalShapley, subset_mask: int, X_eval,
                          q: Optional[int] = None, delta: float = 0.0) -> float:
    """Mean over ``X_eval`` of ``sum_{j in S} 2 (kappa sqrt(B/l1) + |Omega(x)| sqrt(B/l2))``,
    plus ``4 q delta`` (classification). ``B`` is each upper model's zero-function objective."""
    q = q or pipeline.config.q or pipeline.p
    _, hi_tau = pipeline.config.levels(pipeline.p, q)
    X_eval = np.atleast_2d(X_eval)
    total = np.zeros(len(X_eval))
    for j in range(pipeline.p):
        if not subset_mask >> j & 1:
            continue
        m = pipeline.quantile_model(j, hi_tau)
        kappa = np.sqrt(np.max(m.kernel.diag(np.vstack([X_eval, m.anchors]))))
        B = m.zero_objective
        om = np.linalg.norm(m.omega(X_eval), axis=1)
        total += 2.0 * (kappa * math.sqrt(B / m.lambda1) + om * math.sqrt(B / m.lambda2))
    return float(np.mean(total) + 4 * q * delta)


# ---------------------------------------------------------------- hypothesis test

def _subgroup_spec(subgroup):
    if isinstance(subgroup, dict):
        fix = subgroup.get("fix", {})
        name = subgroup.get("name")
        idx = [int(k) for k in fix]
        vals = [float(v) for v in fix.values()]
    else:
        idx, vals = subgroup
        idx, vals, name = [int(i) for i in idx], [float(v) for v in vals], None
    return idx, vals, name


def conditional_hypothesis_test(median_model: QuantileModel, z, subgroup,
                                modality: int) -> HypothesisResult:
    """One-sided t-test of zero mean for the median Shapley estimate with ``Z'`` fixed at ``zeta``.

    ``subgroup`` is ``(indices, values)`` or ``{"name": ..., "fix": {index: value}}``.
    """
    idx, vals, name = _subgroup_spec(subgroup)
    z = np.array(np.atleast_2d(z), dtype=float)
    m = z.shape[0]
    if m < 2:
        raise ConformalShapleyError("the t-test needs at least 2 calibration points")
    if idx:
        z[:, idx] = vals
    h = np.asarray(evaluate_quantile(median_model, z), dtype=float)
    mean = float(np.mean(h))
    sd = float(np.std(h, ddof=1))
    spec = {"name": name, "indices": idx, "values": vals}
    if sd == 0.0 or sd <= 1e-12 * abs(mean):
        p = 1.0 if mean <= 0 else 0.0
        t = 0.0 if mean == 0 else math.copysign(math.inf, mean)
        return HypothesisResult(modality, spec, mean, sd, t, m - 1, p, m, degenerate=True)
    t = mean / (sd / math.sqrt(m))
    return HypothesisResult(modality, spec, mean, sd, t, m - 1, student_t_sf(t, m - 1), m)
