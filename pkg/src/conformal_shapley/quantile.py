"""Kernel quantile regression with a finite-dimensional linear component.

The fitted function is ``h(x) = b + sum_i a_i K(x_i, x) + Omega(x)^T beta`` and
minimizes

    (1/N) sum_i pinball_tau(h(x_i), v_i) + lambda1 ||h_K||_K^2 + lambda2 ||beta||^2

with ``b`` unpenalized. Internally the kernel part is expressed through the
eigendecomposition ``K = U diag(s) U^T`` as ``h_K(anchors) = U sqrt(s) c`` so
that ``||h_K||_K = ||c||``; the problem then becomes a ridge-penalized
pinball regression on the design ``[1, U sqrt(s), Omega]``.

The pinball loss is replaced by its Moreau envelope with parameter ``mu``
(a Huberized kink), minimized for a decreasing sequence of ``mu``. The
envelope underestimates the pinball loss by at most ``mu / 2``, so the
exact objective of the final iterate is within ``mu_min / 2`` of optimal.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import QuantileFitError
from .rng import make_rng

log = logging.getLogger(__name__)

# keep eigen-directions of the Gram matrix above this fraction of the largest
EIG_CUTOFF = 1e-10
DEFAULT_GRID = tuple((l1, l2) for l1 in (1e-3, 1e-2, 1e-1, 1.0, 10.0)
                     for l2 in (1e-3, 1e-2, 1e-1, 1.0, 10.0))
FIXED_PRESET = (0.01, 0.01)


def pinball_loss(tau, u, v):
    """``(tau - 1{v <= u}) (v - u)`` for predicted quantile ``u`` and observation ``v``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    r = v - u
    out = np.where(r > 0, tau * r, (tau - 1.0) * r)
    return out if out.ndim else float(out)


def _envelope(r, tau, mu):
    """Moreau envelope of the pinball loss in the residual ``r = v - u``."""
    hi, lo = tau * mu, (tau - 1.0) * mu
    return np.where(r >= hi, tau * r - 0.5 * tau * tau * mu,
                    np.where(r <= lo, (tau - 1.0) * r - 0.5 * (1.0 - tau) ** 2 * mu,
                             0.5 * r * r / mu))


# ---------------------------------------------------------------- kernels

@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is ``"gaussian"`` or ``"linear"``; a ``None`` bandwidth means median heuristic."""
    kind: str = "gaussian"
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "linear"):
            raise QuantileFitError(f"unknown kernel {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise QuantileFitError("explicit bandwidth must be > 0")

    def resolve(self, X) -> "KernelSpec":
        if self.kind != "gaussian" or self.bandwidth is not None:
            return self
        X = np.atleast_2d(X)
        d = pdist(X) if X.shape[0] > 1 else np.array([])
        d = d[d > 0]
        return replace(self, bandwidth=float(np.median(d)) if d.size else 1.0)

    def gram(self, A, B) -> np.ndarray:
        A, B = np.atleast_2d(A), np.atleast_2d(B)
        if self.kind == "linear":
            return A @ B.T
        if self.bandwidth is None:
            raise QuantileFitError("gaussian kernel bandwidth not resolved")
        return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * self.bandwidth ** 2))

    def diag(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kind == "linear":
            return np.einsum("ij,ij->i", X, X)
        return np.ones(X.shape[0])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}


class KernelBasis:
    """Eigen-factorization of the Gram matrix over a fixed set of anchors."""

    def __init__(self, anchors, kernel: KernelSpec):
        self.anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        self.kernel = kernel.resolve(self.anchors)
        K = self.kernel.gram(self.anchors, self.anchors)
        K = 0.5 * (K + K.T)
        s, U = np.linalg.eigh(K)
        top = max(float(s[-1]), 0.0)
        tol = 1e-8 * max(float(np.trace(K)), 1e-300) / len(K)
        if s[0] < -tol:
            raise QuantileFitError(f"kernel Gram matrix is not PSD (min eigenvalue {s[0]:.3g})")
        keep = s > EIG_CUTOFF * top if top > 0 else np.zeros(len(s), dtype=bool)
        self.K = K
        self.U = U[:, keep]
        self.sqrt_s = np.sqrt(s[keep])
        self.factor = self.U * self.sqrt_s   # h_K(anchors) = factor @ c

    @property
    def rank(self) -> int:
        return len(self.sqrt_s)

    def dual(self, c) -> np.ndarray:
        """Dual coefficients ``a`` with ``K a = factor c`` and ``a^T K a = ||c||^2``."""
        return self.U @ (c / self.sqrt_s) if self.rank else np.zeros(len(self.anchors))

    def cholesky_check(self) -> float:
        """Jitter needed for a Cholesky factorization (<= 1e-8 trace/m)."""
        m = len(self.K)
        jitter = 1e-8 * max(float(np.trace(self.K)), 1e-300) / m
        np.linalg.cholesky(self.K + jitter * np.eye(m))
        return jitter


# ---------------------------------------------------------------- feature map

@dataclass(frozen=True)
class FeatureMap:
    """Per-group PCA projection; output columns concatenate groups in order."""
    groups: tuple
    means: tuple
    loadings: tuple
    explained_variance_ratio: tuple

    @property
    def width(self) -> int:
        return int(sum(L.shape[1] for L in self.loadings))

    @property
    def input_width(self) -> int:
        return int(sum(len(g) for g in self.groups))

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_width:
            raise QuantileFitError(f"feature width {X.shape[1]} does not match the "
                                   f"feature map input width {self.input_width}")
        parts = [(X[:, g] - mu) @ L for g, mu, L in zip(self.groups, self.means, self.loadings)]
        out = np.hstack(parts) if parts else np.zeros((X.shape[0], 0))
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"groups": [np.asarray(g).tolist() for g in self.groups],
                "means": [np.asarray(m).tolist() for m in self.means],
                "loadings": [np.asarray(L).tolist() for L in self.loadings]}


def fit_feature_map(X_cal, groups, d_omega) -> FeatureMap:
    """Fit per-group PCA on calibration rows.

    ``groups`` is a :class:`~conformal_shapley.data.ModalityLayout` or a list of
    column-index arrays; ``d_omega`` is an int (same for every group) or one
    target dimension per group. A target of 0 drops the group.
    """
    X_cal = np.atleast_2d(np.asarray(X_cal, dtype=float))
    if hasattr(groups, "columns"):
        groups = [groups.columns(j) for j in range(groups.p)]
    groups = [np.asarray(g, dtype=int) for g in groups]
    if np.isscalar(d_omega):
        d_omega = [int(d_omega)] * len(groups)
    if len(d_omega) != len(groups):
        raise QuantileFitError(f"need {len(groups)} target dimensions, got {len(d_omega)}")
    means, loads, evr = [], [], []
    for j, (g, d) in enumerate(zip(groups, d_omega)):
        if d < 0 or d > len(g):
            raise QuantileFitError(f"group {j}: target dimension {d} outside 0..{len(g)}")
        block = X_cal[:, g]
        if d > 0 and block.shape[0] < d + 1:
            raise QuantileFitError(f"group {j}: need at least {d + 1} rows for {d} components")
        mu = block.mean(axis=0)
        _, s, Vt = np.linalg.svd(block - mu, full_matrices=False)
        total = float(np.sum(s ** 2))
        if d > 0 and (total == 0.0 or s[d - 1] <= 1e-10 * s[0]):
            raise QuantileFitError(f"group {j} has numerical rank below {d}; "
                                   f"use a smaller target dimension")
        means.append(mu)
        loads.append(Vt[:d].T.copy())
        evr.append(s[:d] ** 2 / total if total > 0 else np.zeros(d))
    return FeatureMap(tuple(groups), tuple(means), tuple(loads), tuple(evr))


def numerical_rank(X, rtol=1e-10) -> int:
    X = np.atleast_2d(X)
    if X.shape[0] < 2:
        return 0
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class QuantileModel:
    tau: float
    anchors: np.ndarray
    dual_coeffs: np.ndarray
    beta: np.ndarray
    intercept: float
    lambda1: float
    lambda2: float
    objective_value: float
    zero_objective: float
    kernel: KernelSpec
    fmap: Optional[FeatureMap]
    fitted_values: np.ndarray
    rkhs_norm: float
    test_mode: str = "omit"
    imputed_score: Optional[float] = None
    trace: tuple = ()

    def omega(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.fmap is None:
            return np.zeros((X.shape[0], 0))
        return self.fmap.transform(X)

    def anchors_fingerprint(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.anchors).tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {"tau": self.tau, "kernel": self.kernel.to_dict(),
                "anchors_fingerprint": self.anchors_fingerprint(),
                "n_anchors": int(len(self.anchors)),
                "dual_coeffs": self.dual_coeffs.tolist(), "beta": self.beta.tolist(),
                "intercept": self.intercept, "lambda1": self.lambda1,
                "lambda2": self.lambda2, "objective_value": self.objective_value,
                "zero_objective": self.zero_objective, "test_mode": self.test_mode,
                "imputed_score": self.imputed_score,
                "feature_map": self.fmap.to_dict() if self.fmap else None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def dump_trace(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage_mu", "iteration", "objective"])
            w.writerows(self.trace)


def evaluate_quantile(model: QuantileModel, x) -> np.ndarray:
    """``intercept + sum_i a_i K(x_i, x) + Omega(x)^T beta`` for one row or many."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.anchors.shape[1]:
        raise QuantileFitError(f"feature width {X.shape[1]} does not match anchor "
                               f"width {model.anchors.shape[1]}")
    out = model.intercept + model.kernel.gram(X, model.anchors) @ model.dual_coeffs
    if model.beta.size:
        out = out + model.omega(X) @ model.beta
    return out[0] if single else out


# ---------------------------------------------------------------- solver

@dataclass
class _Solution:
    w: np.ndarray
    objective: float
    trace: list = field(default_factory=list)


def _smoothed(Z, v, w, pen, tau, mu, nd):
    r = v - Z @ w
    return _envelope(r, tau, mu).sum() / nd + pen @ (w * w), r


def _newton_stage(Z, v, pen, tau, mu, nd, w, max_iter, trace, gamma=1e-2):
    """Damped semismooth Newton on the envelope objective.

    Points outside the quadratic zone have zero curvature; they get a small
    IRLS-style curvature ``gamma / (2 |r|)`` so the system stays well posed
    when the warm start leaves the zone empty.
    """
    q = Z.shape[1]
    diag = np.diag_indices(q)
    F, r = _smoothed(Z, v, w, pen, tau, mu, nd)
    for it in range(max_iter):
        g_r = np.clip(r / mu, tau - 1.0, tau)
        grad = -(Z.T @ g_r) / nd + 2.0 * pen * w
        inside = (r > (tau - 1.0) * mu) & (r < tau * mu)
        curv = np.where(inside, 1.0 / mu, gamma / (2.0 * np.maximum(np.abs(r), mu)))
        H = (Z.T * curv) @ Z / nd
        H[diag] += 2.0 * pen + 1e-12 * (np.max(np.diag(H)) + 1e-300)
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            step = -grad
        slope = float(grad @ step)
        if not slope < 0:
            step, slope = -grad, -float(grad @ grad)
        if -slope <= 2e-14 * max(1.0, abs(F)) or -slope < 1e-30:
            return w, F, r, float(np.linalg.norm(grad)), True
        for direction in (step, -grad):
            if direction is not step:
                slope = -float(grad @ grad)
            t = 1.0
            while t >= 1e-20:
                w_new = w + t * direction
                F_new, r_new = _smoothed(Z, v, w_new, pen, tau, mu, nd)
                if F_new <= F + 1e-4 * t * slope:
                    break
                t *= 0.5
            if F_new < F:
                break
        if not F_new < F:
            # no decrease representable in floating point: at the minimum
            return w, F, r, float(np.linalg.norm(grad)), True
        converged = F - F_new <= 1e-15 * max(1.0, abs(F))
        w, F, r = w_new, F_new, r_new
        trace.append((mu, it, F))
        if converged:
            return w, F, r, float(np.linalg.norm(grad)), True
    g_r = np.clip(r / mu, tau - 1.0, tau)
    grad = -(Z.T @ g_r) / nd + 2.0 * pen * w
    return w, F, r, float(np.linalg.norm(grad)), False


def _agd_stage(Z, v, pen, tau, mu, nd, w, max_iter, trace):
    """FISTA with gradient restart; converged when the relative objective
    change stays below 1e-8 for 10 consecutive iterations."""
    lip = np.linalg.norm(Z, 2) ** 2 / (nd * mu) + 2.0 * float(np.max(pen, initial=0.0))
    step = 1.0 / lip
    y, x_prev, t = w.copy(), w.copy(), 1.0
    F_prev, _ = _smoothed(Z, v, w, pen, tau, mu, nd)
    calm = 0
    for it in range(max_iter):
        r = v - Z @ y
        grad = -(Z.T @ np.clip(r / mu, tau - 1.0, tau)) / nd + 2.0 * pen * y
        x = y - step * grad
        F, _ = _smoothed(Z, v, x, pen, tau, mu, nd)
        if grad @ (x - x_prev) > 0:   # restart momentum
            t = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + (t - 1.0) / t_next * (x - x_prev)
        x_prev, t = x, t_next
        calm = calm + 1 if abs(F_prev - F) <= 1e-8 * max(abs(F), 1e-300) else 0
        F_prev = F
        trace.append((mu, it, F))
        if calm >= 10:
            return x, F, v - Z @ x, float(np.linalg.norm(grad)), True
    return x_prev, F_prev, v - Z @ x_prev, float(np.linalg.norm(grad)), False


def _solve(Z, v, pen, tau, nd, w0=None, method="newton", mu_min_rel=1e-7, max_iter=None):
    v = np.asarray(v, dtype=float)
    scale = max(float(np.std(v)), 1e-6 * max(1.0, float(np.max(np.abs(v), initial=0.0))))
    if w0 is None:
        w0 = np.zeros(Z.shape[1])
        w0[0] = float(np.quantile(v, tau))
    stage = _newton_stage if method == "newton" else _agd_stage
    if max_iter is None:
        max_iter = 200 if method == "newton" else 50000
    mus = scale * np.logspace(0, np.log10(mu_min_rel), int(round(-np.log10(mu_min_rel))) + 1)
    w = np.asarray(w0, dtype=float).copy()
    trace = []
    for mu in mus:
        w, F, r, gnorm, ok = stage(Z, v, pen, tau, mu, nd, w, max_iter, trace)
        if not ok:
            exact = pinball_loss(tau, Z @ w, v).sum() / nd + pen @ (w * w)
            raise QuantileFitError(f"quantile solver ({method}) did not converge at "
                                   f"mu={mu:.3g}: objective {exact:.10g}, "
                                   f"gradient norm {gnorm:.3g}", objective=exact,
                                   grad_norm=gnorm)
    exact = float(pinball_loss(tau, Z @ w, v).sum() / nd + pen @ (w * w))
    return _Solution(w, exact, trace)


def _design(basis: KernelBasis, omega):
    n = len(basis.anchors)
    omega = np.zeros((n, 0)) if omega is None else np.atleast_2d(omega).reshape(n, -1)
    Z = np.hstack([np.ones((n, 1)), basis.factor, omega])
    return Z, omega.shape[1]


def _fit_on_basis(basis, omega, scores, tau, lambda1, lambda2, nd, fmap,
                  w0=None, method="newton", mu_min_rel=1e-7, test_mode="omit",
                  imputed=None, keep_trace=False):
    Z, k = _design(basis, omega)
    r = basis.rank
    pen = np.concatenate([[0.0], np.full(r, lambda1), np.full(k, lambda2)])
    sol = _solve(Z, scores, pen, tau, nd, w0=w0, method=method, mu_min_rel=mu_min_rel)
    w = sol.w
    c, beta = w[1:1 + r], w[1 + r:]
    zero_obj = float(pinball_loss(tau, 0.0, scores).sum() / nd)
    model = QuantileModel(
        tau=float(tau), anchors=basis.anchors, dual_coeffs=basis.dual(c), beta=beta.copy(),
        intercept=float(w[0]), lambda1=float(lambda1), lambda2=float(lambda2),
        objective_value=sol.objective, zero_objective=zero_obj, kernel=basis.kernel,
        fmap=fmap, fitted_values=Z @ w, rkhs_norm=float(np.linalg.norm(c)),
        test_mode=test_mode, imputed_score=imputed,
        trace=tuple(sol.trace) if keep_trace else ())
    return model, w


def _validate(tau, lambda1, lambda2, scores):
    if not 0.0 < tau < 1.0:
        raise QuantileFitError(f"tau must lie in (0, 1), got {tau}")
    if not (lambda1 > 0 and lambda2 > 0):
        raise QuantileFitError("lambda1 and lambda2 must be > 0")
    if not np.all(np.isfinite(scores)):
        raise QuantileFitError("scores must be finite")


def fit_quantile(scores, features, kernel: KernelSpec, fmap: Optional[FeatureMap], tau: float,
                 lambda1: float, lambda2: float, test_point=None, test_mode: str = "omit",
                 basis: Optional[KernelBasis] = None, method: str = "newton",
                 mu_min_rel: float = 1e-7, max_outer: int = 20, outer_tol: float = 1e-6,
                 keep_trace: bool = False, test_basis: Optional[KernelBasis] = None
                 ) -> QuantileModel:
    """Fit the conditional ``tau``-quantile of ``scores`` given ``features``.

    In ``"impute"`` mode the test point joins the anchors and the loss, with
    its score set to the fitted quantile at that point and iterated to a
    fixed point; the loss is then averaged over ``m + 1`` terms. In
    ``"omit"`` mode the test point is ignored and the average is over ``m``.
    ``basis`` and ``test_basis`` are optional precomputed factorizations over
    the calibration anchors and over calibration anchors plus test point.
    """
    scores = np.asarray(scores, dtype=float)
    features = np.atleast_2d(np.asarray(features, dtype=float))
    _validate(tau, lambda1, lambda2, scores)
    if len(scores) != len(features):
        raise QuantileFitError(f"{len(scores)} scores for {len(features)} feature rows")
    kernel = kernel.resolve(features)
    if test_mode not in ("omit", "impute"):
        raise QuantileFitError(f"unknown test_mode {test_mode!r}")
    if basis is None or len(basis.anchors) != len(features):
        basis = KernelBasis(features, kernel)
    omega = fmap.transform(features) if fmap is not None else None
    model, w = _fit_on_basis(basis, omega, scores, tau, lambda1, lambda2, len(scores), fmap,
                             method=method, mu_min_rel=mu_min_rel, keep_trace=keep_trace)
    if test_mode == "omit" or test_point is None:
        return model
    return impute_test_point(model, scores, features, test_point, fmap, method=method,
                             mu_min_rel=mu_min_rel, max_outer=max_outer, outer_tol=outer_tol,
                             keep_trace=keep_trace, test_basis=test_basis)


def impute_test_point(model: QuantileModel, scores, features, test_point, fmap,
                      method="newton", mu_min_rel=1e-7, max_outer=20, outer_tol=1e-6,
                      keep_trace=False, test_basis=None) -> QuantileModel:
    """Refit ``model`` with the test point included, its score imputed at the
    fitted quantile and iterated to a fixed point."""
    tau, lambda1, lambda2 = model.tau, model.lambda1, model.lambda2
    x_new = np.atleast_2d(np.asarray(test_point, dtype=float))
    if x_new.shape != (1, features.shape[1]):
        raise QuantileFitError(f"test point must have width {features.shape[1]}")
    anchors = np.vstack([features, x_new])
    big = test_basis if test_basis is not None else KernelBasis(anchors, model.kernel)
    omega = fmap.transform(anchors) if fmap is not None else None
    v_new = float(evaluate_quantile(model, x_new[0]))
    w0 = None
    for _ in range(max_outer):
        v = np.append(scores, v_new)
        model, w0 = _fit_on_basis(big, omega, v, tau, lambda1, lambda2, len(v), fmap,
                                  w0=w0, method=method, mu_min_rel=mu_min_rel,
                                  test_mode="impute", imputed=v_new, keep_trace=keep_trace)
        nxt = float(model.fitted_values[-1])
        change = abs(nxt - v_new)
        if change < outer_tol:
            return replace(model, imputed_score=nxt)
        v_new = nxt
    raise QuantileFitError(f"test-point imputation did not reach a fixed point in "
                           f"{max_outer} iterations (last change {change:.3g})",
                           objective=model.objective_value)


# ---------------------------------------------------------------- cross-validation

def cross_validate_lambdas(scores, features, kernel: KernelSpec, fmap: Optional[FeatureMap],
                           tau: float, grid=DEFAULT_GRID, folds: int = 5, seed=0,
                           method: str = "newton", mu_min_rel: float = 1e-5,
                           return_table: bool = False):
    """Pick the ``(lambda1, lambda2)`` pair with the lowest mean held-out pinball loss.

    Exact ties go to the larger pair (lexicographic). A grid cell whose fit
    fails on any fold is skipped; if every cell fails the last error is raised.
    """
    scores = np.asarray(scores, dtype=float)
    features = np.atleast_2d(np.asarray(features, dtype=float))
    grid = [tuple(map(float, g)) for g in grid]
    if not grid:
        raise QuantileFitError("lambda grid is empty")
    m = len(scores)
    if m < folds:
        raise QuantileFitError(f"{m} points cannot be split into {folds} folds")
    kernel = kernel.resolve(features)
    if len(grid) == 1:
        return (grid[0], {grid[0]: np.nan}) if return_table else grid[0]
    omega = fmap.transform(features) if fmap is not None else None
    fold_of = make_rng(seed, "cv-folds").permutation(m) % folds
    losses = {g: 0.0 for g in grid}
    failed = {}
    for f in range(folds):
        tr, te = np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)
        basis = KernelBasis(features[tr], kernel)
        om_tr = omega[tr] if omega is not None else None
        for g in grid:
            if g in failed:
                continue
            try:
                model, _ = _fit_on_basis(basis, om_tr, scores[tr], tau, g[0], g[1], len(tr),
                                         fmap, method=method, mu_min_rel=mu_min_rel)
            except QuantileFitError as exc:
                failed[g] = exc
                continue
            pred = evaluate_quantile(model, features[te])
            losses[g] += float(np.mean(pinball_loss(tau, pred, scores[te]))) / folds
    ok = [g for g in grid if g not in failed]
    if not ok:
        raise QuantileFitError(f"every lambda grid cell failed; last error: "
                               f"{list(failed.values())[-1]}")
    best = min(ok, key=lambda g: (losses[g], -g[0], -g[1]))
    if return_table:
        return best, {g: (losses[g] if g not in failed else np.inf) for g in grid}
    return best
