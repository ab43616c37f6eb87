"""Cross-validation, prediction, error metrics and the ridge baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .admm import FitConfig, FitResult, fit_path
from .baselines import support_recovered
from .linop import as_dense, compact_svd
from .tree import FeatureTree


@dataclass(frozen=True, eq=False)
class CVResult:
    grid: list
    cv_mean: np.ndarray
    cv_se: np.ndarray
    best_index: int
    fold_assignments: np.ndarray
    fold_errors: np.ndarray

    @property
    def best(self) -> tuple[float, float]:
        return self.grid[self.best_index]


def fold_assignments(n: int, K: int, seed) -> np.ndarray:
    """Seeded shuffle, then contiguous blocks of near-equal size."""
    if K < 2:
        raise ValueError("need at least two folds")
    if K > n:
        raise ValueError(f"cannot make {K} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    for f, idx in enumerate(np.array_split(perm, K)):
        folds[idx] = f
    return folds


def select_best(grid, cv_mean, cv_se=None, one_se: bool = False) -> int:
    """Index of the minimum; ties go to the largest lam, then the smallest alpha.

    With ``one_se`` the sparsest point within one standard error of the
    minimum is chosen instead (same ordering).
    """
    cv_mean = np.asarray(cv_mean, dtype=float)
    target = cv_mean.min()
    if one_se and cv_se is not None:
        target = target + cv_se[int(np.argmin(cv_mean))]
        cand = np.flatnonzero(cv_mean <= target)
    else:
        cand = np.flatnonzero(cv_mean == target)
    return int(min(cand, key=lambda i: (-grid[i][0], grid[i][1], i)))


def predict(X_new, result: FitResult, clip: tuple[float, float] | None = None) -> np.ndarray:
    Xd = as_dense(X_new)
    if Xd.ndim != 2 or Xd.shape[1] != result.beta.shape[0]:
        raise ValueError(f"X_new must have {result.beta.shape[0]} columns")
    out = result.intercept + Xd @ result.beta
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def kfold_cv(X, y, tree: FeatureTree, grid: Sequence[tuple[float, float]], K: int = 5,
             seed=0, clip=None, base_cfg: FitConfig | None = None, threads: int = 1,
             one_se: bool = False) -> CVResult:
    """K-fold CV of mean squared prediction error over a ``(lam, alpha)`` grid."""
    if len(grid) == 0:
        raise ValueError("grid is empty")
    Xd = as_dense(X)
    y = np.asarray(y, dtype=float)
    n = Xd.shape[0]
    folds = fold_assignments(n, K, seed)
    base = base_cfg if base_cfg is not None else FitConfig(lam=0.0, alpha=0.0)
    errs = np.empty((K, len(grid)))
    for f in range(K):
        test = folds == f
        res = fit_path(Xd[~test], y[~test], tree, grid, base, threads=threads)
        for g, r in enumerate(res):
            pred = predict(Xd[test], r, clip)
            errs[f, g] = np.mean((y[test] - pred) ** 2)
    cv_mean = errs.mean(axis=0)
    cv_se = errs.std(axis=0, ddof=1) / np.sqrt(K)
    best = select_best(list(grid), cv_mean, cv_se, one_se)
    return CVResult(list(grid), cv_mean, cv_se, best, folds, errs)


@dataclass(frozen=True)
class Metrics:
    estimation_error: float
    prediction_error: float
    support_recovered: bool


def metrics(beta_hat, beta_star, X, p: int | None = None, n: int | None = None) -> Metrics:
    """``||b - b*||^2 / p``, ``||X b - X b*||^2 / n`` and signed-support recovery."""
    Xd = as_dense(X)
    bh = np.asarray(beta_hat, dtype=float)
    bs = np.asarray(beta_star, dtype=float)
    p = bh.shape[0] if p is None else p
    n = Xd.shape[0] if n is None else n
    d = bh - bs
    fit_d = Xd @ d
    return Metrics(float(d @ d / p), float(fit_d @ fit_d / n), support_recovered(bh, bs))


def ridge_svd(X, y, lambda_grid) -> list[np.ndarray]:
    """``(X^T X + n lam I)^{-1} X^T y`` for every lam, from one compact SVD."""
    Xd = as_dense(X)
    n = Xd.shape[0]
    svd = compact_svd(Xd)
    uty = svd.U.T @ np.asarray(y, dtype=float)
    out = []
    for lam in lambda_grid:
        if not lam > 0:
            raise ValueError("ridge penalty must be positive")
        out.append(svd.V @ (svd.D * uty / (svd.D ** 2 + n * lam)))
    return out


def ridge_grid(X, y, n_lambda: int = 50, ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced ridge penalties starting near the fully shrunk regime."""
    Xd = as_dense(X)
    top = max(np.linalg.norm(Xd, 2) ** 2 / Xd.shape[0], 1e-12) * 1e2
    return np.geomspace(top, top * ratio, n_lambda)


__all__ = ["CVResult", "Metrics", "fold_assignments", "kfold_cv", "metrics",
           "predict", "ridge_grid", "ridge_svd", "select_best"]
