"""Reference estimators: lasso by coordinate descent, OLS, oracle least squares
and the closed forms available for identity designs."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .linop import as_dense, compact_svd, soft_threshold
from .tree import AggregatingSet, FeatureTree, aggregation_matrix


@dataclass(frozen=True)
class BlockSpec:
    """``k`` equal blocks over ``n`` coordinates; the last block is null."""

    k: int
    n: int
    beta_tilde: np.ndarray

    def __post_init__(self):
        bt = np.asarray(self.beta_tilde, dtype=float)
        object.__setattr__(self, "beta_tilde", bt)
        if self.k < 1 or self.n % self.k:
            raise ValueError("n must be a positive multiple of k")
        if bt.shape != (self.k,) or bt[-1] != 0:
            raise ValueError("beta_tilde must have length k and a zero last entry")

    @property
    def block(self) -> int:
        return self.n // self.k

    def beta_star(self) -> np.ndarray:
        return np.repeat(self.beta_tilde, self.block)

    def design(self) -> np.ndarray:
        """Aggregated design ``I_k kron 1_{n/k}``."""
        return np.kron(np.eye(self.k), np.ones((self.block, 1)))


def signed_support(beta, tol: float = 0.0) -> np.ndarray:
    """Sign pattern with an explicit zero class (``|b| <= tol`` counts as zero)."""
    b = np.asarray(beta, dtype=float)
    return np.where(np.abs(b) <= tol, 0, np.sign(b)).astype(int)


def support_recovered(beta_hat, beta_star, tol: float = 0.0) -> bool:
    return bool(np.array_equal(signed_support(beta_hat, tol), signed_support(beta_star)))


def lasso_cd(X, y, lam: float, intercept: bool = False, weights=None,
             tol: float = 1e-12, max_iter: int = 100000, beta0=None) -> np.ndarray:
    """Lasso ``(1/2n)||y - X b||^2 + lam * sum_j w_j |b_j|`` by cyclic coordinate descent.

    ``weights`` default to one; a zero weight leaves that coefficient
    unpenalized. With ``intercept`` the problem is solved on centered data
    (see :func:`intercept_for` to recover the offset).
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    Xd = as_dense(X)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(Xd)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite data")
    if intercept:
        Xd = Xd - Xd.mean(axis=0)
        y = y - y.mean()
    p = Xd.shape[1]
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float, copy=True)
    kernels.cd_lasso(np.asfortranarray(Xd), np.ascontiguousarray(y), float(lam),
                     np.ascontiguousarray(w), beta, int(max_iter), float(tol))
    return beta


def intercept_for(X, y, beta) -> float:
    return float(np.mean(np.asarray(y, dtype=float) - as_dense(X) @ beta))


def lasso_kkt(X, y, beta, lam: float, weights=None, zero_tol: float = 0.0) -> float:
    """Largest violation of the lasso optimality conditions."""
    Xd = as_dense(X)
    n = Xd.shape[0]
    w = np.ones(Xd.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    g = Xd.T @ (np.asarray(y, dtype=float) - Xd @ beta) / n
    zero = np.abs(beta) <= zero_tol
    viol = np.where(zero, np.maximum(np.abs(g) - lam * w, 0.0),
                    np.abs(g - lam * w * np.sign(beta)))
    return float(viol.max(initial=0.0))


def ols(X, y, return_rank: bool = False):
    """Least squares via the compact SVD; minimum-norm when rank deficient."""
    Xd = as_dense(X)
    svd = compact_svd(Xd)
    beta = svd.V @ ((svd.U.T @ np.asarray(y, dtype=float)) / svd.D)
    if svd.rank < Xd.shape[1]:
        warnings.warn(f"design has rank {svd.rank} < {Xd.shape[1]}; "
                      "returning the minimum-norm solution", RuntimeWarning)
    return (beta, svd.rank) if return_rank else beta


def oracle_ls(X, tree: FeatureTree, y, B_star: AggregatingSet, active=None) -> np.ndarray:
    """Least squares on the correctly aggregated active columns of ``X A_B*``.

    Coefficients are broadcast back to the leaves; inactive groups get 0.
    """
    nodes = list(B_star.ordered(tree)) if active is None else [u for u in B_star.ordered(tree) if u in set(active)]
    beta = np.zeros(tree.leaf_count)
    if not nodes:
        return beta
    Xd = as_dense(X)
    XA = np.asarray(Xd @ aggregation_matrix(tree).submatrix(nodes).toarray())
    svd = compact_svd(XA)
    if svd.rank < len(nodes):
        raise np.linalg.LinAlgError("aggregated design is singular")
    coef = svd.V @ ((svd.U.T @ np.asarray(y, dtype=float)) / svd.D)
    for c, u in zip(coef, nodes):
        beta[tree.leaf_sets[u - 1]] = c
    return beta


def oracle_lasso_identity(y, spec: BlockSpec, lam: float) -> np.ndarray:
    """Closed-form lasso on the aggregated identity design, broadcast to ``n``."""
    y = np.asarray(y, dtype=float)
    means = y.reshape(spec.k, spec.block).mean(axis=1)  # (k/n) * Xtilde^T y
    return np.repeat(soft_threshold(means, lam * spec.k), spec.block)


def lasso_identity(y, lam: float) -> np.ndarray:
    """Lasso with ``X = I_n``: elementwise soft-thresholding of ``y``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return soft_threshold(np.asarray(y, dtype=float), lam)


def lasso_identity_path_recovers(y, beta_star) -> bool:
    """Whether ``S(y, lam)`` has the signed support of ``beta_star`` for some lam >= 0.

    Exact criterion: signs of ``y`` agree with ``beta_star`` on its support
    and ``min |y|`` over the support exceeds ``max |y|`` off it.
    """
    y = np.asarray(y, dtype=float)
    bs = np.asarray(beta_star, dtype=float)
    sig = bs != 0
    if not np.all(np.sign(y[sig]) == np.sign(bs[sig])):
        return False
    a = np.abs(y)
    if not sig.any():
        return True
    if sig.all():
        return bool(a.min() > 0)
    return bool(a[sig].min() > a[~sig].max())
