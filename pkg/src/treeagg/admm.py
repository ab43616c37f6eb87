"""Consensus ADMM for tree-guided aggregation and selection.

Solves::

    min_{beta, gamma}  1/(2n) ||y - X beta||^2
                       + lam * (alpha * ||gamma_{-root}||_1 + (1 - alpha) * ||beta||_1)
    s.t.  beta = A gamma

by splitting beta into three copies (loss, l1 on beta, constraint) and
gamma into two (l1 on gamma, constraint), with global averages and scaled
dual ascent.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog, lsq_linear

from . import kernels
from .linop import CountDesign, TreeProjector, as_dense, compact_svd
from .tree import FeatureTree, aggregation_matrix

_STATE_KEYS = ("beta", "gamma", "v1", "v2", "v3", "u1", "u2", "b1", "b2", "b3", "g1", "g2")


@dataclass(frozen=True)
class FitConfig:
    lam: float
    alpha: float
    rho: float = 1.0
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    max_iter: int = 10000
    intercept: bool = False

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError("lam must be a finite nonnegative number")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be a positive integer")


@dataclass(frozen=True, eq=False)
class FitResult:
    beta: np.ndarray
    gamma: np.ndarray
    intercept: float
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    objective: float
    config: FitConfig
    state: dict = field(repr=False, default_factory=dict)

    @property
    def consensus_gap(self) -> float:
        """``||beta_iterate - A gamma||_inf`` of the raw averaged iterates."""
        return float(self.state.get("consensus_gap", 0.0))


class Problem:
    """Data-dependent quantities reused across every (lam, alpha).

    Holds the (optionally centered) design, ``X^T y``, the compact SVD of
    the design and the tree projector onto ``beta = A gamma``.
    """

    def __init__(self, X, y, tree: FeatureTree, intercept: bool = False):
        D = CountDesign.from_any(X)
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or y.shape[0] != D.n:
            raise ValueError(f"y has length {y.shape[0] if y.ndim else 0}, design has {D.n} rows")
        if tree.leaf_count != D.p:
            raise ValueError(f"tree has {tree.leaf_count} leaves, design has {D.p} columns")
        if not np.all(np.isfinite(y)):
            raise ValueError("y has non-finite entries")
        self.design = D
        self.tree = tree
        self.intercept = intercept
        Xd = D.dense()
        self.n, self.p = Xd.shape
        self.x_mean = Xd.mean(axis=0) if intercept else np.zeros(self.p)
        self.y_mean = float(y.mean()) if intercept else 0.0
        self.X = Xd - self.x_mean if intercept else Xd
        self.y = y - self.y_mean if intercept else y
        self.y_raw = y
        self.xty = np.ascontiguousarray(self.X.T @ self.y)
        svd = compact_svd(self.X)
        self.V = np.ascontiguousarray(svd.V)
        self.d2 = svd.D ** 2
        self.A = aggregation_matrix(tree)
        self.projector = TreeProjector.from_tree(tree)
        self.T = tree.node_count
        self.root = tree.root_index

    def fresh_state(self) -> dict:
        st = {k: np.zeros(self.p) for k in ("beta", "v1", "v2", "v3", "b1", "b2", "b3")}
        st.update({k: np.zeros(self.T) for k in ("gamma", "u1", "u2", "g1", "g2")})
        return st


def objective(X, y, beta, gamma, cfg: FitConfig, intercept: float = 0.0, A=None) -> float:
    """Penalized least-squares objective at ``(beta, gamma)``."""
    Xd = as_dense(X)
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if A is not None:
        gap = np.max(np.abs(beta - A @ gamma), initial=0.0)
        if gap > 1e-6:
            warnings.warn(f"beta differs from A gamma by {gap:.2e}", RuntimeWarning)
    n = Xd.shape[0]
    resid = np.asarray(y, dtype=float) - intercept - Xd @ beta
    pen_gamma = np.abs(gamma[:-1]).sum()  # root is the last node
    return float(resid @ resid / (2 * n)
                 + cfg.lam * (cfg.alpha * pen_gamma + (1 - cfg.alpha) * np.abs(beta).sum()))


def kkt_residual(X, y, beta, gamma, cfg: FitConfig, tree: FeatureTree,
                 zero_tol: float = 1e-7) -> float:
    """Smallest-norm violation of first-order optimality in gamma.

    Stationarity of ``(1/2n)||y - XA g||^2 + lam*alpha*||g_{-r}||_1
    + lam*(1-alpha)*||A g||_1``: the gradient plus some element of the
    l1 subdifferentials must vanish. Entries with magnitude at most
    ``zero_tol`` get the interval ``[-1, 1]``; the best choice inside the
    intervals is found by bounded least squares. With ``cfg.intercept`` the
    data are centered first.
    """
    Xd = as_dense(X)
    y = np.asarray(y, dtype=float)
    if cfg.intercept:
        Xd = Xd - Xd.mean(axis=0)
        y = y - y.mean()
    A = aggregation_matrix(tree).toarray()
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = Xd.shape[0]
    grad = -A.T @ (Xd.T @ (y - Xd @ beta)) / n
    la, lb = cfg.lam * cfg.alpha, cfg.lam * (1 - cfg.alpha)
    root = tree.root_index
    fixed = grad.copy()
    cols = []
    g_nonroot = np.ones(gamma.shape[0], dtype=bool)
    g_nonroot[root] = False
    g_zero = (np.abs(gamma) <= zero_tol) & g_nonroot
    g_sign = g_nonroot & ~g_zero
    fixed[g_sign] += la * np.sign(gamma[g_sign])
    if la > 0:
        for k in np.flatnonzero(g_zero):
            e = np.zeros(gamma.shape[0])
            e[k] = la
            cols.append(e)
    b_zero = np.abs(beta) <= zero_tol
    fixed += lb * A.T @ np.where(b_zero, 0.0, np.sign(beta))
    if lb > 0:
        for j in np.flatnonzero(b_zero):
            cols.append(lb * A[j])
    if not cols:
        return float(np.linalg.norm(fixed))
    M = np.column_stack(cols)
    sol = lsq_linear(M, -fixed, bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
    return float(np.linalg.norm(fixed + M @ sol.x))


def _run(prob: Problem, cfg: FitConfig, state: dict, debug: bool) -> FitResult:
    n, rho = prob.n, cfg.rho
    scale = 1.0 / (prob.d2 + n * rho)
    it, conv, r_norm, s_norm = kernels.admm_run(
        prob.xty, prob.V, scale, prob.projector.parent, prob.projector.inv, prob.root,
        cfg.lam * (1 - cfg.alpha) / rho, cfg.lam * cfg.alpha / rho, rho, float(n),
        cfg.eps_abs, cfg.eps_rel, int(cfg.max_iter), state, debug)
    gamma = state["gamma"].copy()
    beta = np.asarray(prob.A @ gamma).ravel()
    state["consensus_gap"] = float(np.max(np.abs(state["beta"] - beta), initial=0.0))
    b0 = prob.y_mean - float(prob.x_mean @ beta) if prob.intercept else 0.0
    obj = objective(prob.X, prob.y, beta, gamma, cfg)
    return FitResult(beta=beta, gamma=gamma, intercept=b0, iterations=int(it),
                     converged=bool(conv), primal_residual=float(r_norm),
                     dual_residual=float(s_norm), objective=obj, config=cfg, state=state)


def _warm_state(prob: Problem, warm: FitResult | None) -> dict:
    if warm is None or not warm.state:
        return prob.fresh_state()
    st = {k: np.array(warm.state[k], dtype=float, copy=True) for k in _STATE_KEYS}
    if st["beta"].shape != (prob.p,) or st["gamma"].shape != (prob.T,):
        raise ValueError("warm start has the wrong dimensions")
    return st


def fit(X, y, tree: FeatureTree, cfg: FitConfig, warm: FitResult | None = None,
        problem: Problem | None = None, debug: bool = False) -> FitResult:
    """Solve the aggregation problem for one ``(lam, alpha)``.

    ``warm`` restarts from a previous solution's ADMM state. With
    ``debug`` the averaged duals are checked to stay at zero.
    The returned ``beta`` is exactly ``A @ gamma``.
    """
    prob = problem if problem is not None else Problem(X, y, tree, cfg.intercept)
    if prob.intercept != cfg.intercept:
        raise ValueError("problem and config disagree about the intercept")
    return _run(prob, cfg, _warm_state(prob, warm), debug)


def lambda_max(X, y, alpha: float, intercept: bool = False,
               tree: FeatureTree | None = None) -> float:
    """Start of the lam path for a given alpha.

    Without a tree this is ``||X^T y||_inf / (n (1 - alpha))`` with alpha
    capped at 0.99, an upper bound on the smallest lam at which
    ``beta = gamma = 0`` is optimal. With a tree it is the exact smallest
    lam at which the solution is fully fused (``beta`` constant).
    """
    Xd = as_dense(X)
    y = np.asarray(y, dtype=float)
    if intercept:
        Xd = Xd - Xd.mean(axis=0)
        y = y - y.mean()
    n = Xd.shape[0]
    xty = Xd.T @ y / n
    if tree is None or alpha == 0:
        a = min(alpha, 0.99)
        return float(np.max(np.abs(xty), initial=0.0) / (1 - a))
    lo = _fused_constant_start(Xd, y, tree, alpha)
    if lo is not None:
        return lo
    return _zero_start(Xd, y, tree, alpha)


def _fused_constant_start(Xd, y, tree, alpha):
    """Smallest lam with an optimal ``beta = c 1``, ``c != 0``, or None.

    While ``c(lam) = S(m, lam (1 - alpha) p) / q`` is nonzero it is affine
    in lam, so each non-root optimality condition ``|a_u + b_u lam| <= alpha lam``
    is a pair of linear inequalities and the feasible lams form an interval.
    """
    n, p = Xd.shape
    x1 = Xd.sum(axis=1)
    q = x1 @ x1 / n
    m = x1 @ y / n
    if q == 0 or m == 0:
        return None
    sgn = np.sign(m)
    lam_c = np.inf if alpha >= 1 else abs(m) / ((1 - alpha) * p)
    A = aggregation_matrix(tree).sparse
    nonroot = np.arange(A.shape[1]) != tree.root_index
    # c(lam) = c0 + c1 * lam; the gradient rows are affine in lam as well
    c0, c1 = m / q, -sgn * (1 - alpha) * p / q
    xtx1 = Xd.T @ x1 / n
    a = (A.T @ (Xd.T @ y / n - c0 * xtx1))[nonroot]
    b = (A.T @ (-c1 * xtx1 - (1 - alpha) * sgn * np.ones(p)))[nonroot]
    lo, hi = 0.0, lam_c
    for coef, rhs in ((b - alpha, -a), (-b - alpha, a)):
        pos, neg = coef > 0, coef < 0
        if np.any(pos):
            hi = min(hi, float(np.min(rhs[pos] / coef[pos])))
        if np.any(neg):
            lo = max(lo, float(np.max(rhs[neg] / coef[neg])))
        if np.any((coef == 0) & (rhs < 0)):
            return None
    return lo if lo < hi else None


def _zero_start(Xd, y, tree, alpha):
    """Smallest lam at which ``gamma = 0`` is optimal, by linear programming."""
    n = Xd.shape[0]
    A = aggregation_matrix(tree).sparse
    c = A.T @ (Xd.T @ y / n)
    p, T = A.shape
    nonroot = np.arange(T) != tree.root_index
    W = sp.eye(T, format="csc")[:, nonroot]
    m = T - 1
    A_eq = sp.hstack([sp.csc_matrix((T, 1)), alpha * W, (1 - alpha) * A.T.tocsc()])
    one = sp.csc_matrix(np.ones((m + p, 1)))
    I = sp.eye(m + p, format="csc")
    A_ub = sp.vstack([sp.hstack([-one, I]), sp.hstack([-one, -I])])
    cost = np.zeros(1 + m + p)
    cost[0] = 1.0
    res = linprog(cost, A_ub=A_ub, b_ub=np.zeros(2 * (m + p)), A_eq=A_eq, b_eq=c,
                  bounds=[(0, None)] + [(None, None)] * (m + p), method="highs")
    if res.status != 0:
        raise RuntimeError(f"lambda_max linear program failed: {res.message}")
    return float(res.x[0])


def alpha_grid(p: int, n_alpha: int = 8) -> np.ndarray:
    """Equally spaced alphas in ``[0, (1 + 1/p)^-1]``."""
    hi = 1.0 / (1.0 + 1.0 / p)
    return np.linspace(0.0, hi, n_alpha) if n_alpha > 1 else np.array([0.0])


def make_grid(X, y, p: int | None = None, n_lambda: int = 50, n_alpha: int = 8,
              ratio: float = 1e-3, intercept: bool = False,
              alphas: Sequence[float] | None = None,
              tree: FeatureTree | None = None) -> list[tuple[float, float]]:
    """Grid of ``(lam, alpha)`` pairs, lam descending within each alpha.

    Each alpha gets ``n_lambda`` log-spaced values from ``lambda_max`` down
    to ``ratio * lambda_max``; pass ``tree`` for the exact start.
    """
    p = p if p is not None else as_dense(X).shape[1]
    alphas = alpha_grid(p, n_alpha) if alphas is None else np.asarray(alphas, dtype=float)
    grid = []
    for a in alphas:
        lmax = lambda_max(X, y, a, intercept, tree)
        if lmax <= 0:
            lmax = 1.0
        lams = np.geomspace(lmax, lmax * ratio, n_lambda) if n_lambda > 1 else np.array([lmax])
        grid.extend((float(l), float(a)) for l in lams)
    return grid


def fit_path(X, y, tree: FeatureTree, grid: Sequence[tuple[float, float]],
             base_cfg: FitConfig, threads: int = 1,
             problem: Problem | None = None) -> list[FitResult]:
    """Fit every ``(lam, alpha)`` in ``grid``, warm-starting within each alpha.

    Each solve starts from the previous solution with the same alpha (in
    grid order); a repeated ``(lam, alpha)`` reuses the first result.
    Alpha lanes are independent and may run on ``threads`` worker threads;
    results come back in grid order either way.
    """
    if len(grid) == 0:
        raise ValueError("grid is empty")
    prob = problem if problem is not None else Problem(X, y, tree, base_cfg.intercept)
    lanes: dict[float, list[int]] = {}
    for i, (_, a) in enumerate(grid):
        lanes.setdefault(float(a), []).append(i)
    results: list[FitResult | None] = [None] * len(grid)

    def run_lane(idx):
        warm = None
        done: dict[float, FitResult] = {}
        for i in idx:
            lam, a = grid[i]
            if float(lam) in done:  # repeated grid point: same answer
                results[i] = done[float(lam)]
                continue
            cfg = replace(base_cfg, lam=float(lam), alpha=float(a))
            res = _run(prob, cfg, _warm_state(prob, warm), False)
            # the next solve mutates its own copy of the state
            results[i] = res
            done[float(lam)] = res
            warm = res

    if threads > 1 and len(lanes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_lane, lanes.values()))
    else:
        for idx in lanes.values():
            run_lane(idx)
    return results
