"""Simulation generators, sweeps and Monte-Carlo checks of the theory.

Every generator is a pure function of its spec and seed; per-replicate
random streams are derived from ``(seed, k, replicate)`` so results do not
depend on execution order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .admm import FitConfig, Problem, fit, fit_path, make_grid
from .baselines import (BlockSpec, lasso_cd, lasso_identity_path_recovers, ols,
                        oracle_lasso_identity, oracle_ls, support_recovered)
from .linop import normalize_for_theory
from .model_selection import metrics, ridge_grid, ridge_svd
from .tree import (AggregatingSet, FeatureTree, aggregation_matrix, build_tree_hclust,
                   coarsest_aggregating_set, cut_tree_k)

PRESETS = {
    "low-dim": dict(n=500, p=100, s=0.0),
    "high-dim": dict(n=100, p=200, s=0.2),
    "distortion": dict(n=100, p=200, s=0.2, k=10),
}
PAPER_K_VALUES = (5, 10, 15, 20, 25, 30)
PAPER_TAUS = (0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class ExperimentSpec:
    """Generative parameters for the simulations.

    ``sigma=None`` applies the rule ``sigma = ||X beta*||_2 / (5 n)``.
    ``tau`` is the spread of the latent vectors around their centers.
    """

    n: int = 100
    p: int = 200
    k: int = 10
    s: float = 0.0
    tau: float = 0.1
    sigma: float | None = None
    poisson_rate: float = 0.1
    coef_sd: float = 2.0
    linkage: str = "complete"
    seed: int = 0
    replicates: int = 100

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.k < 1:
            raise ValueError("n, p and k must be positive")
        if self.p % self.k:
            raise ValueError(f"p={self.p} is not divisible by k={self.k}")
        ks = self.k * self.s
        if not 0 <= self.s <= 1 or abs(ks - round(ks)) > 1e-9:
            raise ValueError(f"k*s = {ks} must be an integer in [0, k]")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.replicates < 1:
            raise ValueError("replicates must be positive")

    @property
    def n_zero_groups(self) -> int:
        return int(round(self.k * self.s))

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentSpec":
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


@dataclass(frozen=True, eq=False)
class Scenario:
    X: np.ndarray
    y: np.ndarray
    tree: FeatureTree
    beta_star: np.ndarray
    B_star: AggregatingSet
    beta_tilde: np.ndarray
    sigma: float
    groups: np.ndarray

    @property
    def active_nodes(self) -> list[int]:
        return [u for u, b in zip(self.B_star.ordered(self.tree), self.beta_tilde) if b != 0]


def simplex_vertices(k: int) -> np.ndarray:
    """``k`` points in ``R^(k-1)`` with all pairwise distances ``sqrt(2)``.

    The standard basis of ``R^k`` expressed in an orthonormal basis of the
    hyperplane orthogonal to the all-ones vector. ``k = 1`` gives the
    origin of ``R^1``.
    """
    if k == 1:
        return np.zeros((1, 1))
    E = np.eye(k) - 1.0 / k
    U, _, _ = np.linalg.svd(E)
    return E @ U[:, :k - 1]


def replicate_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(x) for x in keys]])


def _latents(spec: ExperimentSpec, rng, tau: float) -> tuple[np.ndarray, np.ndarray]:
    centers = simplex_vertices(spec.k)
    groups = np.repeat(np.arange(spec.k), spec.p // spec.k)
    Z = rng.standard_normal((spec.p, centers.shape[1]))
    return centers[groups] + tau * Z, groups


def _noise_sigma(spec: ExperimentSpec, signal: np.ndarray) -> float:
    if spec.sigma is not None:
        return float(spec.sigma)
    return float(np.linalg.norm(signal) / (5 * spec.n))


def gen_scenario(spec: ExperimentSpec, seed: int | None = None, *,
                 planted: bool = False, normalize: bool = False) -> Scenario:
    """Draw one simulated data set.

    The tree comes from hierarchical clustering of ``p`` latent vectors
    spread by ``tau`` around ``k`` simplex vertices. With ``planted=False``
    the tree is cut into ``k`` branches that define the true groups;
    with ``planted=True`` the groups are the generating clusters
    themselves and the tree may disagree with them. ``normalize`` scales
    ``X`` so that ``||X 1||^2 = n`` before the response is drawn.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    latents, planted_groups = _latents(spec, rng, spec.tau)
    tree = build_tree_hclust(latents, spec.linkage)
    A = aggregation_matrix(tree)
    k = spec.k
    beta_tilde = np.zeros(k)
    beta_tilde[spec.n_zero_groups:] = rng.normal(0.0, spec.coef_sd, k - spec.n_zero_groups)
    if planted:
        groups = planted_groups
        beta_star = beta_tilde[groups]
    else:
        cut = cut_tree_k(tree, k)
        nodes = cut.ordered(tree)
        beta_star = np.asarray(A.submatrix(nodes) @ beta_tilde).ravel()
        groups = cut.labels(tree)
    X = rng.poisson(spec.poisson_rate, (spec.n, spec.p)).astype(float)
    if normalize and X.any():
        X = normalize_for_theory(X).dense()
    signal = X @ beta_star
    sigma = _noise_sigma(spec, signal)
    y = signal + sigma * rng.standard_normal(spec.n)
    if planted:
        B_star = coarsest_aggregating_set(tree, beta_star)
        bt = np.array([beta_star[tree.leaf_sets[u - 1][0]] for u in B_star.ordered(tree)])
    else:
        B_star, bt = cut, beta_tilde
    return Scenario(X, y, tree, beta_star, B_star, bt, sigma, groups)


# --- sweeps -----------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    """Tuning grids and solver settings for the simulation sweeps.

    ``rho=None`` scales the ADMM step to the data as the mean of
    ``||X_j||^2 / n``, which converges several times faster than ``rho = 1``
    on sparse count designs.
    """

    n_lambda: int = 50
    n_alpha: int = 8
    lambda_ratio: float | None = None
    eps_abs: float = 1e-6
    eps_rel: float = 1e-5
    max_iter: int = 20000
    rho: float | None = None
    threads: int = 1

    def ratio(self, n: int, p: int) -> float:
        if self.lambda_ratio is not None:
            return self.lambda_ratio
        return 1e-4 if n > p else 1e-2

    def base_cfg(self, X=None) -> FitConfig:
        rho = self.rho
        if rho is None:
            rho = float(np.mean(X ** 2)) if X is not None and X.any() else 1.0
        return FitConfig(lam=0.0, alpha=0.0, rho=rho, eps_abs=self.eps_abs,
                         eps_rel=self.eps_rel, max_iter=self.max_iter)


def _err(kind: str, sc: Scenario, beta: np.ndarray) -> float:
    m = metrics(beta, sc.beta_star, sc.X)
    return m.estimation_error if kind == "estimation" else m.prediction_error


def best_errors(sc: Scenario, cfg: SweepConfig, methods: Sequence[str],
                kind: str = "estimation") -> dict[str, float]:
    """Best-over-grid error of each requested method on one data set."""
    n, p = sc.X.shape
    ratio = cfg.ratio(n, p)
    out: dict[str, float] = {}
    if "ours" in methods:
        grid = make_grid(sc.X, sc.y, p=p, n_lambda=cfg.n_lambda, n_alpha=cfg.n_alpha, ratio=ratio,
                         tree=sc.tree)
        prob = Problem(sc.X, sc.y, sc.tree)
        res = fit_path(sc.X, sc.y, sc.tree, grid, cfg.base_cfg(sc.X), problem=prob)
        out["ours"] = min(_err(kind, sc, r.beta) for r in res)
    if "oracle" in methods:
        out["oracle"] = _err(kind, sc, oracle_ls(sc.X, sc.tree, sc.y, sc.B_star, sc.active_nodes))
    if "ols" in methods:
        out["ols"] = _err(kind, sc, ols(sc.X, sc.y))
    if "lasso" in methods:
        lmax = float(np.max(np.abs(sc.X.T @ sc.y)) / n) or 1.0
        beta = np.zeros(p)
        errs = []
        for lam in np.geomspace(lmax, lmax * ratio, cfg.n_lambda):
            beta = lasso_cd(sc.X, sc.y, lam, beta0=beta)
            errs.append(_err(kind, sc, beta))
        out["lasso"] = min(errs)
    if "ridge" in methods:
        out["ridge"] = min(_err(kind, sc, b) for b in ridge_svd(sc.X, sc.y, ridge_grid(sc.X, sc.y, cfg.n_lambda)))
    if "null" in methods:
        out["null"] = _err(kind, sc, np.zeros(p))
    return out


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _map(fn: Callable, items: list, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def scenario_methods(spec: ExperimentSpec) -> list[str]:
    extra = ["ols"] if spec.s == 0 and spec.n > spec.p else ["lasso", "ridge"]
    return ["ours", "oracle", *extra, "null"]


def run_scenario_sweep(base_spec: ExperimentSpec, k_values: Sequence[int],
                       cfg: SweepConfig = SweepConfig(), methods: Sequence[str] | None = None,
                       return_raw: bool = False):
    """Best mean-squared estimation error versus ``k`` for each method.

    Rows: ``{"k", "method", "mean_err", "se", "replicates"}``.
    """
    for k in k_values:
        if base_spec.p % k:
            raise ValueError(f"k={k} does not divide p={base_spec.p}")
    methods = list(methods) if methods is not None else scenario_methods(base_spec)
    rows, raw = [], {}
    for k in k_values:
        spec = replace(base_spec, k=int(k))

        def one(rep, spec=spec):
            sc = gen_scenario(spec, replicate_rng(spec.seed, spec.k, rep).integers(2 ** 63))
            return best_errors(sc, cfg, methods, "estimation")

        per_rep = _map(one, list(range(spec.replicates)), cfg.threads)
        raw[int(k)] = per_rep
        for m in methods:
            mean, se = _mean_se([r[m] for r in per_rep])
            rows.append({"k": int(k), "method": m, "mean_err": mean, "se": se,
                         "replicates": spec.replicates})
    return (rows, raw) if return_raw else rows


def run_distortion_sweep(spec: ExperimentSpec, tau_values: Sequence[float],
                         cfg: SweepConfig = SweepConfig(), return_raw: bool = False):
    """Best in-sample prediction error of our method versus latent spread ``tau``.

    The true grouping is the generating clusters; only the tree changes
    with ``tau``. Each replicate reuses its random draws across all
    ``tau`` values so the comparison is paired.
    """
    rows, raw = [], {}
    for tau in tau_values:
        s = replace(spec, tau=float(tau))

        def one(rep, s=s):
            sc = gen_scenario(s, replicate_rng(s.seed, s.k, rep).integers(2 ** 63), planted=True)
            return best_errors(sc, cfg, ["ours"], "prediction")["ours"]

        errs = _map(one, list(range(s.replicates)), cfg.threads)
        raw[float(tau)] = errs
        mean, se = _mean_se(errs)
        rows.append({"tau": float(tau), "method": "ours", "mean_err": mean, "se": se,
                     "replicates": s.replicates})
    return (rows, raw) if return_raw else rows


# --- theory checks ----------------------------------------------------------

def c_tilde() -> float:
    """Constant from the Gaussian tail lower bound used for the lasso failure result."""
    return math.exp(1.0 / (math.pi / 2 + 2)) * math.sqrt(0.25 + 1.0 / math.pi) / 3.0


def binomial_se(rate: float, m: int) -> float:
    return math.sqrt(max(rate * (1 - rate), 0.0) / m)


def wilson_interval(successes: int, m: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if m == 0:
        return (0.0, 1.0)
    ph = successes / m
    den = 1 + z * z / m
    mid = (ph + z * z / (2 * m)) / den
    half = z * math.sqrt(ph * (1 - ph) / m + z * z / (4 * m * m)) / den
    return (max(0.0, mid - half), min(1.0, mid + half))


def ols_failure_design(n: int, k: int, rng, companions: int = 2) -> np.ndarray:
    """Binary column with exactly ``k`` ones followed by Gaussian companions."""
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    xj = np.zeros(n)
    xj[rng.choice(n, size=k, replace=False)] = 1.0
    return np.column_stack([xj, rng.standard_normal((n, companions))])


def verify_ols_failure(n_values: Sequence[int], k: int, eta: float, sigma: float,
                       replicates: int, seed: int = 0, companions: int = 2,
                       chunk: int = 2 ** 22) -> list[dict]:
    """Monte-Carlo exceedance ``P(|b_j - b*_j| > eta)`` of OLS on a rare binary column.

    The design is drawn once per ``n``; only the noise is resampled. The OLS
    coefficient is linear in ``y``, so each replicate is ``b*_j + c^T eps``
    with ``c`` the matching row of the pseudo-inverse.
    """
    bound = 2 * ndtr(-eta * math.sqrt(k) / sigma)
    rows = []
    for n in n_values:
        rng = replicate_rng(seed, n)
        X = ols_failure_design(int(n), k, rng, companions)
        beta_star = np.concatenate([[1.0], np.linspace(0.5, -0.5, companions)])
        c = np.linalg.pinv(X)[0]
        mean_part = c @ (X @ beta_star) - beta_star[0]  # ~0 up to rounding
        per = max(1, chunk // int(n))
        hits = 0
        done = 0
        while done < replicates:
            m = min(per, replicates - done)
            eps = rng.standard_normal((m, int(n)))
            dev = mean_part + sigma * (eps @ c)
            hits += int(np.count_nonzero(np.abs(dev) > eta))
            done += m
        emp = hits / replicates
        se = binomial_se(emp, replicates)
        exact = 2 * ndtr(-eta / (sigma * math.sqrt(float(c @ c))))
        rows.append({"n": int(n), "k": k, "eta": eta, "sigma": sigma, "replicates": replicates,
                     "empirical": emp, "se": se, "bound": bound, "exact": exact,
                     "holds": bool(emp >= bound - 3 * se)})
    return rows


class SignalWindowError(ValueError):
    """The admissible signal window for (n, k, sigma) is empty or excludes the signal."""


def signal_window(n: int, k: int, sigma: float) -> tuple[float, float]:
    lo = sigma * math.sqrt(4 * k * math.log(k * k * n) / n)
    arg = 2 * c_tilde() * (k - 1) * n / k
    hi = sigma * math.sqrt(math.log(arg) / 3) if arg > 1 else 0.0
    return lo, hi


@dataclass(frozen=True)
class RecoveryRecord:
    n: int
    k: int
    sigma: float
    signal: float
    replicates: int
    window: tuple
    lam_oracle: float
    oracle_rate: float
    oracle_ci: tuple
    oracle_bound: float
    lasso_rate: float
    lasso_ci: tuple
    lasso_bound: float
    c_tilde: float = field(default_factory=c_tilde)

    def as_dict(self) -> dict:
        return asdict(self)


def verify_support_recovery(n: int, k: int, signal: float | None = None, replicates: int = 1000,
                            sigma: float = 1.0, seed: int = 0) -> RecoveryRecord:
    """Signed-support recovery of the oracle lasso versus the lasso with ``X = I_n``.

    The oracle uses ``lam = sigma * sqrt(log(k^2 n) / (k n))``; the lasso
    is credited if any lam recovers the signed support (checked exactly
    from the sorted magnitudes). ``signal=None`` takes the upper end of
    the admissible window.
    """
    if n % k:
        raise ValueError("n must be divisible by k")
    lo, hi = signal_window(n, k, sigma)
    if sigma > 0:
        if not lo < hi:
            raise SignalWindowError(f"empty signal window ({lo:.4g}, {hi:.4g}] for n={n}, k={k}")
        signal = hi if signal is None else float(signal)
        if not lo < signal <= hi:
            raise SignalWindowError(f"signal {signal:.4g} outside window ({lo:.4g}, {hi:.4g}]")
    elif signal is None:
        raise SignalWindowError("sigma = 0 needs an explicit signal")
    signs = np.where(np.arange(k - 1) % 2 == 0, 1.0, -1.0)
    bt = np.concatenate([signal * signs, [0.0]])
    spec = BlockSpec(k, n, bt)
    beta_star = spec.beta_star()
    lam = sigma * math.sqrt(math.log(k * k * n) / (k * n)) if sigma > 0 else 1e-12
    rng = replicate_rng(seed, n, k)
    ok_or = ok_la = 0
    for _ in range(replicates):
        y = beta_star + sigma * rng.standard_normal(n)
        ok_or += support_recovered(oracle_lasso_identity(y, spec, lam), beta_star)
        ok_la += lasso_identity_path_recovers(y, beta_star)
    ct = c_tilde()
    lasso_bound = (ct * (k - 1) * n / (32 * k)) ** (-n / (6 * k)) + (1 - k / n) ** (n / k)
    return RecoveryRecord(
        n=n, k=k, sigma=sigma, signal=float(signal), replicates=replicates, window=(lo, hi),
        lam_oracle=lam, oracle_rate=ok_or / replicates, oracle_ci=wilson_interval(ok_or, replicates),
        oracle_bound=1 - 2 / math.sqrt(n), lasso_rate=ok_la / replicates,
        lasso_ci=wilson_interval(ok_la, replicates), lasso_bound=float(lasso_bound))


def theory_lambda(sigma: float, n: int, p: int) -> float:
    return 8 * sigma * math.sqrt(math.log(2 * p) / n)


def bound_terms(sc: Scenario, beta_hat: np.ndarray, lam: float, alpha: float) -> dict:
    """Both sides of the slow-rate prediction bound and its balanced-alpha forms."""
    n, p = sc.X.shape
    B = coarsest_aggregating_set(sc.tree, sc.beta_star)
    bt = np.array([sc.beta_star[sc.tree.leaf_sets[u - 1][0]] for u in B.ordered(sc.tree)])
    support = int(np.count_nonzero(sc.beta_star))
    M = float(np.max(np.abs(sc.beta_star), initial=0.0))
    d = sc.X @ (beta_hat - sc.beta_star)
    lhs = float(d @ d / n)
    rate = sc.sigma * math.sqrt(math.log(2 * p) / n)
    rhs_thm = 3 * lam * (alpha * np.abs(bt).sum() + (1 - alpha) * np.abs(sc.beta_star).sum())
    rhs_cor = 24 * rate * M * (alpha * len(B) + (1 - alpha) * support)
    rhs_min = 48 * rate * M * min(support, len(B))
    A = aggregation_matrix(sc.tree)
    col_norms = np.linalg.norm(np.asarray(sc.X @ A.toarray()), axis=0)
    return {"lhs": lhs, "rhs_bound": float(rhs_thm), "rhs_balanced": float(rhs_cor),
            "rhs_min": float(rhs_min), "support": support, "n_groups": len(B),
            "M": M, "node_count": sc.tree.node_count, "max_col_norm": float(col_norms.max()),
            "sqrt_n": math.sqrt(n)}


def balanced_alpha(sc: Scenario) -> float:
    B = coarsest_aggregating_set(sc.tree, sc.beta_star)
    a = np.count_nonzero(sc.beta_star)
    return a / (a + len(B))


def verify_prediction_bound(spec: ExperimentSpec, replicates: int | None = None,
                            alpha: float | None = None, fit_kwargs: dict | None = None) -> dict:
    """Monte-Carlo check of the prediction bound at the theory's lam.

    ``X`` is normalized so ``||X 1||^2 = n``; lam is ``8 sigma sqrt(log 2p / n)``
    and alpha defaults to the balanced ``|A*| / (|A*| + |B*|)``.
    """
    R = spec.replicates if replicates is None else replicates
    kw = dict(eps_abs=1e-8, eps_rel=1e-7, max_iter=50000)
    kw.update(fit_kwargs or {})
    per_rep = []
    for rep in range(R):
        sc = gen_scenario(spec, replicate_rng(spec.seed, spec.k, rep).integers(2 ** 63),
                          normalize=True)
        n, p = sc.X.shape
        if abs(np.sum(sc.X.sum(axis=1) ** 2) - n) > 1e-8 * n:
            raise ValueError("design is not normalized")
        a = balanced_alpha(sc) if alpha is None else alpha
        if a > 1 / (1 + 1 / p) + 1e-12:
            raise ValueError(f"alpha={a} exceeds (1 + 1/p)^-1")
        lam = theory_lambda(sc.sigma, n, p)
        res = fit(sc.X, sc.y, sc.tree, FitConfig(lam=lam, alpha=a, **kw))
        t = bound_terms(sc, res.beta, lam, a)
        t.update({"replicate": rep, "lam": lam, "alpha": a, "sigma": sc.sigma,
                  "converged": res.converged})
        per_rep.append(t)
    p = spec.p
    nominal = 1 / p
    se = binomial_se(nominal, R)
    viol_thm = np.mean([t["lhs"] > t["rhs_bound"] for t in per_rep])
    viol_cor = np.mean([t["lhs"] > t["rhs_balanced"] for t in per_rep])
    viol_min = np.mean([t["lhs"] > t["rhs_min"] for t in per_rep])
    tree_ok = all(t["node_count"] <= 2 * p for t in per_rep)
    norm_ok = all(t["max_col_norm"] <= t["sqrt_n"] * (1 + 1e-10) for t in per_rep)
    return {"replicates": R, "violation_bound": float(viol_thm),
            "violation_balanced": float(viol_cor), "violation_min": float(viol_min),
            "allowed": nominal + 3 * se, "tree_size_ok": tree_ok, "column_norm_ok": norm_ok,
            "per_replicate": per_rep}
