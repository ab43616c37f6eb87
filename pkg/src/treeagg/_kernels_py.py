"""Pure NumPy implementations of the hot kernels.

These mirror ``_kernels.pyx`` line for line and are used whenever the
compiled extension is unavailable (or ``TREEAGG_PURE_PYTHON=1`` is set).
"""
import numpy as np

_LINKAGES = ("single", "complete", "average", "ward")


def soft_threshold_inplace(x, lam):
    np.copyto(x, np.sign(x) * np.maximum(np.abs(x) - lam, 0.0))
    return x


def agglomerate(dist, method):
    """Naive Lance-Williams agglomeration on a full distance matrix.

    Returns ``(merges, heights)`` in the scipy convention: leaves are
    ``0..n-1`` and the cluster created at step ``t`` gets id ``n + t``.
    Among minimal-distance pairs the lexicographically smallest slot pair
    wins; a merged cluster keeps the smaller slot, so slots coincide with
    the smallest leaf index of each cluster.
    """
    if method not in _LINKAGES:
        raise ValueError(f"unknown linkage {method!r}")
    d = np.array(dist, dtype=float, copy=True)
    n = d.shape[0]
    merges = np.zeros((max(n - 1, 0), 2), dtype=np.int64)
    heights = np.zeros(max(n - 1, 0))
    if n < 2:
        return merges, heights
    size = np.ones(n)
    cid = np.arange(n)
    active = np.ones(n, dtype=bool)
    iu = np.triu_indices(n, k=1)
    big = np.inf
    work = np.full((n, n), big)
    work[iu] = d[iu]
    for step in range(n - 1):
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        dij = work[i, j]
        merges[step] = (cid[i], cid[j])
        heights[step] = dij
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        dik = np.where(others < i, work[others, i], work[i, others])
        djk = np.where(others < j, work[others, j], work[j, others])
        ni, nj = size[i], size[j]
        if method == "single":
            new = np.minimum(dik, djk)
        elif method == "complete":
            new = np.maximum(dik, djk)
        elif method == "average":
            new = (ni * dik + nj * djk) / (ni + nj)
        else:
            nk = size[others]
            new = np.sqrt(np.maximum(
                ((ni + nk) * dik ** 2 + (nj + nk) * djk ** 2 - nk * dij ** 2)
                / (ni + nj + nk), 0.0))
        lo = others < i
        work[others[lo], i] = new[lo]
        work[i, others[~lo]] = new[~lo]
        work[j, :] = big
        work[:, j] = big
        active[j] = False
        size[i] = ni + nj
        cid[i] = n + step
    return merges, heights


def cd_lasso(X, y, lam, weights, beta, max_iter, tol):
    """Cyclic coordinate descent for ``(1/2n)||y - X b||^2 + lam * sum w_j |b_j|``.

    ``beta`` is updated in place. Returns the number of sweeps.
    """
    n, p = X.shape
    col_sq = np.einsum("ij,ij->j", X, X) / n
    r = y - X @ beta
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(p):
            cj = col_sq[j]
            old = beta[j]
            if cj == 0.0:
                if old != 0.0:
                    beta[j] = 0.0
                continue
            xj = X[:, j]
            z = old * cj + xj @ r / n
            thr = lam * weights[j]
            if z > thr:
                new = (z - thr) / cj
            elif z < -thr:
                new = (z + thr) / cj
            else:
                new = 0.0
            if new != old:
                delta = new - old
                r -= delta * xj
                beta[j] = new
                change = abs(delta) * np.sqrt(cj)
                if change > max_change:
                    max_change = change
        if max_change < tol:
            break
    return sweeps


def tree_project(parent, inv, p, b, g):
    """Project ``(b, g)`` onto ``{(beta, gamma): beta = A gamma}``.

    Works with path sums ``c_u`` (so ``gamma_u = c_u - c_parent``) and
    eliminates the tree leaves-to-root, then back-substitutes. ``inv`` holds
    ``1 / (a_u + 1)`` for the curvature ``a_u`` of each node's cost-to-go.
    Nodes are in canonical order: children before parents, root last.
    """
    T = parent.shape[0]
    h = np.zeros(T)
    h[:p] = b
    for u in range(T - 1):
        h[parent[u]] += h[u] * inv[u] - (1.0 - inv[u]) * g[u]
    c = np.empty(T)
    c[T - 1] = (h[T - 1] + g[T - 1]) * inv[T - 1]
    for u in range(T - 2, -1, -1):
        c[u] = (h[u] + c[parent[u]] + g[u]) * inv[u]
    gamma = c.copy()
    gamma[:T - 1] -= c[parent[:T - 1]]
    return c[:p].copy(), gamma


def admm_run(xty, V, scale, parent, inv, root, thr_beta, thr_gamma, rho, n,
             eps_abs, eps_rel, max_iter, st, check_duals=False):
    """Run consensus ADMM iterations in place on the state arrays ``st``.

    ``st`` maps names (beta, gamma, v1, v2, v3, u1, u2, b1, b2, b3, g1, g2)
    to float arrays. Returns ``(iterations, converged, r_norm, s_norm)``.
    """
    beta, gamma = st["beta"], st["gamma"]
    v1, v2, v3 = st["v1"], st["v2"], st["v3"]
    u1, u2 = st["u1"], st["u2"]
    p = beta.shape[0]
    T = gamma.shape[0]
    nrho = n * rho
    sqrt_dim = np.sqrt(3 * p + 2 * T)
    r_norm = s_norm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = xty + nrho * beta - n * v1
        t = V.T @ rhs
        b1 = V @ (scale * t) + (rhs - V @ t) / nrho
        b2 = beta - v2 / rho
        soft_threshold_inplace(b2, thr_beta)
        g1 = gamma - u1 / rho
        keep = g1[root]
        soft_threshold_inplace(g1, thr_gamma)
        g1[root] = keep
        b3, g2 = tree_project(parent, inv, p, beta - v3 / rho, gamma - u2 / rho)
        beta_new = (b1 + b2 + b3) / 3.0
        gamma_new = (g1 + g2) / 2.0
        v1 += rho * (b1 - beta_new)
        v2 += rho * (b2 - beta_new)
        v3 += rho * (b3 - beta_new)
        u1 += rho * (g1 - gamma_new)
        u2 += rho * (g2 - gamma_new)
        if check_duals:
            vbar = (v1 + v2 + v3) / 3.0
            ubar = (u1 + u2) / 2.0
            scale_d = 1.0 + max(np.abs(v1).max(initial=0.0), np.abs(u1).max(initial=0.0))
            if max(np.abs(vbar).max(initial=0.0), np.abs(ubar).max(initial=0.0)) > 1e-9 * scale_d:
                raise AssertionError("averaged duals drifted from zero")
        r_norm = np.sqrt(
            np.sum((b1 - beta_new) ** 2) + np.sum((b2 - beta_new) ** 2)
            + np.sum((b3 - beta_new) ** 2) + np.sum((g1 - gamma_new) ** 2)
            + np.sum((g2 - gamma_new) ** 2))
        s_norm = rho * np.sqrt(3 * np.sum((beta_new - beta) ** 2)
                               + 2 * np.sum((gamma_new - gamma) ** 2))
        x_norm = np.sqrt(b1 @ b1 + b2 @ b2 + b3 @ b3 + g1 @ g1 + g2 @ g2)
        z_norm = np.sqrt(3 * beta_new @ beta_new + 2 * gamma_new @ gamma_new)
        y_norm = np.sqrt(v1 @ v1 + v2 @ v2 + v3 @ v3 + u1 @ u1 + u2 @ u2)
        beta[:] = beta_new
        gamma[:] = gamma_new
        st["b1"][:] = b1
        st["b2"][:] = b2
        st["b3"][:] = b3
        st["g1"][:] = g1
        st["g2"][:] = g2
        eps_pri = sqrt_dim * eps_abs + eps_rel * max(x_norm, z_norm)
        eps_dual = sqrt_dim * eps_abs + eps_rel * y_norm
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break
    return it, converged, float(r_norm), float(s_norm)
