# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

cdef dict _METHOD = {"single": 0, "complete": 1, "average": 2, "ward": 3}


cdef inline double _soft(double x, double lam) noexcept nogil:
    if x > lam:
        return x - lam
    if x < -lam:
        return x + lam
    return 0.0


def soft_threshold_inplace(double[::1] x, double lam):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        x[i] = _soft(x[i], lam)
    return np.asarray(x)


def agglomerate(dist, method):
    if method not in _METHOD:
        raise ValueError(f"unknown linkage {method!r}")
    cdef int code = _METHOD[method]
    cdef double[:, ::1] d = np.array(dist, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = d.shape[0]
    cdef Py_ssize_t m = n - 1 if n > 1 else 0
    merges_arr = np.zeros((m, 2), dtype=np.int64)
    heights_arr = np.zeros(m)
    if n < 2:
        return merges_arr, heights_arr
    cdef cnp.int64_t[:, ::1] merges = merges_arr
    cdef double[::1] heights = heights_arr
    cdef double[::1] size = np.ones(n)
    cdef cnp.int64_t[::1] cid = np.arange(n, dtype=np.int64)
    cdef unsigned char[::1] active = np.ones(n, dtype=np.uint8)
    cdef Py_ssize_t step, i, j, a, b, k
    cdef double best, dij, dik, djk, ni, nj, nk, val
    with nogil:
        for step in range(n - 1):
            best = INFINITY
            i = -1
            j = -1
            for a in range(n):
                if not active[a]:
                    continue
                for b in range(a + 1, n):
                    if active[b] and d[a, b] < best:
                        best = d[a, b]
                        i = a
                        j = b
            if i < 0:
                # remaining distances are all +inf; merge the first two slots
                for a in range(n):
                    if active[a]:
                        if i < 0:
                            i = a
                        elif j < 0:
                            j = a
                best = d[i, j]
            dij = best
            merges[step, 0] = cid[i]
            merges[step, 1] = cid[j]
            heights[step] = dij
            ni = size[i]
            nj = size[j]
            for k in range(n):
                if not active[k] or k == i or k == j:
                    continue
                dik = d[i, k] if i < k else d[k, i]
                djk = d[j, k] if j < k else d[k, j]
                if code == 0:
                    val = dik if dik < djk else djk
                elif code == 1:
                    val = dik if dik > djk else djk
                elif code == 2:
                    val = (ni * dik + nj * djk) / (ni + nj)
                else:
                    nk = size[k]
                    val = ((ni + nk) * dik * dik + (nj + nk) * djk * djk
                           - nk * dij * dij) / (ni + nj + nk)
                    val = sqrt(val) if val > 0.0 else 0.0
                if i < k:
                    d[i, k] = val
                else:
                    d[k, i] = val
            active[j] = 0
            size[i] = ni + nj
            cid[i] = n + step
    return merges_arr, heights_arr


def cd_lasso(double[::1, :] X, double[::1] y, double lam, double[::1] weights,
             double[::1] beta, int max_iter, double tol):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef double[::1] col_sq = np.empty(p)
    cdef double[::1] r = np.array(y, dtype=np.float64, copy=True)
    cdef Py_ssize_t i, j
    cdef int sweeps = 0, it
    cdef double s, z, thr, new, old, delta, change, max_change, cj
    with nogil:
        for j in range(p):
            s = 0.0
            for i in range(n):
                s += X[i, j] * X[i, j]
            col_sq[j] = s / n
            if beta[j] != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * beta[j]
        for it in range(1, max_iter + 1):
            sweeps = it
            max_change = 0.0
            for j in range(p):
                cj = col_sq[j]
                old = beta[j]
                if cj == 0.0:
                    beta[j] = 0.0
                    continue
                s = 0.0
                for i in range(n):
                    s += X[i, j] * r[i]
                z = old * cj + s / n
                thr = lam * weights[j]
                new = _soft(z, thr) / cj
                if new != old:
                    delta = new - old
                    for i in range(n):
                        r[i] -= delta * X[i, j]
                    beta[j] = new
                    change = fabs(delta) * sqrt(cj)
                    if change > max_change:
                        max_change = change
            if max_change < tol:
                break
    return sweeps


cdef inline void _matvec(const double[:, ::1] M, double* x, double* out,
                         bint transpose) noexcept nogil:
    # out = M @ x (transpose=False) or M.T @ x (transpose=True); M is C-ordered
    cdef int rows = <int>M.shape[0]
    cdef int cols = <int>M.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    cdef char trans
    cdef Py_ssize_t i
    if rows == 0 or cols == 0:
        if transpose:
            for i in range(cols):
                out[i] = 0.0
        else:
            for i in range(rows):
                out[i] = 0.0
        return
    trans = b'N' if transpose else b'T'
    dgemv(&trans, &cols, &rows, &one, <double*>&M[0, 0], &cols, x, &inc, &zero, out, &inc)


cdef void _tree_project(const cnp.int64_t* parent, const double* inv, Py_ssize_t p,
                        Py_ssize_t T, const double* b, const double* g, double* h,
                        double* c, double* out_b, double* out_g) noexcept nogil:
    cdef Py_ssize_t u
    for u in range(T):
        h[u] = b[u] if u < p else 0.0
    for u in range(T - 1):
        h[parent[u]] += h[u] * inv[u] - (1.0 - inv[u]) * g[u]
    c[T - 1] = (h[T - 1] + g[T - 1]) * inv[T - 1]
    for u in range(T - 2, -1, -1):
        c[u] = (h[u] + c[parent[u]] + g[u]) * inv[u]
    for u in range(T - 1):
        out_g[u] = c[u] - c[parent[u]]
    out_g[T - 1] = c[T - 1]
    for u in range(p):
        out_b[u] = c[u]


def tree_project(const cnp.int64_t[::1] parent, const double[::1] inv, Py_ssize_t p,
                 const double[::1] b, const double[::1] g):
    cdef Py_ssize_t T = parent.shape[0]
    out_b = np.empty(p)
    out_g = np.empty(T)
    cdef double[::1] ob = out_b, og = out_g
    cdef double[::1] h = np.empty(T), c = np.empty(T)
    _tree_project(&parent[0], &inv[0], p, T, &b[0], &g[0], &h[0], &c[0],
                  &ob[0], &og[0])
    return out_b, out_g


def admm_run(const double[::1] xty, const double[:, ::1] V, const double[::1] scale,
             const cnp.int64_t[::1] parent, const double[::1] inv, Py_ssize_t root, double thr_beta,
             double thr_gamma, double rho, double n, double eps_abs,
             double eps_rel, int max_iter, dict st, bint check_duals=False):
    cdef double[::1] beta = st["beta"], gamma = st["gamma"]
    cdef double[::1] v1 = st["v1"], v2 = st["v2"], v3 = st["v3"]
    cdef double[::1] u1 = st["u1"], u2 = st["u2"]
    cdef double[::1] b1 = st["b1"], b2 = st["b2"], b3 = st["b3"]
    cdef double[::1] g1 = st["g1"], g2 = st["g2"]
    cdef Py_ssize_t p = beta.shape[0]
    cdef Py_ssize_t T = gamma.shape[0]
    cdef Py_ssize_t mrank = V.shape[1]
    cdef double[::1] rhs = np.empty(p)
    cdef double[::1] t = np.empty(mrank)
    cdef double[::1] tmp = np.empty(p)
    cdef double[::1] zb = np.empty(p)
    cdef double[::1] zg = np.empty(T)
    cdef double[::1] h = np.empty(T)
    cdef double[::1] c = np.empty(T)
    cdef double nrho = n * rho
    cdef double sqrt_dim = sqrt(3.0 * p + 2.0 * T)
    cdef double r2, s2, x2, z2, y2, bn, gn, d, eps_pri, eps_dual
    cdef double r_norm = INFINITY, s_norm = INFINITY
    cdef double vb, ub, worst, big
    cdef bint converged = False
    cdef int it = 0, k
    cdef Py_ssize_t i
    with nogil:
        for k in range(1, max_iter + 1):
            it = k
            for i in range(p):
                rhs[i] = xty[i] + nrho * beta[i] - n * v1[i]
            _matvec(V, &rhs[0], &t[0] if mrank > 0 else NULL, True)
            # b1 = V (scale * t) + (rhs - V t) / nrho
            _matvec(V, &t[0] if mrank > 0 else NULL, &tmp[0], False)
            for i in range(p):
                b1[i] = (rhs[i] - tmp[i]) / nrho
            for i in range(mrank):
                t[i] = t[i] * scale[i]
            _matvec(V, &t[0] if mrank > 0 else NULL, &tmp[0], False)
            for i in range(p):
                b1[i] += tmp[i]
                b2[i] = _soft(beta[i] - v2[i] / rho, thr_beta)
                zb[i] = beta[i] - v3[i] / rho
            for i in range(T):
                if i == root:
                    g1[i] = gamma[i] - u1[i] / rho
                else:
                    g1[i] = _soft(gamma[i] - u1[i] / rho, thr_gamma)
                zg[i] = gamma[i] - u2[i] / rho
            _tree_project(&parent[0], &inv[0], p, T, &zb[0], &zg[0], &h[0], &c[0],
                          &b3[0], &g2[0])
            r2 = 0.0
            s2 = 0.0
            x2 = 0.0
            z2 = 0.0
            y2 = 0.0
            for i in range(p):
                bn = (b1[i] + b2[i] + b3[i]) / 3.0
                v1[i] += rho * (b1[i] - bn)
                v2[i] += rho * (b2[i] - bn)
                v3[i] += rho * (b3[i] - bn)
                r2 += (b1[i] - bn) ** 2 + (b2[i] - bn) ** 2 + (b3[i] - bn) ** 2
                d = bn - beta[i]
                s2 += 3.0 * d * d
                x2 += b1[i] * b1[i] + b2[i] * b2[i] + b3[i] * b3[i]
                z2 += 3.0 * bn * bn
                y2 += v1[i] * v1[i] + v2[i] * v2[i] + v3[i] * v3[i]
                beta[i] = bn
            for i in range(T):
                gn = (g1[i] + g2[i]) / 2.0
                u1[i] += rho * (g1[i] - gn)
                u2[i] += rho * (g2[i] - gn)
                r2 += (g1[i] - gn) ** 2 + (g2[i] - gn) ** 2
                d = gn - gamma[i]
                s2 += 2.0 * d * d
                x2 += g1[i] * g1[i] + g2[i] * g2[i]
                z2 += 2.0 * gn * gn
                y2 += u1[i] * u1[i] + u2[i] * u2[i]
                gamma[i] = gn
            if check_duals:
                worst = 0.0
                big = 1.0
                for i in range(p):
                    vb = fabs((v1[i] + v2[i] + v3[i]) / 3.0)
                    if vb > worst:
                        worst = vb
                    if fabs(v1[i]) > big:
                        big = fabs(v1[i])
                for i in range(T):
                    ub = fabs((u1[i] + u2[i]) / 2.0)
                    if ub > worst:
                        worst = ub
                    if fabs(u1[i]) > big:
                        big = fabs(u1[i])
                if worst > 1e-9 * (1.0 + big):
                    with gil:
                        raise AssertionError("averaged duals drifted from zero")
            r_norm = sqrt(r2)
            s_norm = rho * sqrt(s2)
            eps_pri = sqrt_dim * eps_abs + eps_rel * (sqrt(x2) if x2 > z2 else sqrt(z2))
            eps_dual = sqrt_dim * eps_abs + eps_rel * sqrt(y2)
            if r_norm <= eps_pri and s_norm <= eps_dual:
                converged = True
                break
    return it, converged, r_norm, s_norm
