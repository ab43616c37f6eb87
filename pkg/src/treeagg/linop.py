"""Dense/sparse linear-algebra kernels shared by the solvers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kernels

RANK_RTOL = 1e-12


def soft_threshold(x, lam):
    """Elementwise ``sign(x) * max(|x| - lam, 0)``."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be nonnegative")
    out = np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True, eq=False)
class CountDesign:
    """Nonnegative design matrix plus the global scale applied to it.

    ``values`` is either a dense array or a scipy CSC matrix. Coefficients
    fitted on the scaled design map back to the original one by
    multiplying with ``scale_factor``.
    """

    values: np.ndarray | sp.csc_matrix
    scale_factor: float = 1.0

    def __post_init__(self):
        v = self.values
        data = v.data if sp.issparse(v) else np.asarray(v)
        if data.size and not np.all(np.isfinite(data)):
            raise ValueError("design has non-finite entries")
        if data.size and data.min() < 0:
            raise ValueError("count design must be nonnegative")

    @classmethod
    def from_any(cls, X) -> "CountDesign":
        if isinstance(X, CountDesign):
            return X
        if sp.issparse(X):
            return cls(sp.csc_matrix(X, dtype=float))
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("design must be 2-D")
        return cls(X)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.values)

    def dense(self) -> np.ndarray:
        return self.values.toarray() if self.is_sparse else np.asarray(self.values)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.values.sum(axis=1)).ravel()

    def __matmul__(self, other):
        out = self.values @ other
        return out.toarray() if sp.issparse(out) else np.asarray(out)


def as_dense(X) -> np.ndarray:
    if isinstance(X, CountDesign):
        return X.dense()
    if sp.issparse(X):
        return X.toarray()
    return np.asarray(X, dtype=float)


def normalize_for_theory(X) -> CountDesign:
    """Scale ``X`` globally so that ``||X 1_p||_2^2 = n``."""
    D = CountDesign.from_any(X)
    norm = np.linalg.norm(D.row_sums())
    if norm == 0:
        raise ValueError("cannot normalize an all-zero design")
    c = np.sqrt(D.n) / norm
    return CountDesign(D.values * c, D.scale_factor * c)


@dataclass(frozen=True, eq=False)
class CompactSVD:
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.D.shape[0])


def compact_svd(M, rtol: float = RANK_RTOL) -> CompactSVD:
    """Thin SVD keeping singular values above ``rtol * max``."""
    M = as_dense(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    U, d, Vt = np.linalg.svd(M, full_matrices=False)  # LinAlgError propagates
    keep = d > rtol * d[0] if d.size and d[0] > 0 else np.zeros(d.shape, dtype=bool)
    return CompactSVD(U[:, keep], d[keep], Vt[keep].T)


def centering_projection(v) -> np.ndarray:
    """Apply ``I - 11^T/n`` (to a vector or to the columns of a matrix)."""
    v = np.asarray(v, dtype=float)
    return v - v.mean(axis=0)


@dataclass(frozen=True, eq=False)
class NullspaceProjector:
    """Orthogonal projector onto ``{(beta, gamma): beta = A gamma}``.

    Stored as ``Q`` (right singular vectors of ``(I_p : -A)`` with nonzero
    singular values) and applied as ``z - Q (Q^T z)``.
    """

    Q: np.ndarray

    @property
    def p(self) -> int:
        return self.Q.shape[1]

    def apply(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z - self.Q @ (self.Q.T @ z)

    def split(self, beta, gamma):
        out = self.apply(np.concatenate([beta, gamma]))
        return out[:self.p], out[self.p:]


def constraint_matrix(A) -> np.ndarray:
    Ad = A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)
    return np.hstack([np.eye(Ad.shape[0]), -Ad])


def nullspace_projector(A) -> NullspaceProjector:
    svd = compact_svd(constraint_matrix(A))
    return NullspaceProjector(np.ascontiguousarray(svd.V))


def projection_weights(parent, p: int) -> np.ndarray:
    """``1 / (a_u + 1)`` where ``a_u`` is the curvature of node ``u``'s cost-to-go.

    Leaves have ``a = 1``; an internal node sums ``a_v / (a_v + 1)`` over
    its children. Nodes must be in canonical order (children first).
    """
    parent = np.asarray(parent, dtype=np.int64)
    a = np.zeros(parent.shape[0])
    a[:p] = 1.0
    for u in range(parent.shape[0] - 1):
        a[parent[u]] += a[u] / (a[u] + 1.0)
    return 1.0 / (a + 1.0)


@dataclass(frozen=True, eq=False)
class TreeProjector:
    """Same projection as :class:`NullspaceProjector` in ``O(|T|)`` operations.

    Writing ``c_u`` for the sum of ``gamma`` along the path from the root
    to ``u`` turns the projection into a quadratic that is pairwise on the
    tree, solved exactly by one upward and one downward pass.
    """

    parent: np.ndarray
    inv: np.ndarray
    p: int

    @classmethod
    def from_tree(cls, tree) -> "TreeProjector":
        parent = np.ascontiguousarray(tree.parent, dtype=np.int64)
        return cls(parent, projection_weights(parent, tree.leaf_count), tree.leaf_count)

    def split(self, beta, gamma):
        return kernels.tree_project(self.parent, self.inv, self.p,
                                    np.ascontiguousarray(beta, dtype=float),
                                    np.ascontiguousarray(gamma, dtype=float))

    def apply(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.concatenate(self.split(z[:self.p], z[self.p:]))
