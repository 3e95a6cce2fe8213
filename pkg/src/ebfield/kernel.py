"""Compactly supported covariance kernel and sparse covariance assembly.

The kernel is the compactly supported "sparse" covariance

    k(r) = sf2 * [(2 + cos(2 pi r / l)) / 3 * (1 - r / l) + sin(2 pi r / l) / (2 pi)]

for r < l and exactly zero otherwise.  It is positive definite in up to three
dimensions, so covariance matrices built from it are sparse *and* SPD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import InvalidInputError

_TWO_PI = 2.0 * np.pi


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a list of coordinates, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class CompactKernel:
    signal_variance: float
    support_length: float

    def __post_init__(self):
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise InvalidInputError("signal_variance must be positive")
        if not (np.isfinite(self.support_length) and self.support_length > 0):
            raise InvalidInputError("support_length must be positive")

    def of_distance(self, r):
        """Kernel value as a function of distance; vectorized over ``r``."""
        r = np.asarray(r, dtype=float)
        u = r / self.support_length
        inside = u < 1.0
        # evaluate only inside the support so the outside stays a literal 0.0
        uu = np.where(inside, u, 0.0)
        val = (2.0 + np.cos(_TWO_PI * uu)) / 3.0 * (1.0 - uu) + np.sin(_TWO_PI * uu) / _TWO_PI
        out = np.where(inside, self.signal_variance * val, 0.0)
        return float(out) if out.ndim == 0 else out

    def __call__(self, a, b) -> float:
        return kernel_eval(self, a, b)


def kernel_eval(k: CompactKernel, a, b) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    # sum of squares is symmetric bit-for-bit in (a, b)
    r = float(np.sqrt(np.sum((a - b) ** 2)))
    return k.of_distance(r)


class SparseCovariance:
    """Covariance matrix storing only the structurally nonzero entries.

    Backed by a CSR matrix with sorted column indices, so ``neighbors(i)``
    is the ordered list of columns holding a stored entry in row ``i``.
    """

    def __init__(self, matrix: sp.csr_matrix):
        m = sp.csr_matrix(matrix)
        m.sort_indices()
        self._m = m

    @property
    def rows(self) -> int:
        return self._m.shape[0]

    @property
    def cols(self) -> int:
        return self._m.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._m.shape

    @property
    def csr(self) -> sp.csr_matrix:
        return self._m

    @property
    def entries(self) -> dict[tuple[int, int], float]:
        m = self._m
        out = {}
        for i in range(m.shape[0]):
            for ptr in range(m.indptr[i], m.indptr[i + 1]):
                out[(i, int(m.indices[ptr]))] = float(m.data[ptr])
        return out

    def neighbors(self, row: int) -> np.ndarray:
        m = self._m
        return m.indices[m.indptr[row]:m.indptr[row + 1]].copy()

    def row_values(self, row: int) -> np.ndarray:
        m = self._m
        return m.data[m.indptr[row]:m.indptr[row + 1]].copy()

    # alias following the notation of the MAP formula
    effective_neighbors = neighbors

    @property
    def nnz(self) -> int:
        return self._m.nnz

    def toarray(self) -> np.ndarray:
        return self._m.toarray()

    def __matmul__(self, other):
        return self._m @ other

    def __repr__(self) -> str:
        return f"SparseCovariance({self.rows}x{self.cols}, nnz={self.nnz})"


def _pairs_within(a: np.ndarray, b: np.ndarray, radius: float):
    """Index pairs (i, j) with |a_i - b_j| < radius, plus the distances."""
    ta, tb = cKDTree(a), cKDTree(b)
    dist = ta.sparse_distance_matrix(tb, radius, output_type="coo_matrix")
    rows, cols, d = dist.row, dist.col, dist.data
    # sparse_distance_matrix drops exact-zero distances; restore coincident pairs
    same = ta.query_ball_tree(tb, 0.0)
    extra_r = [i for i, js in enumerate(same) for _ in js]
    extra_c = [j for js in same for j in js]
    rows = np.concatenate([rows, np.asarray(extra_r, dtype=int)])
    cols = np.concatenate([cols, np.asarray(extra_c, dtype=int)])
    d = np.concatenate([d, np.zeros(len(extra_r))])
    keep = d < radius
    rows, cols, d = rows[keep], cols[keep], d[keep]
    # dedupe (coincident pairs may appear in both lists)
    key = rows.astype(np.int64) * b.shape[0] + cols
    _, first = np.unique(key, return_index=True)
    return rows[first], cols[first]


def _assemble(k: CompactKernel, a: np.ndarray, b: np.ndarray) -> sp.csr_matrix:
    rows, cols = _pairs_within(a, b, k.support_length)
    vals = np.array([kernel_eval(k, a[i], b[j]) for i, j in zip(rows, cols)], dtype=float)
    return sp.csr_matrix((vals, (rows, cols)), shape=(a.shape[0], b.shape[0]))


def cov_train(k: CompactKernel, locations) -> SparseCovariance:
    """K_ss with entries K(s_i, s_j)."""
    pts = _as_points(locations)
    return SparseCovariance(_assemble(k, pts, pts))


def cov_cross(k: CompactKernel, grid, locations) -> SparseCovariance:
    """K_Rs with entries K(s^R_m, s_i); rows index the regression grid."""
    g = _as_points(grid)
    pts = _as_points(locations)
    if g.shape[1] != pts.shape[1]:
        raise InvalidInputError("grid and locations differ in dimension")
    return SparseCovariance(_assemble(k, g, pts))


def dense_cov(k: CompactKernel, a, b=None) -> np.ndarray:
    """Dense covariance block; reference path for small problems only."""
    a = _as_points(a)
    b = a if b is None else _as_points(b)
    r = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))
    return np.asarray(k.of_distance(r), dtype=float).reshape(a.shape[0], b.shape[0])


def spd_check(c, jitter: float = 0.0) -> bool:
    """True iff an unpivoted symmetric factorization of ``c + jitter*I`` succeeds.

    Uses sparse LU with a natural ordering and no row pivoting, which for a
    symmetric matrix coincides with LDL^T; the matrix is positive definite
    exactly when every pivot is positive.
    """
    m = c.csr if isinstance(c, SparseCovariance) else sp.csr_matrix(c)
    if m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"spd_check needs a square matrix, got {m.shape}")
    n = m.shape[0]
    if n == 0:
        return True
    a = (m + jitter * sp.identity(n, format="csr")).tocsc()
    try:
        lu = spla.splu(a, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
    except RuntimeError:
        return False
    if not np.array_equal(lu.perm_r, np.arange(n)):
        return False
    piv = lu.U.diagonal()
    return bool(np.all(np.isfinite(piv)) and np.all(piv > 0))
