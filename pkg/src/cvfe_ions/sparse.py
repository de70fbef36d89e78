"""Compressed-row matrices and a direct sparse solver.

Thin layer over :mod:`scipy.sparse`: the CSR layout is canonical (sorted,
duplicate-free column indices) so that assembly results do not depend on
triplet order, and :func:`solve` adds singularity reporting and one step of
iterative refinement on top of SuperLU.  Callers that know the geometry
can pass a fill-reducing symmetric ordering.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgumentError, SolveError


class SparseMatrix:
    """Immutable CSR matrix built from coordinate triplets."""

    def __init__(self, csr: sp.csr_matrix):
        csr = sp.csr_matrix(csr)
        csr.sum_duplicates()
        csr.sort_indices()
        self._csr = csr

    @property
    def shape(self):
        return self._csr.shape

    @property
    def rows(self):
        return self._csr.shape[0]

    @property
    def cols(self):
        return self._csr.shape[1]

    @property
    def row_offsets(self):
        return self._csr.indptr

    @property
    def column_indices(self):
        return self._csr.indices

    @property
    def values(self):
        return self._csr.data

    @property
    def nnz(self):
        return self._csr.nnz

    def matvec(self, x):
        return self._csr @ np.asarray(x, dtype=float)

    __matmul__ = matvec

    def toarray(self):
        return self._csr.toarray()

    def to_scipy(self):
        return self._csr

    def norm_inf(self):
        return float(abs(self._csr).sum(axis=1).max()) if self.nnz else 0.0

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def from_triplets(rows, cols, entries=None, *, i=None, j=None, v=None) -> SparseMatrix:
    """Build a ``rows x cols`` matrix, summing duplicate coordinates.

    ``entries`` is an iterable of ``(row, col, value)``; vectorised callers
    may instead pass the index and value arrays as ``i``, ``j``, ``v``.
    """
    if entries is not None:
        entries = list(entries)
        i = np.array([e[0] for e in entries], dtype=np.int64)
        j = np.array([e[1] for e in entries], dtype=np.int64)
        v = np.array([e[2] for e in entries], dtype=float)
    else:
        i = np.asarray(i if i is not None else [], dtype=np.int64).ravel()
        j = np.asarray(j if j is not None else [], dtype=np.int64).ravel()
        v = np.asarray(v if v is not None else [], dtype=float).ravel()
    if not (len(i) == len(j) == len(v)):
        raise InvalidArgumentError("triplet arrays differ in length")
    if len(i) and (i.min() < 0 or i.max() >= rows or j.min() < 0 or j.max() >= cols):
        raise InvalidArgumentError("triplet index out of range")
    coo = sp.coo_matrix((v, (i, j)), shape=(rows, cols))
    return SparseMatrix(coo.tocsr())


def _structural_check(csr):
    n = csr.shape[0]
    empty_rows = np.nonzero(np.diff(csr.indptr) == 0)[0]
    if len(empty_rows):
        raise SolveError(f"structurally singular: row {empty_rows[0]} is empty", pivot=int(empty_rows[0]))
    counts = np.bincount(csr.indices, minlength=n)
    empty_cols = np.nonzero(counts == 0)[0]
    if len(empty_cols):
        raise SolveError(f"structurally singular: column {empty_cols[0]} is empty", pivot=int(empty_cols[0]))


class LUFactor:
    """LU factors of a (possibly symmetrically permuted) matrix."""

    def __init__(self, lu, perm=None):
        self._lu = lu
        self._perm = perm

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._perm is None:
            return self._lu.solve(b)
        x = np.empty_like(b)
        x[self._perm] = self._lu.solve(b[self._perm])
        return x


def factorize(A: SparseMatrix, ordering=None) -> LUFactor:
    """Sparse LU with threshold partial pivoting; raises :class:`SolveError`.

    ``ordering`` is an optional symmetric fill-reducing permutation of the
    unknowns (for instance a nested dissection of the mesh).  Without it,
    SuperLU's COLAMD column ordering is used.
    """
    if A.rows != A.cols:
        raise InvalidArgumentError("matrix must be square")
    csr = A.to_scipy()
    _structural_check(csr)
    if ordering is not None:
        perm = np.asarray(ordering, dtype=np.int64)
        if perm.shape != (A.rows,) or not np.array_equal(np.sort(perm), np.arange(A.rows)):
            raise InvalidArgumentError("ordering must be a permutation of the unknowns")
        csc = csr[perm][:, perm].tocsc()
        spec = "NATURAL"
    else:
        perm = None
        csc = csr.tocsc()
        spec = "COLAMD"
    try:
        lu = spla.splu(csc, permc_spec=spec)
    except RuntimeError as exc:
        raise SolveError(f"numerically singular: {exc}") from None
    diag = np.abs(lu.U.diagonal())
    scale = diag.max() if len(diag) else 0.0
    small = np.nonzero(diag <= 1e-14 * scale)[0]
    if scale == 0.0 or len(small):
        k = int(small[0]) if len(small) else 0
        col = int(lu.perm_c[k])
        raise SolveError(f"numerically singular at pivot {k}", pivot=int(perm[col]) if perm is not None else col)
    return LUFactor(lu, perm)


def solve(A: SparseMatrix, b, ordering=None) -> np.ndarray:
    """Solve ``A x = b`` by sparse LU.

    One step of iterative refinement is taken when the relative residual
    ``|Ax - b|_inf / (|A|_inf |x|_inf + |b|_inf)`` exceeds 1e-12.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (A.rows,):
        raise InvalidArgumentError("right-hand side has the wrong length")
    lu = factorize(A, ordering)
    x = lu.solve(b)
    denom = A.norm_inf() * np.max(np.abs(x), initial=0.0) + np.max(np.abs(b), initial=0.0)
    r = b - A.matvec(x)
    if denom > 0 and np.max(np.abs(r), initial=0.0) > 1e-12 * denom:
        x = x + lu.solve(r)
    return x
