"""Graph container, CSR matrices and the slicing primitives used by mini-batching.

Dense matrices are plain 2-D numpy arrays. Sparse matrices are `CsrMatrix`
instances whose kernels delegate to ``scipy.sparse``; the wrapper exists to
enforce the canonical structure (sorted, duplicate-free column ids per row)
that the message-passing code relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InputError


@dataclass(frozen=True)
class Graph:
    """An (optionally symmetrized) graph on nodes ``0..n-1``.

    ``edges`` is an ``(m, 2)`` int64 array of (src, dst) pairs sorted
    lexicographically and free of duplicates. For a symmetrized graph every
    pair appears in both orientations, so ``m`` counts directed entries of A.
    """

    n: int
    edges: np.ndarray
    symmetric: bool = True
    features: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def avg_degree(self) -> float:
        return self.num_edges / self.n

    def adjacency(self, dtype=np.float64) -> "CsrMatrix":
        vals = np.ones(self.num_edges, dtype=dtype)
        m = sp.csr_matrix((vals, (self.edges[:, 0], self.edges[:, 1])), shape=(self.n, self.n))
        return CsrMatrix.from_scipy(m)

    def degrees(self) -> np.ndarray:
        """Out-degree of every node (row sums of A)."""
        return np.bincount(self.edges[:, 0], minlength=self.n).astype(np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        lo, hi = np.searchsorted(self.edges[:, 0], [i, i + 1])
        return self.edges[lo:hi, 1]

    def csr_structure(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) of A, handy for walks and neighbor lookups."""
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(self.degrees(), out=indptr[1:])
        return indptr, self.edges[:, 1].copy()

    def subgraph(self, nodes: np.ndarray) -> "Graph":
        """Induced subgraph on ``nodes``, re-indexed in the given order."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.n, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        src, dst = remap[self.edges[:, 0]], remap[self.edges[:, 1]]
        keep = (src >= 0) & (dst >= 0)
        pairs = np.stack([src[keep], dst[keep]], axis=1)
        return from_edge_list(pairs, nodes.size, symmetrize=False, _symmetric=self.symmetric)


def from_edge_list(pairs, n: int, symmetrize: bool = True, _symmetric: bool | None = None) -> Graph:
    """Build a canonical graph from (src, dst) pairs.

    Duplicate pairs collapse to one edge; self-loops are kept exactly as given.
    """
    if n <= 0:
        raise InputError(f"node count must be positive, got {n}")
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        bad = arr[(arr < 0) | (arr >= n)].ravel()[0]
        raise InputError(f"edge endpoint {int(bad)} outside [0, {n})")
    if symmetrize:
        arr = np.concatenate([arr, arr[:, ::-1]], axis=0)
    if arr.size:
        keys = np.unique(arr[:, 0] * n + arr[:, 1])
        arr = np.stack([keys // n, keys % n], axis=1)
    symmetric = symmetrize if _symmetric is None else _symmetric
    return Graph(n=n, edges=arr, symmetric=bool(symmetric))


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed sparse row matrix with canonical (sorted, unique) rows."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(
            rows=m.shape[0],
            cols=m.shape[1],
            indptr=m.indptr.astype(np.int64),
            indices=m.indices.astype(np.int64),
            values=np.asarray(m.data),
        )

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "CsrMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a)))

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "CsrMatrix":
        return cls.from_scipy(sp.identity(n, dtype=dtype, format="csr"))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def dtype(self):
        return self.values.dtype

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def astype(self, dtype) -> "CsrMatrix":
        if self.values.dtype == dtype:
            return self
        return CsrMatrix(self.rows, self.cols, self.indptr, self.indices, self.values.astype(dtype))

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.indptr))

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_ids(), weights=self.values, minlength=self.rows)

    def check(self) -> None:
        """Raise ``InputError`` if any structural invariant is violated."""
        ip = self.indptr
        if ip.size != self.rows + 1 or ip[0] != 0 or ip[-1] != self.indices.size:
            raise InputError("indptr does not bracket the index array")
        if self.values.size != self.indices.size:
            raise InputError("values and indices lengths differ")
        if np.any(np.diff(ip) < 0):
            raise InputError("indptr is not monotone")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.cols:
                raise InputError("column id out of range")
            step = np.diff(self.indices)
            same_row = np.diff(self.row_ids()) == 0
            if np.any(step[same_row] <= 0):
                raise InputError("column ids not strictly increasing within a row")


def _check_index(idx, bound: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise InputError(f"{what} index outside [0, {bound})")
    return idx


def row_slice(m: CsrMatrix, idx: Sequence[int]) -> CsrMatrix:
    """Rows ``idx`` of ``m`` in the given order (duplicates allowed)."""
    idx = _check_index(idx, m.rows, "row")
    starts, ends = m.indptr[idx], m.indptr[idx + 1]
    lengths = ends - starts
    indptr = np.zeros(idx.size + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    # gather positions of every kept entry
    offsets = np.repeat(starts - indptr[:-1], lengths)
    take = np.arange(indptr[-1], dtype=np.int64) + offsets
    return CsrMatrix(idx.size, m.cols, indptr, m.indices[take], m.values[take])


def split_in_out(m_b: CsrMatrix, idx: Sequence[int]) -> tuple[np.ndarray, CsrMatrix]:
    """Split batch rows into intra-batch (dense b x b) and out-of-batch parts.

    ``c_in[r, c] = m_b[r, idx[c]]``; ``c_out`` is ``m_b`` with every column in
    ``idx`` removed, so ``scatter(c_in) + c_out`` reconstructs ``m_b``.
    """
    idx = _check_index(idx, m_b.cols, "batch")
    if np.unique(idx).size != idx.size:
        raise InputError("batch indices contain duplicates")
    pos = np.full(m_b.cols, -1, dtype=np.int64)
    pos[idx] = np.arange(idx.size)
    col_pos = pos[m_b.indices]
    inside = col_pos >= 0
    rows = m_b.row_ids()
    c_in = np.zeros((m_b.rows, idx.size), dtype=m_b.values.dtype)
    c_in[rows[inside], col_pos[inside]] = m_b.values[inside]
    keep = ~inside
    indptr = np.zeros(m_b.rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows[keep], minlength=m_b.rows), out=indptr[1:])
    c_out = CsrMatrix(m_b.rows, m_b.cols, indptr, m_b.indices[keep], m_b.values[keep])
    return c_in, c_out


def spmm(m: CsrMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != m.cols:
        raise InputError(f"spmm shape mismatch: {m.shape} @ {x.shape}")
    return np.asarray(m.to_scipy() @ x)


def transpose(m: CsrMatrix) -> CsrMatrix:
    return CsrMatrix.from_scipy(m.to_scipy().T.tocsr())


def frob_norm(m) -> float:
    if isinstance(m, CsrMatrix):
        return float(np.sqrt(np.sum(m.values.astype(np.float64) ** 2)))
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64)))
