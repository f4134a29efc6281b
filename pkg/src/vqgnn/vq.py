"""Product vector quantization with EMA codeword updates and implicit whitening.

Each layer quantizes the concatenation ``[features || message gradients]`` of
its nodes. The concatenated vector is cut into ``f_prod``-wide blocks
("branches"); every branch owns an independent `Codebook` and an assignment
row in the layer's table. Codewords are stored in whitened coordinates and
mapped back through the smoothed mean/variance when read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InputError, NumericError

EPS_VAR = 1e-5
SIZE_FLOOR = 1e-3


@dataclass(frozen=True)
class ProductVqConfig:
    """Branch layout of one layer's ``[features || gradients]`` vectors."""

    f_prod: int
    k: int
    feat_dim: int
    grad_dim: int

    def __post_init__(self):
        if self.f_prod < 1 or self.k < 1:
            raise InputError("f_prod and k must be >= 1")

    @property
    def width(self) -> int:
        return self.feat_dim + self.grad_dim

    @property
    def num_branches(self) -> int:
        return math.ceil(self.width / self.f_prod)

    def feature_part(self, p: int):
        """(local slice, feature slice) covered by branch ``p``, or None."""
        lo, hi = p * self.f_prod, min((p + 1) * self.f_prod, self.width)
        a, b = lo, min(hi, self.feat_dim)
        if a >= b:
            return None
        return slice(a - lo, b - lo), slice(a, b)

    def grad_part(self, p: int):
        lo, hi = p * self.f_prod, min((p + 1) * self.f_prod, self.width)
        a, b = max(lo, self.feat_dim), hi
        if a >= b:
            return None
        return slice(a - lo, b - lo), slice(a - self.feat_dim, b - self.feat_dim)


def split_blocks(v: np.ndarray, f_prod: int) -> list[np.ndarray]:
    """Cut columns into ``f_prod``-wide blocks; the last one is zero-padded."""
    n, width = v.shape
    nb = max(1, math.ceil(width / f_prod))
    padded = np.zeros((n, nb * f_prod), dtype=v.dtype)
    padded[:, :width] = v
    return [padded[:, p * f_prod:(p + 1) * f_prod] for p in range(nb)]


def merge_blocks(blocks: list[np.ndarray], width: int) -> np.ndarray:
    return np.concatenate(blocks, axis=1)[:, :width]


@dataclass
class Codebook:
    """Quantizer state of one branch, or of several with a leading branch axis.

    ``codewords`` (``[P,] k x w``) are whitened; ``mean``/``var`` are the
    smoothed whitening statistics used to map them back.
    """

    codewords: np.ndarray
    cluster_size: np.ndarray
    cluster_sum: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    gamma: float = 0.9
    beta: float = 0.9

    @property
    def k(self) -> int:
        return self.codewords.shape[-2]

    def unwhiten(self, vbar: np.ndarray) -> np.ndarray:
        return vbar * np.sqrt(self.var + EPS_VAR)[..., None, :] + self.mean[..., None, :]

    def whiten_smoothed(self, v: np.ndarray) -> np.ndarray:
        """Whiten with the smoothed statistics (used for frozen-codebook lookups)."""
        return (v - self.mean[..., None, :]) / np.sqrt(self.var + EPS_VAR)[..., None, :]

    def unwhitened(self) -> np.ndarray:
        return self.unwhiten(self.codewords)

    def branch(self, p: int) -> "Codebook":
        """Copy of branch ``p`` of a stacked codebook."""
        return Codebook(self.codewords[p].copy(), self.cluster_size[p].copy(), self.cluster_sum[p].copy(),
                        self.mean[p].copy(), self.var[p].copy(), self.gamma, self.beta)

    @classmethod
    def stack(cls, books: list["Codebook"]) -> "Codebook":
        return cls(*(np.stack([getattr(b, f) for b in books]) for f in
                     ("codewords", "cluster_size", "cluster_sum", "mean", "var")),
                   gamma=books[0].gamma, beta=books[0].beta)

    def copy(self) -> "Codebook":
        return Codebook(
            self.codewords.copy(), self.cluster_size.copy(), self.cluster_sum.copy(),
            self.mean.copy(), self.var.copy(), self.gamma, self.beta,
        )


def init_codebook(sample: np.ndarray, k: int, seed, gamma: float = 0.9, beta: float = 0.9) -> Codebook:
    """Seed ``k`` codewords by drawing whitened sample rows with replacement.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    sample = np.asarray(sample)
    if sample.ndim != 2 or sample.shape[0] == 0:
        raise InputError("init_codebook needs a non-empty 2-D sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mean = sample.mean(axis=0)
    var = sample.var(axis=0)
    white = (sample - mean) / np.sqrt(var + EPS_VAR)
    pick = rng.integers(0, sample.shape[0], size=k)
    cw = white[pick].copy()
    return Codebook(
        codewords=cw,
        cluster_size=np.ones(k, dtype=sample.dtype),
        cluster_sum=cw.copy(),
        mean=mean,
        var=var,
        gamma=gamma,
        beta=beta,
    )


def whiten(v: np.ndarray, mean: np.ndarray, var: np.ndarray, beta: float):
    """Whiten with the batch moments and fold them into the smoothed statistics.

    Works on ``b x w`` or branch-stacked ``P x b x w`` input. Returns
    ``(vbar, new_mean, new_var)``.
    """
    bm = v.mean(axis=-2)
    bv = v.var(axis=-2)
    vbar = (v - bm[..., None, :]) / np.sqrt(bv + EPS_VAR)[..., None, :]
    return vbar, mean * beta + bm * (1 - beta), var * beta + bv * (1 - beta)


def find_nearest(vbar: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Index of the closest codeword per row; ties go to the lowest index.

    Accepts ``b x w`` against ``k x w`` or branch-stacked ``P x b x w``
    against ``P x k x w``.
    """
    if vbar.ndim == 3:
        # one branch at a time keeps the b x k distance slab in cache
        return np.stack([find_nearest(v, c) for v, c in zip(vbar, codewords)])
    # ||v||^2 is constant per row and does not affect the argmin
    d = np.sum(codewords * codewords, axis=1)[None, :] - 2.0 * (vbar @ codewords.T)
    return np.argmin(d, axis=1)


def ema_update(cb: Codebook, vbar: np.ndarray, assign: np.ndarray) -> Codebook:
    """EMA step on already-whitened vectors with fixed assignments (in place)."""
    single = cb.codewords.ndim == 2
    cw = cb.codewords[None] if single else cb.codewords
    size = cb.cluster_size[None] if single else cb.cluster_size
    total = cb.cluster_sum[None] if single else cb.cluster_sum
    vb = vbar[None] if single else vbar
    asg = assign[None] if single else assign
    nb, k, w = cw.shape
    g = cb.gamma
    keys = (asg + (np.arange(nb) * k)[:, None]).ravel()
    flat = vb.reshape(-1, w)
    counts = np.bincount(keys, minlength=nb * k).reshape(nb, k)
    sums = np.stack([np.bincount(keys, weights=flat[:, c], minlength=nb * k) for c in range(w)], axis=-1)
    size = (size * g + counts * (1 - g)).astype(cw.dtype)
    total = (total * g + sums.reshape(nb, k, w) * (1 - g)).astype(cw.dtype)
    live = size >= SIZE_FLOOR
    cw = np.where(live[..., None], total / np.maximum(size, SIZE_FLOOR)[..., None], cw)
    for p in np.flatnonzero(~live.all(axis=1)):
        # reseed starving codes at the batch vectors worst served by their codeword
        dead = np.flatnonzero(~live[p])
        gap = np.sum((vb[p] - cw[p, asg[p]]) ** 2, axis=1)
        order = np.argsort(-gap, kind="stable")[: dead.size]
        dead = dead[: order.size]
        cw[p, dead] = vb[p, order]
        size[p, dead] = 1.0
        total[p, dead] = vb[p, order]
    if single:
        cw, size, total = cw[0], size[0], total[0]
    cb.codewords, cb.cluster_size, cb.cluster_sum = cw, size, total
    return cb


def vq_update(v: np.ndarray, cb: Codebook) -> tuple[Codebook, np.ndarray]:
    """Whiten a batch block, reassign it, and move the codewords (in place)."""
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite vectors passed to vq_update")
    vbar, cb.mean, cb.var = whiten(v, cb.mean, cb.var, cb.beta)
    assign = find_nearest(vbar, cb.codewords)
    ema_update(cb, vbar, assign)
    return cb, assign


def relative_error(x: np.ndarray, assignments: np.ndarray, codewords: np.ndarray) -> float:
    """``||X - R X~||_F / ||X||_F``."""
    denom = np.linalg.norm(x)
    if denom == 0:
        raise InputError("relative error of an all-zero matrix is undefined")
    return float(np.linalg.norm(x - codewords[assignments]) / denom)


def _to_branches(v: np.ndarray, f_prod: int) -> np.ndarray:
    """``n x width`` -> zero-padded ``P x n x f_prod``."""
    blocks = split_blocks(v, f_prod)
    return np.stack(blocks)


@dataclass
class CodewordView:
    """Unwhitened codewords of one layer with its assignment table.

    ``codes`` is ``P x k x f_prod``; concatenating the branches of a row gives
    a padded ``[features || gradients]`` vector of ``P * f_prod`` columns.
    """

    assignments: np.ndarray
    codes: np.ndarray
    feat_dim: int
    grad_dim: int
    _stacked: dict = field(default_factory=dict, repr=False)

    @property
    def num_branches(self) -> int:
        return self.assignments.shape[0]

    @property
    def k(self) -> int:
        return self.codes.shape[1]

    def _columns(self, lo: int, hi: int, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        nb, _, w = self.codes.shape
        rec = self.codes[np.arange(nb)[:, None], self.assignments[:, nodes]]  # P x m x w
        return np.ascontiguousarray(rec.transpose(1, 0, 2).reshape(nodes.size, nb * w)[:, lo:hi])

    def reconstruct_features(self, nodes) -> np.ndarray:
        return self._columns(0, self.feat_dim, nodes)

    def reconstruct_grads(self, nodes) -> np.ndarray:
        return self._columns(self.feat_dim, self.feat_dim + self.grad_dim, nodes)

    def _stack(self, lo: int, hi: int) -> sp.csr_matrix:
        """Rows ``p k + v`` hold codeword ``v`` of branch ``p`` in its own columns of ``[lo, hi)``."""
        key = (lo, hi)
        if key not in self._stacked:
            nb, k, w = self.codes.shape
            col = np.arange(nb)[:, None] * w + np.arange(w)[None, :]  # P x w global columns
            keep = (col >= lo) & (col < hi)
            p_idx, c_idx = np.nonzero(keep)
            # rows: every codeword of the branch; one entry per kept column
            rows = (p_idx[:, None] * k + np.arange(k)[None, :]).ravel()
            cols = np.repeat(col[p_idx, c_idx] - lo, k)
            vals = self.codes[p_idx, :, c_idx].ravel()
            self._stacked[key] = sp.csr_matrix((vals, (rows, cols)), shape=(nb * k, hi - lo))
        return self._stacked[key]

    def stacked_features(self) -> sp.csr_matrix:
        return self._stack(0, self.feat_dim)

    def stacked_grads(self) -> sp.csr_matrix:
        return self._stack(self.feat_dim, self.feat_dim + self.grad_dim)

    @classmethod
    def lossless(cls, x: np.ndarray, m: np.ndarray | None, f_prod: int) -> "CodewordView":
        """One codeword per node equal to its exact features and message gradients."""
        n, fd = x.shape
        if m is None:
            m = np.zeros((n, 0), dtype=x.dtype)
        codes = _to_branches(np.concatenate([x, m], axis=1), f_prod)
        assign = np.tile(np.arange(n, dtype=np.int64), (codes.shape[0], 1))
        return cls(assign, codes, fd, m.shape[1])


@dataclass
class LayerQuantizer:
    """All branches of one layer (stacked into one `Codebook`) and its node-to-codeword table."""

    config: ProductVqConfig
    book: Codebook
    assignments: np.ndarray  # (num_branches, n) int64
    last_rel_error: float = field(default=float("nan"))

    @classmethod
    def initialize(cls, config: ProductVqConfig, x: np.ndarray, m: np.ndarray | None,
                   rng: np.random.Generator, gamma=0.9, beta=0.9, sample_size: int | None = None):
        """Seed every branch from a sample of rows and assign all nodes.

        ``m`` may be None, meaning zero gradients (the cold start).
        """
        n = x.shape[0]
        if m is None:
            m = np.zeros((n, config.grad_dim), dtype=x.dtype)
        blocks = _to_branches(np.concatenate([x, m], axis=1), config.f_prod)
        size = n if sample_size is None else min(n, sample_size)
        rows = np.sort(rng.choice(n, size=size, replace=False)) if size < n else np.arange(n)
        book = Codebook.stack([init_codebook(blk[rows], config.k, rng, gamma, beta) for blk in blocks])
        assign = find_nearest(book.whiten_smoothed(blocks), book.codewords)
        return cls(config, book, assign.astype(np.int64))

    @property
    def books(self) -> list[Codebook]:
        """Per-branch copies, for inspection."""
        return [self.book.branch(p) for p in range(self.config.num_branches)]

    def view(self) -> CodewordView:
        return CodewordView(self.assignments.copy(), self.book.unwhitened(), self.config.feat_dim,
                            self.config.grad_dim)

    def update(self, x_b: np.ndarray, m_b: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """VQ-update every branch on the batch and synchronize the table.

        Stores the feature-half relative error of the batch after the update
        in ``last_rel_error`` and returns the batch's new assignments.
        """
        blocks = _to_branches(np.concatenate([x_b, m_b], axis=1), self.config.f_prod)
        _, assign = vq_update(blocks, self.book)
        self.assignments[:, batch] = assign
        nb, fd = self.config.num_branches, self.config.feat_dim
        rec = self.book.unwhitened()[np.arange(nb)[:, None], assign]
        rec = rec.transpose(1, 0, 2).reshape(x_b.shape[0], -1)[:, :fd]
        den = float(np.sum(x_b.astype(np.float64) ** 2))
        num = float(np.sum((x_b - rec).astype(np.float64) ** 2))
        self.last_rel_error = float(np.sqrt(num / den)) if den > 0 else 0.0
        return assign

    def assign_features(self, x: np.ndarray) -> np.ndarray:
        """Nearest-codeword lookup from features alone (frozen codebooks).

        Only feature columns enter the distance; branches without feature
        columns get codeword 0. Returns a ``(num_branches, len(x))`` table.
        """
        out = np.zeros((self.config.num_branches, x.shape[0]), dtype=np.int64)
        cb = self.book
        for p in range(self.config.num_branches):
            fp = self.config.feature_part(p)
            if fp is None:
                continue
            loc, fsl = fp
            xb = (x[:, fsl] - cb.mean[p, loc]) / np.sqrt(cb.var[p, loc] + EPS_VAR)
            out[p] = find_nearest(xb, cb.codewords[p][:, loc])
        return out

    def extend(self, extra: int) -> None:
        """Append ``extra`` unassigned (codeword 0) nodes to the table."""
        pad = np.zeros((self.assignments.shape[0], extra), dtype=np.int64)
        self.assignments = np.concatenate([self.assignments, pad], axis=1)

    def copy(self) -> "LayerQuantizer":
        return LayerQuantizer(self.config, self.book.copy(), self.assignments.copy(), self.last_rel_error)
