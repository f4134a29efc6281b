"""Mini-batch message passing with codeword stand-ins for out-of-batch nodes.

For a batch ``B`` and a fixed support ``C`` the layer computes

    pre_B = (C_in X_B + C_out R X~) W

where ``C_in`` holds the exact intra-batch entries, ``C_out`` the remaining
entries of the batch rows and ``R`` maps out-of-batch nodes to codewords.
The backward pass mirrors it with the rows of ``C^T``: batch gradients flow
back through ``C_in^T`` and the gradients of out-of-batch nodes, represented
by gradient codewords, flow in through the grouped ``(C^T)_out``.

With product VQ every branch has its own assignment row, so the grouped
operators are stored per branch and applied to that branch's column slice.

GAT layers group out-of-batch neighbours by their full assignment tuple
("virtual codewords"): all neighbours sharing a tuple reconstruct to the same
feature vector and therefore receive the same attention score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conv import (
    NORMALIZER_FLOOR,
    ConvSpec,
    LayerCache,
    LayerWeights,
    activate,
    activate_grad,
    leaky_relu,
    leaky_relu_grad,
    message_grad,
    padding_backward,
    row_normalize_via_padding,
)
from .errors import InputError, NumericError, StateError
from .graph import CsrMatrix, row_slice, split_in_out
from .vq import CodewordView


@dataclass
class MessageBlock:
    """Batch view of one fixed support.

    ``c_out`` is ``C_out R`` and ``ct_out`` is ``(C^T)_out R``, both stored as
    sparse ``b x (branches * k)`` matrices whose column ``p * k + v`` is
    codeword ``v`` of branch ``p``. The k x b blue block of the blocked
    operator for branch ``p`` is ``ct_out_dense(p)``.
    """

    batch: np.ndarray
    support: int
    c_in: np.ndarray
    c_out: sp.csr_matrix
    ct_out: sp.csr_matrix
    k: int
    num_branches: int
    out_nnz: int = 0

    def c_out_dense(self, p: int = 0) -> np.ndarray:
        return self.c_out[:, p * self.k:(p + 1) * self.k].toarray()

    def ct_out_dense(self, p: int = 0) -> np.ndarray:
        return self.ct_out[:, p * self.k:(p + 1) * self.k].toarray().T


@dataclass
class AttentionBlock:
    """Batch view of a GAT mask.

    ``reps`` holds one node id per distinct assignment tuple among the
    out-of-batch nodes involved. ``fwd`` lists (batch row, virtual id,
    multiplicity) triples for messages into the batch; ``blue`` lists the
    same for messages from out-of-batch nodes to batch nodes, which are only
    used to route gradients back.
    """

    batch: np.ndarray
    mask_in: np.ndarray
    reps: np.ndarray
    fwd: tuple[np.ndarray, np.ndarray, np.ndarray]
    blue: tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class ApproxCache(LayerCache):
    batch: np.ndarray | None = None
    xq: np.ndarray | None = None  # reconstructed virtual-codeword features (GAT)


def _check_assignments(assignments: np.ndarray, k: int):
    if assignments.size and (assignments.min() < 0 or assignments.max() >= k):
        raise StateError(f"assignment index outside [0, {k})")


def _group(m_out: CsrMatrix, assignments: np.ndarray, k: int) -> sp.csr_matrix:
    """Sum the columns of ``m_out`` by codeword, branch ``p`` in columns ``[p k, (p+1) k)``.

    Entries sharing a codeword are left as duplicates; sparse products sum them.
    """
    nb = assignments.shape[0]
    cols = assignments[:, m_out.indices].T + (np.arange(nb, dtype=np.int64) * k)[None, :]
    return sp.csr_matrix((np.repeat(m_out.values, nb), cols.ravel(), m_out.indptr * nb),
                         shape=(m_out.rows, nb * k))


def _distinct_first_branch(m: sp.csr_matrix, k: int) -> int:
    sel = m.indices < k
    rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))[sel]
    return int(np.unique(rows * k + m.indices[sel]).size)


def assemble_block(c_b: CsrMatrix, ct_b: CsrMatrix, assignments: np.ndarray, batch, k: int,
                   support: int = 0) -> MessageBlock:
    """Build the blocked operator for one fixed support.

    ``assignments`` is the layer's ``(branches, n)`` table.
    """
    batch = np.asarray(batch, dtype=np.int64)
    assignments = np.atleast_2d(assignments)
    _check_assignments(assignments, k)
    if assignments.shape[1] != c_b.cols:
        raise StateError("assignment table does not cover every node")
    c_in, c_out = split_in_out(c_b, batch)
    _, ct_out = split_in_out(ct_b, batch)
    return MessageBlock(
        batch=batch,
        support=support,
        c_in=c_in,
        c_out=_group(c_out, assignments, k),
        ct_out=_group(ct_out, assignments, k),
        k=k,
        num_branches=assignments.shape[0],
        out_nnz=c_out.nnz,
    )


def _pairs(m_out: CsrMatrix, vid_of_node: np.ndarray, num_virtual: int):
    rows = m_out.row_ids()
    keys = rows * num_virtual + vid_of_node[m_out.indices]
    uniq, inv = np.unique(keys, return_inverse=True)
    weight = np.bincount(inv, weights=m_out.values, minlength=uniq.size).astype(m_out.values.dtype)
    return uniq // num_virtual, uniq % num_virtual, weight


def assemble_attention_block(mask_b: CsrMatrix, maskt_b: CsrMatrix, assignments: np.ndarray,
                             batch, k: int) -> AttentionBlock:
    batch = np.asarray(batch, dtype=np.int64)
    assignments = np.atleast_2d(assignments)
    _check_assignments(assignments, k)
    mask_in, m_out = split_in_out(mask_b, batch)
    _, mt_out = split_in_out(maskt_b, batch)
    involved = np.unique(np.concatenate([m_out.indices, mt_out.indices]))
    vid_of_node = np.zeros(mask_b.cols, dtype=np.int64)
    if involved.size:
        tuples = assignments[:, involved].T
        _, first, inv = np.unique(tuples, axis=0, return_index=True, return_inverse=True)
        vid_of_node[involved] = inv.ravel()
        reps = involved[first]
    else:
        reps = np.zeros(0, dtype=np.int64)
    nv = max(reps.size, 1)
    return AttentionBlock(
        batch=batch,
        mask_in=mask_in,
        reps=reps,
        fwd=_pairs(m_out, vid_of_node, nv),
        blue=_pairs(mt_out, vid_of_node, nv),
    )


def build_layer_blocks(convs: list[CsrMatrix], convs_t: list[CsrMatrix], spec: ConvSpec,
                       assignments: np.ndarray, batch, k: int) -> list:
    """Slice every support of a layer for ``batch``.

    ``convs_t`` are the transposes of ``convs`` (precomputed once per graph).
    """
    batch = np.asarray(batch, dtype=np.int64)
    if spec.kind == "gat":
        return [assemble_attention_block(row_slice(convs[0], batch), row_slice(convs_t[0], batch),
                                         assignments, batch, k)]
    return [
        assemble_block(row_slice(c, batch), row_slice(ct, batch), assignments, batch, k, s)
        for s, (c, ct) in enumerate(zip(convs, convs_t))
    ]


def message_count(blocks) -> tuple[int, int]:
    """(intra-batch, codeword) message counts over a layer's blocks.

    Codeword messages are counted on the first branch's assignment.
    """
    intra = cw = 0
    for blk in blocks:
        if isinstance(blk, AttentionBlock):
            intra += int(np.count_nonzero(blk.mask_in))
            cw += int(blk.fwd[0].size + blk.blue[0].size)
        else:
            intra += int(np.count_nonzero(blk.c_in))
            cw += _distinct_first_branch(blk.c_out, blk.k) + _distinct_first_branch(blk.ct_out, blk.k)
    return intra, cw


def _codeword_messages(grouped: sp.csr_matrix, stacked: sp.csr_matrix, dtype) -> np.ndarray:
    return np.asarray((grouped @ stacked).toarray(), dtype=dtype)


def approx_forward(x_b: np.ndarray, view: CodewordView, blocks: list, weights: LayerWeights,
                   spec: ConvSpec, activation: str = "identity") -> tuple[np.ndarray, ApproxCache]:
    """Batch rows of a layer with out-of-batch messages taken from codewords."""
    batch = blocks[0].batch
    if x_b.ndim != 2 or x_b.shape[0] != batch.size:
        raise InputError(f"batch features {x_b.shape} do not match batch of size {batch.size}")
    if x_b.shape[1] != view.feat_dim or x_b.shape[1] != weights.w[0].shape[0]:
        raise InputError("feature width does not match codewords or weights")
    cache = ApproxCache(spec=spec, x=x_b, pre=None, activation=activation, batch=batch)
    if spec.kind == "gat":
        pre = _gat_forward(x_b, view, blocks[0], weights, spec, cache)
    else:
        pre = 0.0
        for s, blk in enumerate(blocks):
            agg = blk.c_in @ x_b + _codeword_messages(blk.c_out, view.stacked_features(), x_b.dtype)
            cache.agg.append(agg)
            pre = pre + weights.support_scale(spec, s) * (agg @ weights.w[spec.weight_index(s)])
    cache.pre = pre
    return activate(activation, pre), cache


def _score(zi, zj, a, f):
    s = zi @ a[:f] + zj @ a[f:]
    return s, np.exp(leaky_relu(s))


def _gat_forward(x_b, view, blk: AttentionBlock, weights, spec, cache):
    b = x_b.shape[0]
    xq = view.reconstruct_features(blk.reps).astype(x_b.dtype, copy=False)
    cache.xq = xq
    nv = xq.shape[0]
    rows_in, cols_in = np.nonzero(blk.mask_in)
    vals_in = blk.mask_in[rows_in, cols_in]
    fr, fv, fw = blk.fwd
    pre = 0.0
    for h in range(spec.heads):
        w, a = weights.w[h], weights.att[h]
        f = w.shape[1]
        z, zq = x_b @ w, xq @ w
        s_in, e_in = _score(z[rows_in], z[cols_in], a, f)
        e_in = vals_in * e_in
        s_o, e_o = _score(z[fr], zq[fv], a, f)
        e_o = fw * e_o
        e_in_m = sp.csr_matrix((e_in, (rows_in, cols_in)), shape=(b, b))
        e_o_m = sp.csr_matrix((e_o, (fr, fv)), shape=(b, nv))
        ones_b = np.ones((b, 1), dtype=z.dtype)
        ones_q = np.ones((nv, 1), dtype=z.dtype)
        u = np.asarray(e_in_m @ np.hstack([z, ones_b])) + np.asarray(e_o_m @ np.hstack([zq, ones_q]))
        pre = pre + row_normalize_via_padding(u) / spec.heads
        cache.gat.append({
            "z": z, "zq": zq, "u": u,
            "rows_in": rows_in, "cols_in": cols_in, "s_in": s_in, "e_in": e_in, "e_in_m": e_in_m,
            "s_o": s_o, "e_o": e_o, "e_o_m": e_o_m,
        })
    return pre


def learnable_block_values(weights: LayerWeights, x_b: np.ndarray, view: CodewordView, blk: AttentionBlock,
                           head: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Normalized attention of one head over the combined batch and codeword columns.

    Returns ``(alpha_in, alpha_out)``: a dense ``b x b`` block for pairs inside
    the batch and one weight per ``blk.fwd`` triple, already multiplied by the
    number of out-of-batch neighbors sharing that codeword. Rows sum to one.
    """
    w, a = weights.w[head], weights.att[head]
    f = w.shape[1]
    z = x_b @ w
    zq = view.reconstruct_features(blk.reps).astype(x_b.dtype, copy=False) @ w
    rows_in, cols_in = np.nonzero(blk.mask_in)
    e_in = blk.mask_in[rows_in, cols_in] * _score(z[rows_in], z[cols_in], a, f)[1]
    fr, fv, fw = blk.fwd
    e_o = fw * _score(z[fr], zq[fv], a, f)[1]
    b = x_b.shape[0]
    norm = np.bincount(rows_in, weights=e_in, minlength=b) + np.bincount(fr, weights=e_o, minlength=b)
    if np.any(norm <= NORMALIZER_FLOOR):
        raise NumericError("degenerate attention row: normalizer below floor")
    alpha_in = np.zeros((b, b), dtype=z.dtype)
    alpha_in[rows_in, cols_in] = e_in / norm[rows_in]
    return alpha_in, e_o / norm[fr]


def approx_backward(grad_next: np.ndarray, view: CodewordView, blocks: list, weights: LayerWeights,
                    cache: ApproxCache) -> tuple[np.ndarray, LayerWeights]:
    """Batch-row gradients of a layer's inputs and its parameter gradients.

    ``grad_next`` is the gradient w.r.t. the layer output; the activation
    derivative is applied here. Gradient codewords in ``view`` stand in for
    the message gradients of out-of-batch nodes. Parameter gradients only
    count the batch rows' own outputs.
    """
    if cache is None:
        raise StateError("approx_backward needs the cache of a matching forward call")
    if cache.batch is None or not np.array_equal(cache.batch, blocks[0].batch):
        raise StateError("blocks and cache come from different batches")
    spec = cache.spec
    g = grad_next * activate_grad(cache.activation, cache.pre)
    grads = weights.zeros_like()
    x_b = cache.x
    if spec.kind == "gat":
        gx = _gat_backward(g, view, blocks[0], weights, cache, grads)
        return gx, grads
    f_out = weights.w[0].shape[1]
    if view.grad_dim not in (0, f_out):
        raise InputError("gradient codeword width does not match the layer output")
    gx = np.zeros_like(x_b)
    for s, blk in enumerate(blocks):
        k = spec.weight_index(s)
        scale = weights.support_scale(spec, s)
        back = blk.c_in.T @ g
        if view.grad_dim:
            back = back + _codeword_messages(blk.ct_out, view.stacked_grads(), g.dtype)
        gx += scale * (back @ weights.w[k].T)
        grads.w[k] += scale * (cache.agg[s].T @ g)
    if spec.kind == "gin":
        grads.eps[0] = np.sum((cache.agg[1] @ weights.w[0]) * g)
    return gx, grads


def _gat_backward(g, view, blk: AttentionBlock, weights, cache: ApproxCache, grads):
    x_b, xq = cache.x, cache.xq
    b, nv = x_b.shape[0], xq.shape[0]
    spec = cache.spec
    mg = message_grad(spec, g, cache)
    br, bv, bw = blk.blue
    fr, fv, _ = blk.fwd
    gx = np.zeros_like(x_b)
    gq_all = None
    if view.grad_dim and br.size:
        gq_all = view.reconstruct_grads(blk.reps).astype(g.dtype, copy=False)
    for h, st in enumerate(cache.gat):
        w, a = weights.w[h], weights.att[h]
        f = w.shape[1]
        gu = mg[:, h * (f + 1):(h + 1) * (f + 1)]
        z, zq = st["z"], st["zq"]
        rows_in, cols_in = st["rows_in"], st["cols_in"]
        # intra-batch messages: value path plus both attention endpoints
        dz = np.asarray(st["e_in_m"].T @ gu[:, :f])
        de = np.einsum("ij,ij->i", gu[rows_in, :f], z[cols_in]) + gu[rows_in, f]
        ds = de * st["e_in"] * leaky_relu_grad(st["s_in"])
        src = np.bincount(rows_in, weights=ds, minlength=b)
        dst = np.bincount(cols_in, weights=ds, minlength=b)
        # codeword messages into the batch
        dzq = np.asarray(st["e_o_m"].T @ gu[:, :f])
        de_o = np.einsum("ij,ij->i", gu[fr, :f], zq[fv]) + gu[fr, f]
        ds_o = de_o * st["e_o"] * leaky_relu_grad(st["s_o"])
        src += np.bincount(fr, weights=ds_o, minlength=b)
        dst_q = np.bincount(fv, weights=ds_o, minlength=nv)
        dz += np.outer(src, a[:f]) + np.outer(dst, a[f:])
        dzq += np.outer(dst_q, a[f:])
        grads.w[h] += x_b.T @ dz + xq.T @ dzq
        grads.att[h] += np.concatenate([z.T @ src, z.T @ dst + zq.T @ dst_q]).astype(a.dtype)
        gx += dz @ w.T
        if gq_all is not None:
            # blue messages: gradients of out-of-batch rows that read batch nodes
            gq = gq_all[:, h * (f + 1):(h + 1) * (f + 1)]
            s_b, e_b = _score(zq[bv], z[br], a, f)
            e_b = bw * e_b
            dzb = np.zeros_like(z)
            np.add.at(dzb, br, e_b[:, None] * gq[bv, :f])
            de_b = np.einsum("ij,ij->i", gq[bv, :f], z[br]) + gq[bv, f]
            ds_b = de_b * e_b * leaky_relu_grad(s_b)
            dzb += np.outer(np.bincount(br, weights=ds_b, minlength=b), a[f:])
            gx += dzb @ w.T
    return gx


def batch_message_grad(grad_next: np.ndarray, cache: ApproxCache) -> np.ndarray:
    """Message gradient of the batch rows, the gradient half fed to VQ."""
    g = grad_next * activate_grad(cache.activation, cache.pre)
    return message_grad(cache.spec, g, cache)
