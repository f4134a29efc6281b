"""Generalized graph convolution layers with closed-form backward passes.

Every supported layer has the form ``sigma(sum_s C_s X W_s)``. GCN, SAGE-Mean
and GIN use fixed convolution matrices; GAT builds one learnable matrix per
attention head from the mask ``A + I`` and the score function
``exp(LeakyReLU([x_i W || x_j W] . a))``, row-normalized.

GAT heads are averaged, so every head contributes ``C_s / heads``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InputError, NumericError, StateError
from .graph import CsrMatrix, Graph, spmm, transpose

KINDS = ("gcn", "sage", "gin", "gat")
ACTIVATIONS = ("identity", "relu", "leaky_relu")
LEAKY_SLOPE = 0.2
NORMALIZER_FLOOR = 1e-12


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    raise ConfigError(f"unknown activation {name!r}")


def activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z`` (0 at the ReLU kink)."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)
    raise ConfigError(f"unknown activation {name!r}")


def leaky_relu(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def leaky_relu_grad(z):
    return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)


@dataclass(frozen=True)
class ConvSpec:
    kind: str = "gcn"
    heads: int = 1
    lipschitz_bound: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unsupported convolution kind {self.kind!r}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if not self.lipschitz_bound > 0:
            raise ConfigError("lipschitz_bound must be positive")

    @property
    def learnable(self) -> bool:
        return self.kind == "gat"

    @property
    def num_supports(self) -> int:
        return {"gcn": 1, "sage": 2, "gin": 2, "gat": self.heads}[self.kind]

    @property
    def num_weights(self) -> int:
        return {"gcn": 1, "sage": 2, "gin": 1, "gat": self.heads}[self.kind]

    def weight_index(self, s: int) -> int:
        # GIN's two supports share one weight matrix
        return 0 if self.kind == "gin" else s

    def grad_width(self, f_out: int) -> int:
        """Width of the message gradient that the gradient codewords quantize."""
        return self.heads * (f_out + 1) if self.kind == "gat" else f_out


@dataclass
class LayerWeights:
    """Learnable parameters of one layer.

    ``w`` holds one ``f_in x f_out`` matrix per distinct weight, ``att`` one
    length ``2 f_out`` attention vector per GAT head, ``eps`` the GIN scalar
    as a 1-element array so it can be updated in place.
    """

    w: list[np.ndarray]
    att: list[np.ndarray] = field(default_factory=list)
    eps: np.ndarray | None = None

    @classmethod
    def init(cls, spec: ConvSpec, f_in: int, f_out: int, rng: np.random.Generator, dtype=np.float64):
        limit = np.sqrt(6.0 / (f_in + f_out))
        w = [rng.uniform(-limit, limit, size=(f_in, f_out)).astype(dtype) for _ in range(spec.num_weights)]
        att = []
        if spec.kind == "gat":
            alim = np.sqrt(6.0 / (2 * f_out + 1))
            att = [rng.uniform(-alim, alim, size=2 * f_out).astype(dtype) for _ in range(spec.heads)]
        eps = np.zeros(1, dtype=dtype) if spec.kind == "gin" else None
        return cls(w=w, att=att, eps=eps)

    def arrays(self) -> list[np.ndarray]:
        out = list(self.w) + list(self.att)
        if self.eps is not None:
            out.append(self.eps)
        return out

    def zeros_like(self) -> "LayerWeights":
        return LayerWeights(
            w=[np.zeros_like(a) for a in self.w],
            att=[np.zeros_like(a) for a in self.att],
            eps=None if self.eps is None else np.zeros_like(self.eps),
        )

    def copy(self) -> "LayerWeights":
        return LayerWeights(
            w=[a.copy() for a in self.w],
            att=[a.copy() for a in self.att],
            eps=None if self.eps is None else self.eps.copy(),
        )

    def support_scale(self, spec: ConvSpec, s: int) -> float:
        if spec.kind == "gin" and s == 1:
            return 1.0 + float(self.eps[0])
        if spec.kind == "gat":
            return 1.0 / spec.heads
        return 1.0


@dataclass
class LayerCache:
    spec: ConvSpec
    x: np.ndarray
    pre: np.ndarray
    activation: str
    agg: list[np.ndarray] = field(default_factory=list)  # C_s X per fixed support
    gat: list[dict] = field(default_factory=list)  # per-head attention state


def _diag(v) -> sp.spmatrix:
    return sp.diags(v, format="csr")


def _inv(v, power=1.0):
    out = np.zeros_like(v, dtype=np.float64)
    nz = v > 0
    out[nz] = v[nz] ** (-power)
    return out


def build_fixed_convs(g: Graph, spec: ConvSpec) -> list[CsrMatrix]:
    """Convolution supports of ``spec`` on ``g`` (for GAT: the mask ``A + I``).

    Degree-zero rows get zero entries instead of infinities.
    """
    a = g.adjacency().to_scipy()
    eye = sp.identity(g.n, format="csr")
    if spec.kind == "gcn":
        at = a + eye
        dinv = _inv(np.asarray(at.sum(axis=1)).ravel(), 0.5)
        return [CsrMatrix.from_scipy(_diag(dinv) @ at @ _diag(dinv))]
    if spec.kind == "sage":
        dinv = _inv(np.asarray(a.sum(axis=1)).ravel())
        return [CsrMatrix.from_scipy(eye), CsrMatrix.from_scipy(_diag(dinv) @ a)]
    if spec.kind == "gin":
        return [CsrMatrix.from_scipy(a), CsrMatrix.from_scipy(eye)]
    if spec.kind == "gat":
        return [CsrMatrix.from_scipy(a + eye)]
    raise ConfigError(f"unsupported convolution kind {spec.kind!r}")


def gat_scores(xi: np.ndarray, xj: np.ndarray, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Row-paired attention scores ``exp(LeakyReLU((xi W || xj W) . a))``."""
    xi, xj = np.atleast_2d(xi), np.atleast_2d(xj)
    if xi.shape[1] != w.shape[0] or xj.shape[1] != w.shape[0]:
        raise InputError("feature width does not match W")
    if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(xj))):
        raise NumericError("non-finite input to attention scores")
    f = w.shape[1]
    s = (xi @ w) @ a[:f] + (xj @ w) @ a[f:]
    return np.exp(leaky_relu(s))


def row_normalize_via_padding(messages_with_ones: np.ndarray) -> np.ndarray:
    """Divide the message columns by the trailing normalizer column."""
    last = messages_with_ones[:, -1:]
    if np.any(last <= NORMALIZER_FLOOR):
        raise NumericError("degenerate attention row: normalizer below floor")
    return messages_with_ones[:, :-1] / last


def padding_backward(dout: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the padded messages ``u`` given the gradient of ``u[:, :-1] / u[:, -1]``."""
    norm = u[:, -1:]
    gu = np.empty_like(u)
    gu[:, :-1] = dout / norm
    gu[:, -1] = -np.sum(dout * u[:, :-1], axis=1) / norm[:, 0] ** 2
    return gu


def lipschitz_regularize(params: LayerWeights, bound: float) -> LayerWeights:
    """Project attention vectors onto the ``bound`` ball and clip W row norms to ``bound``."""
    out = params.copy()
    for a in out.att:
        nrm = np.linalg.norm(a)
        if nrm > bound:
            a *= bound / nrm
    for w in out.w:
        rn = np.linalg.norm(w, axis=1)
        over = rn > bound
        w[over] *= (bound / rn[over])[:, None]
    return out


def attention_lipschitz(w: np.ndarray, a: np.ndarray) -> float:
    """Lipschitz constant of ``(x_i, x_j) -> (x_i W || x_j W) . a`` on the concatenated input."""
    f = w.shape[1]
    return float(np.sqrt(np.sum((w @ a[:f]) ** 2) + np.sum((w @ a[f:]) ** 2)))


def _check_cols(x, weights: LayerWeights):
    if x.ndim != 2 or x.shape[1] != weights.w[0].shape[0]:
        raise InputError(f"feature width {x.shape} does not match weights {weights.w[0].shape}")


def _gat_head_forward(x, mask: CsrMatrix, w, a, padding_trick: bool):
    n = x.shape[0]
    f = w.shape[1]
    rows, cols = mask.row_ids(), mask.indices
    z = x @ w
    s = z[rows] @ a[:f] + z[cols] @ a[f:]
    e = mask.values * np.exp(leaky_relu(s))
    e_mat = sp.csr_matrix((e, cols, mask.indptr), shape=(n, n))
    zp = np.concatenate([z, np.ones((n, 1), dtype=z.dtype)], axis=1)
    u = np.asarray(e_mat @ zp)
    if padding_trick:
        out = row_normalize_via_padding(u)
    else:
        norm = np.asarray(e_mat.sum(axis=1)).ravel()
        if np.any(norm <= NORMALIZER_FLOOR):
            raise NumericError("degenerate attention row: normalizer below floor")
        alpha = sp.csr_matrix((e / norm[rows], cols, mask.indptr), shape=(n, n))
        out = np.asarray(alpha @ z)
    return out, {"z": z, "s": s, "e": e, "u": u, "rows": rows, "cols": cols}


def full_forward(
    x: np.ndarray,
    convs: list[CsrMatrix],
    weights: LayerWeights,
    spec: ConvSpec,
    activation: str = "identity",
    padding_trick: bool = True,
) -> tuple[np.ndarray, LayerCache]:
    """Exact full-graph layer ``sigma(sum_s C_s X W_s)``.

    For GAT, ``convs`` is the single mask returned by `build_fixed_convs` and
    ``padding_trick`` selects between normalizing through a padded ones column
    and dividing the attention matrix by its row sums directly.
    """
    _check_cols(x, weights)
    if any(c.cols != x.shape[0] for c in convs):
        raise InputError("convolution and feature row counts differ")
    cache = LayerCache(spec=spec, x=x, pre=None, activation=activation)
    if spec.kind == "gat":
        mask = convs[0]
        pre = 0.0
        for h in range(spec.heads):
            out, st = _gat_head_forward(x, mask, weights.w[h], weights.att[h], padding_trick)
            cache.gat.append(st)
            pre = pre + out / spec.heads
    else:
        pre = 0.0
        for s, c in enumerate(convs):
            hs = spmm(c, x)
            cache.agg.append(hs)
            pre = pre + weights.support_scale(spec, s) * (hs @ weights.w[spec.weight_index(s)])
    cache.pre = pre
    return activate(activation, pre), cache


def unnormalized_attention_backward(x, mask: CsrMatrix, w, a, st: dict, gu: np.ndarray):
    """Backward of ``U = E (Z || 1)`` with ``E`` the masked unnormalized scores.

    Returns ``(dZ, da)`` where dZ already includes the attention-score paths.
    """
    f = w.shape[1]
    z, s, e, rows, cols = st["z"], st["s"], st["e"], st["rows"], st["cols"]
    n = z.shape[0]
    e_mat = sp.csr_matrix((e, cols, mask.indptr), shape=(n, n))
    dz = np.asarray(e_mat.T @ gu[:, :f])
    de = np.einsum("ij,ij->i", gu[rows, :f], z[cols]) + gu[rows, f]
    ds = de * e * leaky_relu_grad(s)
    src = np.bincount(rows, weights=ds, minlength=n)
    dst = np.bincount(cols, weights=ds, minlength=n)
    dz += np.outer(src, a[:f]) + np.outer(dst, a[f:])
    da = np.concatenate([z.T @ src, z.T @ dst])
    return dz, da


def message_grad(spec: ConvSpec, g: np.ndarray, cache: LayerCache) -> np.ndarray:
    """Gradient w.r.t. the messages as they are passed (the quantity VQ compresses).

    For fixed convolutions this is the post-nonlinearity gradient itself; for
    GAT it is the gradient of every head's padded, unnormalized messages.
    """
    if spec.kind != "gat":
        return g
    parts = [padding_backward(g / spec.heads, st["u"]) for st in cache.gat]
    return np.concatenate(parts, axis=1)


def full_backward(
    grad_next: np.ndarray,
    convs: list[CsrMatrix],
    weights: LayerWeights,
    cache: LayerCache | None,
) -> tuple[np.ndarray, LayerWeights]:
    """Gradients of a layer's inputs and parameters given the output gradient."""
    if cache is None:
        raise StateError("full_backward needs the cache of a matching forward call")
    spec = cache.spec
    g = grad_next * activate_grad(cache.activation, cache.pre)
    grads = weights.zeros_like()
    x = cache.x
    if spec.kind == "gat":
        f = weights.w[0].shape[1]
        mg = message_grad(spec, g, cache)
        gx = np.zeros_like(x)
        for h, st in enumerate(cache.gat):
            gu = mg[:, h * (f + 1):(h + 1) * (f + 1)]
            dz, da = unnormalized_attention_backward(x, convs[0], weights.w[h], weights.att[h], st, gu)
            grads.w[h] += x.T @ dz
            grads.att[h] += da
            gx += dz @ weights.w[h].T
        return gx, grads
    gx = np.zeros_like(x)
    for s, c in enumerate(convs):
        k = spec.weight_index(s)
        scale = weights.support_scale(spec, s)
        gx += scale * (spmm(transpose(c), g) @ weights.w[k].T)
        grads.w[k] += scale * (cache.agg[s].T @ g)
    if spec.kind == "gin":
        grads.eps[0] = np.sum((cache.agg[1] @ weights.w[0]) * g)
    return gx, grads
