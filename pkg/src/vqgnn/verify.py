"""Certification harness: exactness limits, error-bound certificates, gradient checks, JL baseline.

Everything here runs in float64 on small random instances. Each trial owns a
generator seeded from ``(seed, trial)`` so reports are reproducible trial by
trial.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .approx import approx_backward, approx_forward, build_layer_blocks
from .conv import (
    KINDS,
    ConvSpec,
    LayerWeights,
    activate,
    activate_grad,
    attention_lipschitz,
    build_fixed_convs,
    full_backward,
    full_forward,
    gat_scores,
    leaky_relu,
    leaky_relu_grad,
    lipschitz_regularize,
    message_grad,
)
from .errors import ConfigError, InputError
from .graph import CsrMatrix, Graph, frob_norm, from_edge_list, row_slice, spmm, transpose
from .network import (
    BatchNorm,
    Model,
    batch_model_backward,
    batch_model_forward,
    full_model_backward,
    full_model_forward,
    post_backward,
    post_forward,
)
from .trainer import softmax_xent
from .vq import CodewordView, find_nearest, relative_error

LIP_SIGMA = 1.0  # identity, ReLU and LeakyReLU(0.2) are all 1-Lipschitz
SIGMA_PRIME_MAX = 1.0
SLACK_TOL = -1e-9
FD_FLOOR = 1e-6


@dataclass
class BoundReport:
    trial: int
    kind: str
    check: str
    n: int
    batch_size: int
    k: int
    eps: float
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.slack >= SLACK_TOL

    def to_json(self) -> str:
        d = asdict(self)
        d.update(slack=self.slack, passed=self.passed)
        return json.dumps(d, sort_keys=True)


def summarize(reports: list[BoundReport]) -> dict:
    return {
        "trials": len(reports),
        "passed": sum(r.passed for r in reports),
        "min_slack": min((r.slack for r in reports), default=float("nan")),
        "max_ratio": max((r.lhs / r.rhs for r in reports if r.rhs > 0), default=0.0),
    }


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


# ---------------------------------------------------------------- instances


def random_graph(rng: np.random.Generator, n: int, p: float | None = None) -> Graph:
    p = rng.uniform(0.15, 0.5) if p is None else p
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return from_edge_list(np.stack([iu[keep], ju[keep]], axis=1), n)


def lloyd(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10):
    """k-means on rows of ``x``. Used codewords are exact means of their clusters."""
    k = min(k, x.shape[0])
    centers = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
    for _ in range(iters):
        assign = find_nearest(x, centers)
        for v in range(k):
            hit = assign == v
            if hit.any():
                centers[v] = x[hit].mean(axis=0)
    assign = find_nearest(x, centers)
    for v in range(k):
        hit = assign == v
        if hit.any():
            centers[v] = x[hit].mean(axis=0)
    return assign, centers


def _cluster_means(x, assign, k):
    out = np.zeros((k, x.shape[1]))
    counts = np.bincount(assign, minlength=k)
    np.add.at(out, assign, x)
    return out / np.maximum(counts, 1)[:, None]


def _layer_instance(rng, kind: str, n_max: int, heads: int = 1):
    n = int(rng.integers(6, n_max + 1))
    g = random_graph(rng, n)
    spec = ConvSpec(kind, heads=heads)
    f_in, f_out = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    w = LayerWeights.init(spec, f_in, f_out, rng)
    if w.eps is not None:
        w.eps[0] = rng.uniform(0.0, 0.5)
    x = rng.normal(size=(n, f_in))
    b = int(rng.integers(1, n))
    batch = np.sort(rng.choice(n, size=b, replace=False))
    return g, spec, w, x, batch


def _support_norms(convs, weights: LayerWeights, spec: ConvSpec, batch) -> float:
    return sum(
        abs(weights.support_scale(spec, s)) * frob_norm(row_slice(c, batch)) * frob_norm(weights.w[spec.weight_index(s)])
        for s, c in enumerate(convs)
    )


# ---------------------------------------------------------------- bound certificates


def unnormalized_attention(x: np.ndarray, mask: CsrMatrix, w: np.ndarray, a: np.ndarray) -> CsrMatrix:
    """Masked score matrix ``c_ij * h(x_i, x_j)`` without row normalization."""
    rows, cols = mask.row_ids(), mask.indices
    vals = mask.values * gat_scores(x[rows], x[cols], w, a)
    return CsrMatrix(mask.rows, mask.cols, mask.indptr, cols, vals)


def attention_score_lipschitz(x: np.ndarray, xq: np.ndarray, w: np.ndarray, a: np.ndarray) -> float:
    """Lipschitz constant of ``h`` on the region spanned by ``x`` and ``xq`` rows.

    The linear score has gradient norm ``attention_lipschitz(w, a)``;
    LeakyReLU is 1-Lipschitz and ``exp`` is ``exp(B)``-Lipschitz on
    ``[-B, B]`` with ``B = sqrt(2) * L_lin * max ||row||``.
    """
    l_lin = attention_lipschitz(w, a)
    r = max(np.linalg.norm(x, axis=1).max(), np.linalg.norm(xq, axis=1).max())
    return math.exp(math.sqrt(2.0) * l_lin * r) * l_lin


def _check_projected(weights: LayerWeights, bound: float):
    tol = 1e-12
    if any(np.linalg.norm(a) > bound + tol for a in weights.att) or any(
        np.linalg.norm(w, axis=1).max() > bound + tol for w in weights.w
    ):
        raise ConfigError("attention parameters are outside the Lipschitz ball; Lip(h) is unbounded")


def check_forward_bound(trials: int = 100, seed: int = 0, kind: str = "gcn", activation: str = "relu",
                        n_max: int = 32, ks=(2, 4, 8), project: bool = True) -> list[BoundReport]:
    """Instance-wise forward error certificates.

    Fixed convolutions: the mini-batch estimator (exact intra-batch messages,
    codewords for the rest) against ``eps Lip(sigma) sum_s ||C_s,B|| ||W_s|| ||X||``.
    GAT: the all-codeword estimator ``sigma(C' X_q W)`` with an unnormalized
    attention matrix ``C'`` computed from quantized features, against
    ``Lip(sigma) ||W|| (2 ||mask|| Lip(h) eps ||X|| ||X_q|| + ||C|| eps ||X||)``.
    """
    reports = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        g, spec, w, x, batch = _layer_instance(rng, kind, n_max)
        k = min(int(rng.choice(ks)), g.n)
        assign, centers = lloyd(x, k, rng)
        eps = relative_error(x, assign, centers)
        convs = build_fixed_convs(g, spec)
        if kind == "gat":
            if project:
                w = lipschitz_regularize(w, spec.lipschitz_bound)
            _check_projected(w, spec.lipschitz_bound)
            xq = centers[assign]
            mask = convs[0]
            wh, ah = w.w[0], w.att[0]
            c_exact = unnormalized_attention(x, mask, wh, ah)
            c_quant = unnormalized_attention(xq, mask, wh, ah)
            exact = activate(activation, spmm(c_exact, x @ wh))
            approx = activate(activation, spmm(c_quant, xq @ wh))
            lhs = float(np.linalg.norm(approx - exact))
            lip_h = attention_score_lipschitz(x, xq, wh, ah)
            xn = np.linalg.norm(x)
            rhs = LIP_SIGMA * np.linalg.norm(wh) * (
                2 * frob_norm(mask) * lip_h * eps * xn * np.linalg.norm(xq) + frob_norm(c_exact) * eps * xn
            )
            b = g.n
        else:
            view = CodewordView(assign[None, :], centers[None], x.shape[1], 0)
            blocks = build_layer_blocks(convs, [transpose(c) for c in convs], spec, view.assignments, batch, k)
            approx, _ = approx_forward(x[batch], view, blocks, w, spec, activation)
            exact, _ = full_forward(x, convs, w, spec, activation)
            lhs = float(np.linalg.norm(approx - exact[batch]))
            rhs = eps * LIP_SIGMA * _support_norms(convs, w, spec, batch) * np.linalg.norm(x)
            b = batch.size
        reports.append(BoundReport(t, kind, "forward", g.n, b, k, eps, lhs, float(rhs)))
    return reports


def check_backward_bound(trials: int = 100, seed: int = 0, kind: str = "gcn", activation: str = "relu",
                         n_max: int = 32, ks=(2, 4, 8)) -> list[BoundReport]:
    """Instance-wise gradient error certificates for fixed convolutions.

    The output gradient ``grad_next`` is random; ``G = grad_next * sigma'``
    is quantized. The bound is
    ``eps_G sigma'_max sum_s ||(C_s^T)_B|| ||W_s|| ||grad_next||``.
    """
    if kind == "gat":
        raise ConfigError("the backward certificate covers fixed convolutions only")
    reports = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        g, spec, w, x, batch = _layer_instance(rng, kind, n_max)
        k = min(int(rng.choice(ks)), g.n)
        convs = build_fixed_convs(g, spec)
        convs_t = [transpose(c) for c in convs]
        pre, fcache = full_forward(x, convs, w, spec, "identity")
        grad_next = rng.normal(size=pre.shape)
        gm = grad_next * activate_grad(activation, pre)
        assign, gcent = lloyd(gm, k, rng)
        eps = relative_error(gm, assign, gcent) if gm.any() else 0.0
        codes = np.concatenate([_cluster_means(x, assign, k), gcent], axis=1)[None]
        view = CodewordView(assign[None, :], codes, x.shape[1], gm.shape[1])
        blocks = build_layer_blocks(convs, convs_t, spec, view.assignments, batch, k)
        _, cache = approx_forward(x[batch], view, blocks, w, spec, "identity")
        gx_b, _ = approx_backward(gm[batch], view, blocks, w, cache)
        gx, _ = full_backward(gm, convs, w, fcache)
        lhs = float(np.linalg.norm(gx_b - gx[batch]))
        rhs = eps * SIGMA_PRIME_MAX * _support_norms(convs_t, w, spec, batch) * np.linalg.norm(grad_next)
        reports.append(BoundReport(t, kind, "backward", g.n, batch.size, k, eps, lhs, float(rhs)))
    return reports


# ---------------------------------------------------------------- exactness limits


def _full_pass_with_messages(model: Model, x, convs, dlogits_fn, batch):
    """Full-graph forward/backward that also records every layer's input and message gradient.

    Parameter gradients count only the ``batch`` rows of each layer's output
    gradient, which is what a mini-batch step accumulates.
    """
    feats = []
    h = x
    caches = []
    for l, lw in enumerate(model.layers):
        feats.append(h)
        pre, cache = full_forward(h, convs, lw, model.spec, "identity")
        h, pc = post_forward(model, l, pre, training=True)
        caches.append((cache, pc))
    logits = h
    dlogits = dlogits_fn(logits)
    d = dlogits
    msgs, grads = [None] * model.num_layers, [None] * model.num_layers
    norm_grads = [None] * model.num_layers
    for l in range(model.num_layers - 1, -1, -1):
        cache, pc = caches[l]
        dpre, norm_grads[l] = post_backward(model, l, d, pc)
        msgs[l] = message_grad(model.spec, dpre, cache)
        d, _ = full_backward(dpre, convs, model.layers[l], cache)
        rows = np.zeros_like(dpre)
        rows[batch] = dpre[batch]
        grads[l] = full_backward(rows, convs, model.layers[l], cache)[1]
    flat = []
    for lg, ng in zip(grads, norm_grads):
        flat.extend(lg.arrays())
        if ng is not None:
            flat.extend(ng)
    return logits, feats, msgs, flat, d


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12))


def lossless_errors(kind: str, seed: int, mode: str = "k=n", n: int = 14, layers: int = 3,
                    f_prod: int = 2) -> dict:
    """Relative discrepancies between mini-batch and full-graph passes in an exactness limit.

    ``mode="b=n"`` uses the whole graph as the batch with arbitrary codewords;
    ``mode="k=n"`` uses a random half batch with one exact codeword per node
    (features and message gradients taken from the full-graph pass).
    """
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    g = random_graph(rng, n)
    spec = ConvSpec(kind, heads=2 if kind == "gat" else 1)
    dims = [3] + [4] * (layers - 1) + [3]
    model = Model.init(spec, dims, rng, activation="relu", batch_norm=False)
    for lw in model.layers:
        if lw.eps is not None:
            lw.eps[0] = rng.uniform(0.0, 0.5)
    x = rng.normal(size=(n, dims[0]))
    labels = rng.integers(0, dims[-1], size=n)
    convs = build_fixed_convs(g, spec)
    convs_t = [transpose(c) for c in convs]
    if mode == "b=n":
        batch = np.arange(n)
    elif mode == "k=n":
        batch = np.sort(rng.choice(n, size=n // 2, replace=False))
    else:
        raise InputError(f"unknown mode {mode!r}")

    def batch_dlogits(logits):
        out = np.zeros_like(logits)
        out[batch] = softmax_xent(logits[batch], labels[batch])[1]
        return out

    logits, feats, msgs, grads_full, dx_full = _full_pass_with_messages(model, x, convs, batch_dlogits, batch)
    if mode == "k=n":
        views = [CodewordView.lossless(feats[l], msgs[l], f_prod) for l in range(layers)]
        k = n
    else:
        k = 2
        views = []
        for l in range(layers):
            width = feats[l].shape[1] + msgs[l].shape[1]
            nb = math.ceil(width / f_prod)
            views.append(CodewordView(rng.integers(0, k, size=(nb, n)), rng.normal(size=(nb, k, f_prod)),
                                      feats[l].shape[1], msgs[l].shape[1]))
    blocks = [build_layer_blocks(convs, convs_t, spec, v.assignments, batch, k) for v in views]
    logits_b, caches_b, _ = batch_model_forward(model, x[batch], views, blocks, training=True)
    dl = softmax_xent(logits_b, labels[batch])[1]
    grads_b, msgs_b, dx_b = batch_model_backward(model, dl, views, blocks, caches_b)
    return {
        "forward": _rel(logits_b, logits[batch]),
        "param_grad": max(_rel(a, b) for a, b in zip(grads_b, grads_full)),
        "input_grad": _rel(dx_b, dx_full[batch]),
        "message_grad": max(_rel(mb, m[batch]) for mb, m in zip(msgs_b, msgs)),
    }


def equivalence_suite(seeds=range(3), tol: float = 1e-6) -> dict:
    """Run both exactness limits for every convolution kind."""
    results = {}
    ok = True
    for kind in KINDS:
        for mode in ("b=n", "k=n"):
            worst = 0.0
            for s in seeds:
                worst = max(worst, max(lossless_errors(kind, s, mode).values()))
            results[f"{kind}/{mode}"] = worst
            ok &= worst <= tol
    return {"passed": bool(ok), "tol": tol, "max_rel_error": results}


# ---------------------------------------------------------------- gradient checks


def _param_names(model: Model) -> list[str]:
    names = []
    for l, (lw, bn) in enumerate(zip(model.layers, model.norms)):
        names += [f"layer{l}.w{i}" for i in range(len(lw.w))]
        names += [f"layer{l}.att{i}" for i in range(len(lw.att))]
        if lw.eps is not None:
            names.append(f"layer{l}.eps")
        if bn is not None:
            names += [f"layer{l}.bn_gamma", f"layer{l}.bn_beta"]
    return names


def finite_diff_check(model: Model, x: np.ndarray, convs, labels, h: float = 1e-5, tol: float = 1e-4,
                      batch=None, views=None, blocks=None) -> GradCheckReport:
    """Compare analytic gradients with central differences of the cross-entropy loss.

    Without ``batch`` the full-graph network is checked. With ``batch``,
    ``views`` and ``blocks`` the mini-batch network is checked on the batch
    loss with those codewords held fixed (zero gradient codewords make the
    mini-batch backward the exact derivative of the mini-batch forward).
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    if batch is None:
        def loss():
            return softmax_xent(full_model_forward(model, x, convs)[0], labels)[0]

        logits, caches = full_model_forward(model, x, convs)
        grads, dx = full_model_backward(model, softmax_xent(logits, labels)[1], convs, caches)
        xs = x
    else:
        xs = x[batch].copy()
        lab = labels[batch]

        def loss():
            return softmax_xent(batch_model_forward(model, xs, views, blocks)[0], lab)[0]

        logits, caches, _ = batch_model_forward(model, xs, views, blocks)
        grads, _, dx = batch_model_backward(model, softmax_xent(logits, lab)[1], views, blocks, caches)
    arrays = list(zip(_param_names(model), model.params(), grads)) + [("x", xs, dx)]
    worst, where, count = 0.0, "", 0
    for name, arr, grad in arrays:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss()
            arr[idx] = old - h
            lm = loss()
            arr[idx] = old
            num = (lp - lm) / (2 * h)
            err = abs(grad[idx] - num) / max(abs(grad[idx]), abs(num), FD_FLOOR)
            count += 1
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    return GradCheckReport(float(worst), where, count, tol)


def kink_margin(model: Model, x: np.ndarray, convs) -> float:
    """Smallest distance of any ReLU pre-activation or attention score from its kink."""
    margin = np.inf
    h = x
    for l, lw in enumerate(model.layers):
        pre, cache = full_forward(h, convs, lw, model.spec, "identity")
        for st in cache.gat:
            margin = min(margin, float(np.abs(st["s"]).min()))
        if model.layer_activation(l) != "identity":
            margin = min(margin, float(np.abs(pre).min()))
        h = activate(model.layer_activation(l), pre)
    return margin


def gradcheck_instance(kind: str, seed: int, n: int = 12, layers: int = 3, width: int = 3,
                       min_margin: float = 1e-3, max_logit: float = 30.0, max_tries: int = 100):
    """A small float64 model and graph whose activations sit away from kinks and saturation.

    Returns ``(model, x, convs, labels, graph)``.
    """
    rng = np.random.default_rng([seed, 7, KINDS.index(kind)])
    spec = ConvSpec(kind, heads=2 if kind == "gat" else 1)
    dims = [width] * layers + [3]
    for _ in range(max_tries):
        g = random_graph(rng, n)
        model = Model.init(spec, dims, rng, activation="relu", batch_norm=False)
        for lw in model.layers:
            if lw.eps is not None:
                lw.eps[0] = rng.uniform(0.0, 0.5)
        x = rng.normal(size=(n, width))
        convs = build_fixed_convs(g, spec)
        # saturated softmax makes the loss flat relative to its rounding error
        saturated = np.abs(full_model_forward(model, x, convs)[0]).max() > max_logit
        if not saturated and kink_margin(model, x, convs) > min_margin:
            return model, x, convs, rng.integers(0, 3, size=n), g
    raise InputError("could not draw an instance away from activation kinks")


def batch_gradcheck_instance(kind: str, seed: int, n: int = 12, k: int = 3, f_prod: int = 2,
                             batch_norm: bool = True):
    """Mini-batch counterpart of :func:`gradcheck_instance` with lossy feature codewords.

    Gradient codewords are zero, so the mini-batch backward is the exact
    derivative of the mini-batch forward. Returns
    ``(model, x, convs, labels, batch, views, blocks)``.
    """
    model, x, convs, labels, g = gradcheck_instance(kind, seed, n=n)
    if batch_norm:
        model = Model(model.spec, model.dims, model.activation, model.layers,
                      [BatchNorm.init(d) for d in model.dims[1:-1]] + [None])
    rng = np.random.default_rng([seed, 11, KINDS.index(kind)])
    batch = np.sort(rng.choice(n, size=n // 2, replace=False))
    convs_t = [transpose(c) for c in convs]
    views, blocks = [], []
    for l in range(model.num_layers):
        fd, gd = model.dims[l], model.grad_width(l)
        nb = math.ceil((fd + gd) / f_prod)
        codes = rng.normal(size=(nb, k, f_prod))
        for p in range(nb):
            lo = p * f_prod
            codes[p, :, max(fd - lo, 0):] = 0.0
        view = CodewordView(rng.integers(0, k, size=(nb, n)), codes, fd, gd)
        views.append(view)
        blocks.append(build_layer_blocks(convs, convs_t, model.spec, view.assignments, batch, k))
    return model, x, convs, labels, batch, views, blocks


# ---------------------------------------------------------------- second oracle


def naive_forward(g: Graph, spec: ConvSpec, weights: LayerWeights, x: np.ndarray, activation: str = "identity"):
    """Per-node message-passing loop; returns ``(output, pre-activation)``."""
    n = g.n
    nbrs = [list(g.neighbors(i)) for i in range(n)]
    f_out = weights.w[0].shape[1]
    pre = np.zeros((n, f_out))
    for i in range(n):
        if spec.kind == "gcn":
            deg_i = len(nbrs[i]) + 1
            for j in nbrs[i] + [i]:
                pre[i] += x[j] @ weights.w[0] / math.sqrt(deg_i * (len(nbrs[j]) + 1))
        elif spec.kind == "sage":
            pre[i] += x[i] @ weights.w[0]
            if nbrs[i]:
                pre[i] += np.mean([x[j] for j in nbrs[i]], axis=0) @ weights.w[1]
        elif spec.kind == "gin":
            agg = (1.0 + weights.eps[0]) * x[i]
            for j in nbrs[i]:
                agg = agg + x[j]
            pre[i] = agg @ weights.w[0]
        else:
            for w, a in zip(weights.w, weights.att):
                z = x @ w
                f = w.shape[1]
                js = nbrs[i] + [i]
                e = np.array([math.exp(leaky_relu(z[i] @ a[:f] + z[j] @ a[f:])) for j in js])
                alpha = e / e.sum()
                pre[i] += sum(al * z[j] for al, j in zip(alpha, js)) / spec.heads
    return activate(activation, pre), pre


def naive_backward(g: Graph, spec: ConvSpec, weights: LayerWeights, x: np.ndarray, grad_out: np.ndarray,
                   activation: str = "identity") -> np.ndarray:
    """Input gradient by per-edge chain rule (softmax form for GAT)."""
    n = g.n
    nbrs = [list(g.neighbors(i)) for i in range(n)]
    _, pre = naive_forward(g, spec, weights, x, activation)
    gm = grad_out * activate_grad(activation, pre)
    dx = np.zeros_like(x)
    for i in range(n):
        if spec.kind == "gcn":
            deg_i = len(nbrs[i]) + 1
            for j in nbrs[i] + [i]:
                dx[j] += (gm[i] @ weights.w[0].T) / math.sqrt(deg_i * (len(nbrs[j]) + 1))
        elif spec.kind == "sage":
            dx[i] += gm[i] @ weights.w[0].T
            for j in nbrs[i]:
                dx[j] += (gm[i] @ weights.w[1].T) / len(nbrs[i])
        elif spec.kind == "gin":
            dx[i] += (1.0 + weights.eps[0]) * (gm[i] @ weights.w[0].T)
            for j in nbrs[i]:
                dx[j] += gm[i] @ weights.w[0].T
        else:
            for w, a in zip(weights.w, weights.att):
                z = x @ w
                f = w.shape[1]
                js = nbrs[i] + [i]
                s = np.array([z[i] @ a[:f] + z[j] @ a[f:] for j in js])
                e = np.exp(leaky_relu(s))
                alpha = e / e.sum()
                go = gm[i] / spec.heads
                dz = np.zeros_like(z)
                dalpha = np.array([go @ z[j] for j in js])
                for al, j in zip(alpha, js):
                    dz[j] += al * go
                # softmax backward, then through LeakyReLU to both endpoints
                ds = alpha * (dalpha - alpha @ dalpha) * leaky_relu_grad(s)
                for d_ij, j in zip(ds, js):
                    dz[i] += d_ij * a[:f]
                    dz[j] += d_ij * a[f:]
                dx += dz @ w.T
    return dx


# ---------------------------------------------------------------- sparse JL baseline


def sample_sparse_projection(n: int, k: int, sparsity: float, rng: np.random.Generator) -> sp.csr_matrix:
    """``n x k`` matrix with ``max(1, ceil(sparsity k))`` entries of ``+-1/sqrt(s)`` per row."""
    if not 0 < sparsity <= 1:
        raise InputError("sparsity must lie in (0, 1]")
    s = min(k, max(1, math.ceil(sparsity * k)))
    keys = rng.random((n, k))
    cols = keys.argpartition(s - 1, axis=1)[:, :s] if s < k else np.tile(np.arange(k), (n, 1))
    vals = rng.choice([-1.0, 1.0], size=(n, s)) / math.sqrt(s)
    return sp.csr_matrix((vals.ravel(), cols.ravel(), np.arange(n + 1) * s), shape=(n, k))


def jl_failure_rate(c: CsrMatrix, x: np.ndarray, projections, eps: float) -> float:
    """Fraction of (projection, column) pairs with ``||C R R^T x - C x|| >= eps ||C x||``."""
    cs = c.to_scipy()
    cx = np.asarray(cs @ x)
    ref = np.linalg.norm(cx, axis=0)
    fails = total = 0
    for r in projections:
        approx = cs @ np.asarray(r @ np.asarray(r.T @ x))
        err = np.linalg.norm(approx - cx, axis=0)
        bad = np.where(ref > 0, ~(err < eps * ref), err > 0)
        fails += int(bad.sum())
        total += bad.size
    return fails / total


def sparse_jl_project(c: CsrMatrix, x: np.ndarray, k: int, sparsity: float = 0.1, trials: int = 200,
                      seed=0, eps: float = 0.5, force_identity: bool = False) -> float:
    """Empirical failure rate of the sparse JL sketch ``C R R^T X`` over ``trials`` draws of ``R``.

    ``force_identity`` replaces every draw with ``R = I_n`` (requires ``k == n``).
    """
    n = c.cols
    if not 1 <= k <= n:
        raise InputError(f"k must lie in [1, {n}]")
    if force_identity:
        if k != n:
            raise InputError("force_identity needs k == n")
        projs = [sp.identity(n, format="csr")] * trials
    else:
        rng = np.random.default_rng(seed)
        projs = (sample_sparse_projection(n, k, sparsity, rng) for _ in range(trials))
    return jl_failure_rate(c, x, projs, eps)


def jl_trend(n: int = 256, ks=(16, 64, 256), trials: int = 200, repeats: int = 20, eps: float = 0.5,
             sparsity: float = 0.1, seed: int = 0) -> dict[int, float]:
    """Mean sparse-JL failure rate per ``k`` for a GCN operator on an ER(n, 0.2) graph.

    Shifted Gaussian features give ``C X`` a dominant smooth component, the
    regime where the sketch error falls visibly with ``k``.
    """
    rng = np.random.default_rng([seed, 3])
    g = random_graph(rng, n, p=0.2)
    c = build_fixed_convs(g, ConvSpec("gcn"))[0]
    x = rng.normal(size=(n, 8)) + 1.0
    return {
        k: float(np.mean([sparse_jl_project(c, x, k, sparsity, trials, seed=[seed, k, r], eps=eps)
                          for r in range(repeats)]))
        for k in ks
    }


def gradcheck_suite(seeds=range(5), tol: float = 1e-4) -> list[tuple[str, str, int, GradCheckReport]]:
    """Full-graph and mini-batch finite-difference checks for every convolution kind."""
    out = []
    for kind in KINDS:
        for s in seeds:
            model, x, convs, labels, _ = gradcheck_instance(kind, s)
            out.append((kind, "full", s, finite_diff_check(model, x, convs, labels, tol=tol)))
            model, x, convs, labels, batch, views, blocks = batch_gradcheck_instance(kind, s)
            out.append((kind, "batch", s, finite_diff_check(model, x, convs, labels, tol=tol, batch=batch,
                                                            views=views, blocks=blocks)))
    return out
