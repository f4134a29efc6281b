"""Mini-batch training with quantized out-of-batch messages, plus a full-graph reference trainer.

One training iteration:

1. slice the convolution rows of the batch and group out-of-batch columns by codeword,
2. run every layer forward on the batch,
3. compute the loss on the batch's labeled training nodes and backpropagate,
4. update each layer's codebooks with ``[layer input || message gradient]`` of the batch,
5. take an RMSprop step (and re-project GAT parameters).

Gradient codewords read in step 3 therefore lag one iteration behind.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .approx import build_layer_blocks, approx_forward, message_count
from .conv import ACTIVATIONS, KINDS, ConvSpec, lipschitz_regularize
from .data import DatasetBundle
from .errors import ConfigError, InputError, NumericError, RunError
from .graph import CsrMatrix, Graph, transpose
from .network import (
    Model,
    batch_model_backward,
    batch_model_forward,
    full_model_backward,
    full_model_forward,
    post_forward,
)
from .conv import build_fixed_convs
from .vq import LayerQuantizer, ProductVqConfig

SAMPLERS = ("nodes", "edges", "random-walk")
RMS_EPS = 1e-8


@dataclass
class ModelConfig:
    conv: str = "gcn"
    layers: int = 3
    hidden: int = 128
    codebook_size: int = 1024
    f_prod: int = 4
    batch_size: int = 256
    lr: float = 3e-3
    smoothing: float = 0.99
    gamma: float = 0.9
    beta: float = 0.9
    epochs: int = 100
    sampler: str = "nodes"
    walk_length: int = 3
    seed: int = 0
    heads: int = 1
    lipschitz_bound: float = 1.0
    activation: str = "relu"
    batch_norm: bool = True
    dtype: str = "float32"
    eval_every: int = 1

    def validate(self) -> "ModelConfig":
        if self.conv not in KINDS:
            raise ConfigError(f"conv must be one of {KINDS}, got {self.conv!r}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        for name in ("layers", "hidden", "codebook_size", "f_prod", "batch_size", "walk_length", "heads", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.lr < 0:
            raise ConfigError("epochs and lr must be non-negative")
        for name in ("smoothing", "gamma", "beta"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not self.lipschitz_bound > 0:
            raise ConfigError("lipschitz_bound must be positive")
        return self

    def spec(self) -> ConvSpec:
        return ConvSpec(self.conv, self.heads, self.lipschitz_bound)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for key, val in d.items():
            want = type(known[key].default)
            if want is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, want) or (want is int and isinstance(val, bool)):
                raise ConfigError(f"config key {key!r} expects {want.__name__}, got {type(val).__name__}")
            out[key] = val
        return cls(**out).validate()


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    eps_per_layer: list[float]
    messages_intra: int
    messages_codeword: int
    wall_secs: float = 0.0

    def record(self) -> dict:
        """Deterministic part of the metrics (wall-clock time excluded)."""
        d = asdict(self)
        d.pop("wall_secs")
        return d


@dataclass
class GraphOps:
    """Convolution supports of a graph and their transposes."""

    convs: list[CsrMatrix]
    convs_t: list[CsrMatrix]

    @classmethod
    def build(cls, graph: Graph, spec: ConvSpec, dtype=np.float64) -> "GraphOps":
        convs = [c.astype(dtype) for c in build_fixed_convs(graph, spec)]
        return cls(convs, [transpose(c) for c in convs])


@dataclass
class TrainState:
    config: ModelConfig
    model: Model
    quantizers: list[LayerQuantizer]
    opt_state: list[np.ndarray]
    epoch: int = 0
    iteration: int = 0

    @property
    def num_nodes(self) -> int:
        return self.quantizers[0].assignments.shape[1]


# ---------------------------------------------------------------- building blocks


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,) or (b and (labels.min() < 0 or labels.max() >= c)):
        raise InputError(f"labels must be {b} class ids in [0, {c})")
    if b == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    loss = float(np.mean(lse - shifted[np.arange(b), labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def rms_step(param: np.ndarray, grad: np.ndarray, acc: np.ndarray, lr: float, smoothing: float):
    """RMSprop update, in place. Returns ``(param, acc)``."""
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in optimizer step")
    acc *= smoothing
    acc += (1 - smoothing) * grad * grad
    param -= lr * grad / (np.sqrt(acc) + RMS_EPS)
    return param, acc


def random_walks(graph: Graph, roots: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random walks; row ``i`` is root ``i`` followed by ``length`` steps.

    A walk at a node without neighbours stays put.
    """
    indptr, indices = graph.csr_structure()
    cur = np.asarray(roots, dtype=np.int64)
    out = [cur]
    if indices.size == 0:
        return np.repeat(cur[:, None], length + 1, axis=1)
    for _ in range(length):
        deg = indptr[cur + 1] - indptr[cur]
        step = np.floor(rng.random(cur.size) * np.maximum(deg, 1)).astype(np.int64)
        nxt = np.where(deg > 0, indices[np.minimum(indptr[cur] + step, indices.size - 1)], cur)
        out.append(nxt)
        cur = nxt
    return np.stack(out, axis=1)


def _top_up(picked: np.ndarray, b: int, n: int, rng) -> np.ndarray:
    _, first = np.unique(picked, return_index=True)
    picked = picked[np.sort(first)][:b]
    if picked.size < b:
        rest = np.setdiff1d(np.arange(n), picked)
        picked = np.concatenate([picked, rng.choice(rest, size=b - picked.size, replace=False)])
    return np.sort(picked)


def sample_minibatch(strategy: str, b: int, graph: Graph, rng: np.random.Generator, walk_length: int = 3) -> np.ndarray:
    """Exactly ``b`` distinct sorted node ids drawn by ``strategy``."""
    n = graph.n
    if not 1 <= b <= n:
        raise InputError(f"batch size {b} outside [1, {n}]")
    if strategy not in SAMPLERS:
        raise ConfigError(f"unknown sampler {strategy!r}")
    if b == n:
        return np.arange(n, dtype=np.int64)
    if strategy == "nodes":
        return np.sort(rng.choice(n, size=b, replace=False))
    if strategy == "edges":
        m = graph.num_edges
        take = min(m, math.ceil(b / 2))
        picked = graph.edges[rng.choice(m, size=take, replace=False)].ravel() if take else np.zeros(0, np.int64)
        return _top_up(picked, b, n, rng)
    roots = rng.choice(n, size=max(1, b // walk_length), replace=False)
    return _top_up(random_walks(graph, roots, walk_length, rng).ravel(), b, n, rng)


def epoch_batches(strategy: str, b: int, graph: Graph, rng: np.random.Generator, walk_length: int = 3):
    """The ``ceil(n / b)`` batches of one epoch.

    The node sampler walks a fresh permutation (the final batch may be
    smaller); the other samplers draw each batch independently.
    """
    n = graph.n
    b = min(b, n)
    iters = math.ceil(n / b)
    if strategy == "nodes":
        perm = rng.permutation(n)
        return [np.sort(perm[i * b:(i + 1) * b]) for i in range(iters)]
    return [sample_minibatch(strategy, b, graph, rng, walk_length) for _ in range(iters)]


def _streams(seed: int):
    """Independent generators for weights, codebooks and sampling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def project_parameters(model: Model) -> None:
    """Apply the GAT Lipschitz projection in place (no-op for fixed convolutions)."""
    if not model.spec.learnable:
        return
    for lw in model.layers:
        proj = lipschitz_regularize(lw, model.spec.lipschitz_bound)
        for dst, src in zip(lw.arrays(), proj.arrays()):
            np.copyto(dst, src)


def _layer_chunks(model: Model, l: int, x_rows: np.ndarray, rows: np.ndarray, view, ops: GraphOps,
                  table: np.ndarray, k: int, chunk: int) -> np.ndarray:
    """Layer ``l`` outputs for sorted ``rows`` in chunks, with stored assignments (eval mode)."""
    out = []
    for i in range(0, rows.size, chunk):
        idx = rows[i:i + chunk]
        blocks = build_layer_blocks(ops.convs, ops.convs_t, model.spec, table, idx, k)
        pre, _ = approx_forward(x_rows[i:i + chunk], view, blocks, model.layers[l], model.spec)
        out.append(post_forward(model, l, pre, training=False)[0])
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.dims[l + 1]), dtype=x_rows.dtype)


def init_quantizers(model: Model, ops: GraphOps, x: np.ndarray, cfg: ModelConfig,
                    rng: np.random.Generator) -> list[LayerQuantizer]:
    """Seed every layer's codebooks layer by layer with zero gradient halves."""
    n = x.shape[0]
    nodes = np.arange(n, dtype=np.int64)
    quantizers = []
    feats = x
    for l in range(model.num_layers):
        if l > 0:
            prev = quantizers[l - 1]
            feats = _layer_chunks(model, l - 1, feats, nodes, prev.view(), ops, prev.assignments,
                                  cfg.codebook_size, cfg.batch_size)
        qcfg = ProductVqConfig(cfg.f_prod, cfg.codebook_size, model.dims[l], model.grad_width(l))
        quantizers.append(LayerQuantizer.initialize(qcfg, feats, None, rng, cfg.gamma, cfg.beta))
    return quantizers


@dataclass
class StepStats:
    loss: float
    labeled: int
    eps: list[float] = field(default_factory=list)
    intra: int = 0
    codeword: int = 0


def train_step(state: TrainState, ops: GraphOps, x: np.ndarray, labels: np.ndarray,
               train_mask: np.ndarray, batch: np.ndarray) -> StepStats:
    cfg, model = state.config, state.model
    k = cfg.codebook_size
    views = [q.view() for q in state.quantizers]
    blocks = [build_layer_blocks(ops.convs, ops.convs_t, model.spec, q.assignments, batch, k)
              for q in state.quantizers]
    logits, caches, inputs = batch_model_forward(model, x[batch], views, blocks, training=True)
    lab = np.flatnonzero(train_mask[batch])
    loss, dl = softmax_xent(logits[lab], labels[batch][lab])
    if not np.isfinite(loss):
        raise RunError(f"non-finite loss at epoch {state.epoch + 1}", epoch=state.epoch + 1)
    dlogits = np.zeros_like(logits)
    dlogits[lab] = dl
    grads, msg, _ = batch_model_backward(model, dlogits, views, blocks, caches)
    stats = StepStats(loss=loss, labeled=int(lab.size))
    for l, q in enumerate(state.quantizers):
        q.update(inputs[l], msg[l], batch)
        stats.eps.append(q.last_rel_error)
        a, c = message_count(blocks[l])
        stats.intra += a
        stats.codeword += c
    for p, g, acc in zip(model.params(), grads, state.opt_state):
        rms_step(p, g, acc, cfg.lr, cfg.smoothing)
    project_parameters(model)
    state.iteration += 1
    return stats


def _accuracy(logits, labels, mask) -> float:
    idx = np.flatnonzero(mask & (labels >= 0))
    if idx.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def _model_dims(cfg: ModelConfig, data: DatasetBundle) -> list[int]:
    if data.num_classes < 1 or not data.train_mask.any():
        raise InputError("dataset needs labels and at least one train node")
    return [data.features.shape[1]] + [cfg.hidden] * (cfg.layers - 1) + [data.num_classes]


def train(cfg: ModelConfig, data: DatasetBundle, progress=None) -> tuple[TrainState, list[EpochMetrics]]:
    """Train with quantized out-of-batch messages.

    ``progress``, if given, is called with each `EpochMetrics` as it is produced.
    """
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    w_rng, vq_rng, s_rng = _streams(cfg.seed)
    spec = cfg.spec()
    model = Model.init(spec, _model_dims(cfg, data), w_rng, cfg.activation, cfg.batch_norm, dtype)
    project_parameters(model)
    ops = GraphOps.build(data.graph, spec, dtype)
    x = data.features.astype(dtype)
    try:
        quantizers = init_quantizers(model, ops, x, cfg, vq_rng)
    except NumericError as exc:
        raise RunError(f"codebook initialization failed: {exc}", epoch=0) from exc
    state = TrainState(cfg, model, quantizers, [np.zeros_like(p) for p in model.params()])
    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        loss_sum = labeled = intra = codeword = 0
        eps = np.zeros(model.num_layers)
        batches = epoch_batches(cfg.sampler, cfg.batch_size, data.graph, s_rng, cfg.walk_length)
        for batch in batches:
            try:
                st = train_step(state, ops, x, data.labels, data.train_mask, batch)
            except NumericError as exc:
                raise RunError(f"numeric failure at epoch {epoch}: {exc}", epoch=epoch) from exc
            loss_sum += st.loss * st.labeled
            labeled += st.labeled
            eps += st.eps
            intra += st.intra
            codeword += st.codeword
        state.epoch = epoch
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            logits = infer(state, data, ops=ops)
            accs = [_accuracy(logits, data.labels, m) for m in (data.train_mask, data.val_mask, data.test_mask)]
        else:
            accs = [float("nan")] * 3
        m = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / max(labeled, 1),
            train_acc=accs[0],
            val_acc=accs[1],
            test_acc=accs[2],
            eps_per_layer=[float(e) for e in eps / len(batches)],
            messages_intra=int(intra),
            messages_codeword=int(codeword),
            wall_secs=time.perf_counter() - start,
        )
        history.append(m)
        if progress is not None:
            progress(m)
    return state, history


def infer(state: TrainState, data: DatasetBundle, inductive: bool = False, nodes=None,
          batch_size: int | None = None, ops: GraphOps | None = None) -> np.ndarray:
    """Logits for ``nodes`` (default: every node) with frozen weights and codebooks.

    Transductive inference reuses the stored assignments. Inductive inference
    expects the training graph's nodes first, followed by unseen nodes; those
    are assigned layer by layer to their nearest codewords from features alone.
    Predictions are the argmax of the returned rows.
    """
    cfg, model = state.config, state.model
    dtype = np.dtype(cfg.dtype)
    x = np.asarray(data.features, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise InputError(f"feature width {x.shape[-1]} does not match the model input width {model.dims[0]}")
    known = state.num_nodes
    if (not inductive and data.n != known) or data.n < known:
        raise InputError(f"graph has {data.n} nodes but the state covers {known}; "
                         + ("use inductive inference" if data.n > known else "node count mismatch"))
    ops = ops or GraphOps.build(data.graph, model.spec, dtype)
    chunk = batch_size or cfg.batch_size
    k = cfg.codebook_size
    quant = state.quantizers
    if data.n > known:
        quant = [q.copy() for q in quant]
        new = np.arange(known, data.n, dtype=np.int64)
        feats = x[new]
        for l, q in enumerate(quant):
            q.extend(new.size)
            q.assignments[:, new] = q.assign_features(feats)
            if l < model.num_layers - 1:
                feats = _layer_chunks(model, l, feats, new, q.view(), ops, q.assignments, k, chunk)
    nodes = np.arange(data.n, dtype=np.int64) if nodes is None else np.asarray(nodes, dtype=np.int64)
    order = np.argsort(nodes, kind="stable")
    rows = nodes[order]
    h = x[rows]
    for l, q in enumerate(quant):
        h = _layer_chunks(model, l, h, rows, q.view(), ops, q.assignments, k, chunk)
    out = np.empty_like(h)
    out[order] = h
    return out


def train_full(cfg: ModelConfig, data: DatasetBundle, steps_per_epoch: int | None = None):
    """Full-graph reference trainer with the same initialization and optimizer.

    Takes ``ceil(n / batch_size)`` steps per epoch by default so it sees as
    many updates as the mini-batch run. Returns ``(model, metrics)``.
    """
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    w_rng, _, _ = _streams(cfg.seed)
    spec = cfg.spec()
    model = Model.init(spec, _model_dims(cfg, data), w_rng, cfg.activation, cfg.batch_norm, dtype)
    project_parameters(model)
    ops = GraphOps.build(data.graph, spec, dtype)
    x = data.features.astype(dtype)
    acc_state = [np.zeros_like(p) for p in model.params()]
    steps = steps_per_epoch or math.ceil(data.n / min(cfg.batch_size, data.n))
    lab = np.flatnonzero(data.train_mask)
    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps):
            logits, caches = full_model_forward(model, x, ops.convs, training=True)
            loss, dl = softmax_xent(logits[lab], data.labels[lab])
            if not np.isfinite(loss):
                raise RunError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            dlogits = np.zeros_like(logits)
            dlogits[lab] = dl
            grads, _ = full_model_backward(model, dlogits, ops.convs, caches)
            for p, g, a in zip(model.params(), grads, acc_state):
                rms_step(p, g, a, cfg.lr, cfg.smoothing)
            project_parameters(model)
            losses.append(loss)
        logits, _ = full_model_forward(model, x, ops.convs, training=False)
        accs = [_accuracy(logits, data.labels, m) for m in (data.train_mask, data.val_mask, data.test_mask)]
        history.append(EpochMetrics(epoch, float(np.mean(losses)), *accs, eps_per_layer=[0.0] * model.num_layers,
                                    messages_intra=0, messages_codeword=0,
                                    wall_secs=time.perf_counter() - start))
    return model, history
