"""Layer stack: convolutions, optional batch normalization and activations.

Each layer computes ``act(norm(conv(x)))``; the last layer has neither norm
nor activation. Convolutions always run with the identity activation so the
message gradient they report is the gradient of the convolution output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import approx_backward, approx_forward
from .conv import ConvSpec, LayerWeights, activate, activate_grad, full_backward, full_forward, message_grad


@dataclass
class BatchNorm:
    """Per-feature affine normalization over the rows of a batch."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, width: int, dtype=np.float64) -> "BatchNorm":
        return cls(np.ones(width, dtype), np.zeros(width, dtype), np.zeros(width, dtype), np.ones(width, dtype))

    def forward(self, h: np.ndarray, training: bool):
        if training:
            mu, var = h.mean(axis=0), h.var(axis=0)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (h - mu) * inv
        return self.gamma * xhat + self.beta, (xhat, inv, training)

    def backward(self, dout: np.ndarray, cache):
        xhat, inv, training = cache
        dgamma = np.sum(dout * xhat, axis=0)
        dbeta = np.sum(dout, axis=0)
        dxhat = dout * self.gamma
        if not training:
            return dxhat * inv, dgamma, dbeta
        m = dout.shape[0]
        dh = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        return dh, dgamma, dbeta

    def copy(self) -> "BatchNorm":
        return BatchNorm(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                         self.running_var.copy(), self.momentum, self.eps)


@dataclass
class Model:
    spec: ConvSpec
    dims: list[int]
    activation: str
    layers: list[LayerWeights]
    norms: list[BatchNorm | None]

    @classmethod
    def init(cls, spec: ConvSpec, dims: list[int], rng: np.random.Generator, activation: str = "relu",
             batch_norm: bool = False, dtype=np.float64) -> "Model":
        layers = [LayerWeights.init(spec, dims[l], dims[l + 1], rng, dtype) for l in range(len(dims) - 1)]
        norms = [
            BatchNorm.init(dims[l + 1], dtype) if batch_norm and l < len(dims) - 2 else None
            for l in range(len(dims) - 1)
        ]
        return cls(spec, list(dims), activation, layers, norms)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer_activation(self, l: int) -> str:
        return self.activation if l < self.num_layers - 1 else "identity"

    def grad_width(self, l: int) -> int:
        return self.spec.grad_width(self.dims[l + 1])

    def params(self) -> list[np.ndarray]:
        """Every learnable array, in the order used by gradients and optimizer state."""
        out = []
        for lw, bn in zip(self.layers, self.norms):
            out.extend(lw.arrays())
            if bn is not None:
                out.extend([bn.gamma, bn.beta])
        return out

    def copy(self) -> "Model":
        return Model(self.spec, list(self.dims), self.activation, [w.copy() for w in self.layers],
                     [None if b is None else b.copy() for b in self.norms])


def post_forward(model: Model, l: int, pre: np.ndarray, training: bool):
    h, bn_cache = pre, None
    bn = model.norms[l]
    if bn is not None:
        h, bn_cache = bn.forward(pre, training)
    act = model.layer_activation(l)
    return activate(act, h), (h, bn_cache, act)


def post_backward(model: Model, l: int, dout: np.ndarray, post_cache):
    h, bn_cache, act = post_cache
    d = dout * activate_grad(act, h)
    bn = model.norms[l]
    if bn is None:
        return d, None
    dh, dg, db = bn.backward(d, bn_cache)
    return dh, (dg, db)


def _flatten(layer_grads: list[LayerWeights], norm_grads: list) -> list[np.ndarray]:
    out = []
    for lg, ng in zip(layer_grads, norm_grads):
        out.extend(lg.arrays())
        if ng is not None:
            out.extend(ng)
    return out


def full_model_forward(model: Model, x: np.ndarray, convs, training: bool = True, padding_trick: bool = True):
    """Exact forward of the whole stack on the full graph. Returns (logits, caches)."""
    caches = []
    for l, lw in enumerate(model.layers):
        pre, cache = full_forward(x, convs, lw, model.spec, "identity", padding_trick)
        x, pc = post_forward(model, l, pre, training)
        caches.append((cache, pc))
    return x, caches


def full_model_backward(model: Model, dlogits: np.ndarray, convs, caches):
    """Parameter gradients (flat, aligned with ``model.params()``) and the input gradient."""
    layer_grads, norm_grads = [None] * model.num_layers, [None] * model.num_layers
    d = dlogits
    for l in range(model.num_layers - 1, -1, -1):
        cache, pc = caches[l]
        dpre, norm_grads[l] = post_backward(model, l, d, pc)
        d, layer_grads[l] = full_backward(dpre, convs, model.layers[l], cache)
    return _flatten(layer_grads, norm_grads), d


def batch_model_forward(model: Model, x_b: np.ndarray, views, blocks, training: bool = True):
    """Mini-batch forward through every layer.

    Returns (logits, caches, inputs) where ``inputs[l]`` is the batch's input
    to layer ``l``.
    """
    caches, inputs = [], []
    x = x_b
    for l, lw in enumerate(model.layers):
        inputs.append(x)
        pre, cache = approx_forward(x, views[l], blocks[l], lw, model.spec, "identity")
        x, pc = post_forward(model, l, pre, training)
        caches.append((cache, pc))
    return x, caches, inputs


def batch_model_backward(model: Model, dlogits: np.ndarray, views, blocks, caches):
    """Mini-batch backward.

    Returns (flat parameter grads, per-layer message grads, batch input grad).
    """
    layer_grads, norm_grads = [None] * model.num_layers, [None] * model.num_layers
    msg = [None] * model.num_layers
    d = dlogits
    for l in range(model.num_layers - 1, -1, -1):
        cache, pc = caches[l]
        dpre, norm_grads[l] = post_backward(model, l, d, pc)
        msg[l] = message_grad(model.spec, dpre, cache)
        d, layer_grads[l] = approx_backward(dpre, views[l], blocks[l], model.layers[l], cache)
    return _flatten(layer_grads, norm_grads), msg, d
