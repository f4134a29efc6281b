"""Checkpoints, run configuration files and metrics emission.

Checkpoint layout (little-endian)::

    "VQGN" | version u32 | header_len u64 | JSON header | array payload

The header lists every array by name with dtype, shape and payload offset.
Arrays are written back to back in header order.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .conv import ConvSpec, LayerWeights
from .errors import ConfigError, InputError
from .network import BatchNorm, Model
from .trainer import EpochMetrics, ModelConfig, TrainState
from .vq import Codebook, LayerQuantizer, ProductVqConfig

CHECKPOINT_MAGIC = b"VQGN"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_BOOK_FIELDS = ("codewords", "cluster_size", "cluster_sum", "mean", "var")


def _named_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for l, (lw, bn) in enumerate(zip(state.model.layers, state.model.norms)):
        out += [(f"layer{l}.w{i}", a) for i, a in enumerate(lw.w)]
        out += [(f"layer{l}.att{i}", a) for i, a in enumerate(lw.att)]
        if lw.eps is not None:
            out.append((f"layer{l}.eps", lw.eps))
        if bn is not None:
            out += [(f"layer{l}.bn.{f}", getattr(bn, f)) for f in ("gamma", "beta", "running_mean", "running_var")]
    for l, q in enumerate(state.quantizers):
        out += [(f"vq{l}.{f}", getattr(q.book, f)) for f in _BOOK_FIELDS]
        out.append((f"vq{l}.assignments", q.assignments))
    out += [(f"opt{i}", a) for i, a in enumerate(state.opt_state)]
    return out


def save_checkpoint(state: TrainState, path) -> None:
    arrays = _named_arrays(state)
    entries, offset = [], 0
    for name, a in arrays:
        dt = a.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        offset += a.size * dt.itemsize
    header = {
        "config": state.config.to_dict(),
        "dims": state.model.dims,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "batch_norm": [None if bn is None else {"momentum": bn.momentum, "eps": bn.eps} for bn in state.model.norms],
        "quantizers": [
            {"f_prod": q.config.f_prod, "k": q.config.k, "feat_dim": q.config.feat_dim, "grad_dim": q.config.grad_dim,
             "gamma": q.book.gamma, "beta": q.book.beta,
             "last_rel_error": None if math.isnan(q.last_rel_error) else q.last_rel_error}
            for q in state.quantizers
        ],
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for (_, a), e in zip(arrays, entries):
            fh.write(np.ascontiguousarray(a, dtype=np.dtype(e["dtype"])).tobytes())


def load_checkpoint(path) -> TrainState:
    name = os.path.basename(str(path))
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise InputError(f"{name}: truncated header at byte offset {len(raw)}")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise InputError(f"{name}: bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{name}: unsupported checkpoint version {version} at byte offset 4")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise InputError(f"{name}: header of {hlen} bytes truncated at byte offset {len(raw)}")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{name}: malformed header at byte offset {_PREFIX.size}: {exc}") from None
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        lo = start + e["offset"]
        hi = lo + int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if hi > len(raw):
            raise InputError(f"{name}: array {e['name']} truncated at byte offset {len(raw)} (needs {hi})")
        arrays[e["name"]] = np.frombuffer(raw[lo:hi], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return _rebuild(header, arrays)


def _rebuild(header: dict, arrays: dict) -> TrainState:
    cfg = ModelConfig.from_dict(header["config"])
    spec = cfg.spec()
    dims = header["dims"]
    layers, norms = [], []
    for l in range(len(dims) - 1):
        w = [arrays[f"layer{l}.w{i}"] for i in range(spec.num_weights)]
        att = [arrays[f"layer{l}.att{i}"] for i in range(spec.heads)] if spec.kind == "gat" else []
        layers.append(LayerWeights(w, att, arrays.get(f"layer{l}.eps")))
        bn_meta = header["batch_norm"][l]
        if bn_meta is None:
            norms.append(None)
        else:
            norms.append(BatchNorm(*(arrays[f"layer{l}.bn.{f}"] for f in ("gamma", "beta", "running_mean", "running_var")),
                                   momentum=bn_meta["momentum"], eps=bn_meta["eps"]))
    model = Model(ConvSpec(spec.kind, spec.heads, spec.lipschitz_bound), dims, cfg.activation, layers, norms)
    quantizers = []
    for l, meta in enumerate(header["quantizers"]):
        qc = ProductVqConfig(meta["f_prod"], meta["k"], meta["feat_dim"], meta["grad_dim"])
        book = Codebook(*(arrays[f"vq{l}.{f}"] for f in _BOOK_FIELDS), gamma=meta["gamma"], beta=meta["beta"])
        err = meta["last_rel_error"]
        quantizers.append(LayerQuantizer(qc, book, arrays[f"vq{l}.assignments"].astype(np.int64),
                                         float("nan") if err is None else err))
    opt = [arrays[f"opt{i}"] for i in range(len(model.params()))]
    return TrainState(cfg, model, quantizers, opt, header["epoch"], header["iteration"])


# ---------------------------------------------------------------- run configuration


@dataclass
class RunConfig:
    """Model hyper-parameters plus where to read data and write results."""

    model: ModelConfig
    data: str | None = None
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        d = dict(d)
        paths = {}
        for key in ("data", "out"):
            if key in d:
                val = d.pop(key)
                if val is not None and not isinstance(val, str):
                    raise ConfigError(f"config key {key!r} expects a path string")
                paths[key] = val
        return cls(ModelConfig.from_dict(d), **paths)

    def to_dict(self) -> dict:
        return {**self.model.to_dict(), "data": self.data, "out": self.out}


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{os.path.basename(str(path))}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(d)


def config_keys() -> list[str]:
    return [f.name for f in fields(ModelConfig)]


# ---------------------------------------------------------------- metrics


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def metrics_lines(records: list[EpochMetrics]) -> list[str]:
    """One JSON object per epoch, wall-clock excluded so reruns compare byte for byte."""
    return [json.dumps({k: _clean(v) for k, v in r.record().items()}) for r in records]


def emit_metrics(records: list[EpochMetrics], directory) -> tuple[Path, Path]:
    """Write ``metrics.jsonl`` and ``curve.csv`` (epoch, wall_secs, val_acc) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mpath, cpath = d / "metrics.jsonl", d / "curve.csv"
    with open(mpath, "w", newline="\n") as fh:
        fh.writelines(line + "\n" for line in metrics_lines(records))
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "wall_secs", "val_acc"])
        for r in records:
            w.writerow([r.epoch, f"{r.wall_secs:.6f}", "" if math.isnan(r.val_acc) else r.val_acc])
    return mpath, cpath


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
