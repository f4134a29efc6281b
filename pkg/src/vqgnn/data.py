"""Node-classification datasets: container, synthetic generators and the directory format.

A dataset directory holds four files::

    edges.tsv     src \\t dst per line, '#' starts a comment
    features.bin  "VQFT" | version u32 | rows u64 | cols u64 | dtype u8 | payload
    labels.tsv    node_id \\t class   (-1 = unlabeled)
    splits.tsv    node_id \\t train|val|test

Symmetric graphs store each undirected edge once with ``src <= dst``. A
directed graph is marked by the comment line ``# symmetric=0``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .graph import Graph, from_edge_list

FEATURE_MAGIC = b"VQFT"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIQQB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
SPLITS = ("train", "val", "test")


@dataclass
class DatasetBundle:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        self.validate()

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def validate(self) -> None:
        n = self.graph.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError(f"feature matrix shape {self.features.shape} does not match n={n}")
        if not np.all(np.isfinite(self.features)):
            raise InputError("feature matrix has non-finite entries")
        for name in ("labels", "train_mask", "val_mask", "test_mask"):
            if getattr(self, name).shape != (n,):
                raise InputError(f"{name} must have length {n}")
        overlap = (self.train_mask & self.val_mask) | (self.train_mask & self.test_mask) | (self.val_mask & self.test_mask)
        if overlap.any():
            raise InputError(f"splits overlap at node {int(np.flatnonzero(overlap)[0])}")
        if np.any(self.labels[self.train_mask] < 0):
            raise InputError("a train node has no label")

    def split(self, name: str) -> np.ndarray:
        return np.flatnonzero({"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[name])

    def subgraph(self, nodes) -> "DatasetBundle":
        nodes = np.asarray(nodes, dtype=np.int64)
        return DatasetBundle(
            graph=self.graph.subgraph(nodes),
            features=self.features[nodes],
            labels=self.labels[nodes],
            train_mask=self.train_mask[nodes],
            val_mask=self.val_mask[nodes],
            test_mask=self.test_mask[nodes],
        )


def _sample_pairs(rng: np.random.Generator, num: int, p: float) -> np.ndarray:
    """Indices of a Bernoulli(p) subset of ``range(num)``."""
    if num == 0 or p == 0:
        return np.zeros(0, dtype=np.int64)
    count = rng.binomial(num, p)
    return np.sort(rng.choice(num, size=count, replace=False))


def _check_prob(p, name):
    if not 0.0 <= p <= 1.0:
        raise InputError(f"{name} must lie in [0, 1], got {p}")


def gen_er(n: int, p: float, seed: int) -> Graph:
    """Erdos-Renyi graph: every unordered pair independently with probability ``p``."""
    _check_prob(p, "p")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    pick = _sample_pairs(rng, iu.size, p)
    return from_edge_list(np.stack([iu[pick], ju[pick]], axis=1), n, symmetrize=True)


def gen_sbm(n: int, classes: int, p_in: float, p_out: float, feature_dim: int = 16,
            class_sep: float = 1.0, seed: int = 0) -> DatasetBundle:
    """Stochastic block model with Gaussian class-mean features and a stratified 60/20/20 split."""
    if classes < 1 or classes > n:
        raise InputError(f"need 1 <= classes <= n, got classes={classes}, n={n}")
    _check_prob(p_in, "p_in")
    _check_prob(p_out, "p_out")
    rng = np.random.default_rng(seed)
    sizes = np.full(classes, n // classes)
    sizes[: n % classes] += 1
    labels = rng.permutation(np.repeat(np.arange(classes), sizes))
    members = [np.flatnonzero(labels == c) for c in range(classes)]
    pairs = []
    for a in range(classes):
        ma = members[a]
        iu, ju = np.triu_indices(ma.size, 1)
        pick = _sample_pairs(rng, iu.size, p_in)
        pairs.append(np.stack([ma[iu[pick]], ma[ju[pick]]], axis=1))
        for b in range(a + 1, classes):
            mb = members[b]
            pick = _sample_pairs(rng, ma.size * mb.size, p_out)
            pairs.append(np.stack([ma[pick // mb.size], mb[pick % mb.size]], axis=1))
    graph = from_edge_list(np.concatenate(pairs, axis=0), n, symmetrize=True)
    if feature_dim >= classes:
        directions = np.eye(feature_dim)[:classes]
    else:
        directions = rng.normal(size=(classes, feature_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    features = class_sep * directions[labels] + rng.normal(size=(n, feature_dim))
    masks = {name: np.zeros(n, dtype=bool) for name in SPLITS}
    for m in members:
        order = rng.permutation(m)
        n_train, n_val = int(round(0.6 * m.size)), int(round(0.2 * m.size))
        masks["train"][order[:n_train]] = True
        masks["val"][order[n_train:n_train + n_val]] = True
        masks["test"][order[n_train + n_val:]] = True
    return DatasetBundle(graph, features, labels.astype(np.int64), masks["train"], masks["val"], masks["test"])


def holdout_split(bundle: DatasetBundle, frac: float, seed: int):
    """Hide a random ``frac`` of nodes for inductive evaluation.

    Returns ``(full, seen)``. ``full`` is the whole graph reordered so the
    held-out nodes come last; they form its test split and are removed from
    train/val. ``seen`` is the subgraph on the first ``n - n_held`` nodes.
    """
    rng = np.random.default_rng(seed)
    n = bundle.n
    held = np.sort(rng.choice(n, size=int(round(frac * n)), replace=False))
    keep = np.setdiff1d(np.arange(n), held)
    order = np.concatenate([keep, held])
    full = bundle.subgraph(order)
    is_held = np.zeros(n, dtype=bool)
    is_held[keep.size:] = True
    full = DatasetBundle(full.graph, full.features, full.labels, full.train_mask & ~is_held,
                         full.val_mask & ~is_held, is_held)
    seen = full.subgraph(np.arange(keep.size))
    return full, seen


# ---------------------------------------------------------------- file format


def write_features(path, x: np.ndarray) -> None:
    x = np.asarray(x)
    code = {np.dtype("float32"): 0, np.dtype("float64"): 1}.get(x.dtype)
    if code is None:
        raise InputError(f"features dtype {x.dtype} not supported (float32/float64 only)")
    with open(path, "wb") as fh:
        fh.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, x.shape[0], x.shape[1], code))
        fh.write(np.ascontiguousarray(x, dtype=_DTYPES[code]).tobytes())


def read_features(path) -> np.ndarray:
    name = os.path.basename(str(path))
    raw = Path(path).read_bytes()
    if len(raw) < FEATURE_HEADER.size:
        raise InputError(f"{name}: truncated header at byte offset {len(raw)} (need {FEATURE_HEADER.size} bytes)")
    magic, version, rows, cols, code = FEATURE_HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise InputError(f"{name}: bad magic {magic!r} at byte offset 0")
    if version != FEATURE_VERSION:
        raise InputError(f"{name}: unsupported version {version} at byte offset 4")
    if code not in _DTYPES:
        raise InputError(f"{name}: unknown dtype code {code} at byte offset 24")
    dt = _DTYPES[code]
    need = rows * cols * dt.itemsize
    have = len(raw) - FEATURE_HEADER.size
    if have != need:
        raise InputError(f"{name}: payload at byte offset {FEATURE_HEADER.size} has {have} bytes, "
                         f"expected rows*cols*{dt.itemsize}={need}")
    arr = np.frombuffer(raw, dtype=dt, offset=FEATURE_HEADER.size).reshape(rows, cols)
    return arr.astype(dt.newbyteorder("="))


def _read_tsv(path, ncols: int):
    """Yield (byte offset, fields) for every non-comment line."""
    name = os.path.basename(str(path))
    offset = 0
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            start = offset
            offset += len(line)
            text = line.decode("utf-8").strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split("\t")
            if len(fields) != ncols:
                raise InputError(f"{name}: line {lineno} (byte offset {start}) has {len(fields)} fields, expected {ncols}")
            yield name, lineno, start, fields


def _int(name, lineno, start, s):
    try:
        return int(s)
    except ValueError:
        raise InputError(f"{name}: line {lineno} (byte offset {start}): {s!r} is not an integer") from None


def save_dataset(bundle: DatasetBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    e = g.edges[g.edges[:, 0] <= g.edges[:, 1]] if g.symmetric else g.edges
    with open(d / "edges.tsv", "w", newline="\n") as fh:
        fh.write(f"# symmetric={int(g.symmetric)}\n")
        fh.writelines(f"{s}\t{t}\n" for s, t in e.tolist())
    write_features(d / "features.bin", bundle.features)
    with open(d / "labels.tsv", "w", newline="\n") as fh:
        fh.writelines(f"{i}\t{c}\n" for i, c in enumerate(bundle.labels.tolist()))
    with open(d / "splits.tsv", "w", newline="\n") as fh:
        for i in range(bundle.n):
            for s in SPLITS:
                if getattr(bundle, f"{s}_mask")[i]:
                    fh.write(f"{i}\t{s}\n")


def load_dataset(directory) -> DatasetBundle:
    d = Path(directory)
    for f in ("edges.tsv", "features.bin", "labels.tsv", "splits.tsv"):
        if not (d / f).is_file():
            raise InputError(f"{d}: missing {f}")
    features = read_features(d / "features.bin")
    n = features.shape[0]
    if n == 0:
        raise InputError("features.bin: zero rows")
    with open(d / "edges.tsv", "rb") as fh:
        symmetric = not any(line.strip() == b"# symmetric=0" for line in fh)
    pairs = []
    for name, ln, off, (s, t) in _read_tsv(d / "edges.tsv", 2):
        a, b = _int(name, ln, off, s), _int(name, ln, off, t)
        if not (0 <= a < n and 0 <= b < n):
            raise InputError(f"{name}: line {ln} (byte offset {off}): node id outside [0, {n})")
        pairs.append((a, b))
    graph = from_edge_list(np.array(pairs, dtype=np.int64).reshape(-1, 2), n, symmetrize=symmetric)
    labels = np.full(n, -1, dtype=np.int64)
    for name, ln, off, (i, c) in _read_tsv(d / "labels.tsv", 2):
        i = _int(name, ln, off, i)
        if not 0 <= i < n:
            raise InputError(f"{name}: line {ln} (byte offset {off}): node id outside [0, {n})")
        labels[i] = _int(name, ln, off, c)
    masks = {s: np.zeros(n, dtype=bool) for s in SPLITS}
    for name, ln, off, (i, s) in _read_tsv(d / "splits.tsv", 2):
        i = _int(name, ln, off, i)
        if s not in masks or not 0 <= i < n:
            raise InputError(f"{name}: line {ln} (byte offset {off}): bad entry {i!r} {s!r}")
        if any(m[i] for m in masks.values()):
            raise InputError(f"{name}: line {ln} (byte offset {off}): node {i} appears in more than one split")
        masks[s][i] = True
    return DatasetBundle(graph, features, labels, masks["train"], masks["val"], masks["test"])


def gen_er_dataset(n: int, p: float, classes: int = 2, feature_dim: int = 16, seed: int = 0) -> DatasetBundle:
    """ER graph with Gaussian features and uniformly random labels (no class signal).

    Useful for timing and message-count experiments; splits are a random 60/20/20.
    """
    if classes < 1 or classes > n:
        raise InputError(f"need 1 <= classes <= n, got classes={classes}, n={n}")
    graph = gen_er(n, p, seed)
    rng = np.random.default_rng([seed, 1])
    features = rng.normal(size=(n, feature_dim))
    labels = rng.integers(0, classes, size=n).astype(np.int64)
    order = rng.permutation(n)
    n_train, n_val = int(round(0.6 * n)), int(round(0.2 * n))
    masks = [np.zeros(n, dtype=bool) for _ in SPLITS]
    masks[0][order[:n_train]] = True
    masks[1][order[n_train:n_train + n_val]] = True
    masks[2][order[n_train + n_val:]] = True
    return DatasetBundle(graph, features, labels, *masks)
