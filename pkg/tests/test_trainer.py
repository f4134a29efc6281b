import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vqgnn.data import DatasetBundle, gen_sbm
from vqgnn.errors import ConfigError, InputError, NumericError
from vqgnn.graph import from_edge_list
from vqgnn.network import full_model_forward
from vqgnn.trainer import (
    GraphOps,
    ModelConfig,
    epoch_batches,
    infer,
    random_walks,
    rms_step,
    sample_minibatch,
    softmax_xent,
    train,
    train_full,
)


@pytest.fixture(scope="module")
def small():
    return gen_sbm(60, 3, 0.3, 0.02, feature_dim=4, class_sep=2.0, seed=3)


def tiny_cfg(**kw):
    base = dict(layers=2, hidden=8, codebook_size=8, f_prod=4, batch_size=20, epochs=2, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def test_uniform_logits_loss():
    loss, _ = softmax_xent(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert math.isclose(loss, math.log(4))


def test_confident_logits_loss_vanishes():
    logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    loss, grad = softmax_xent(logits, np.array([0, 1]))
    assert loss < 1e-12 and np.all(np.isfinite(grad))


def test_xent_gradient_finite_differences(rng):
    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    _, grad = softmax_xent(logits, labels)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        num = (softmax_xent(up, labels)[0] - softmax_xent(dn, labels)[0]) / (2 * h)
        assert abs(num - grad[idx]) < 1e-6


def test_xent_rejects_bad_labels():
    with pytest.raises(InputError):
        softmax_xent(np.zeros((2, 2)), np.array([0, 2]))


def test_rms_zero_grad_is_noop():
    p = np.array([1.0, -2.0])
    rms_step(p, np.zeros(2), np.zeros(2), 0.1, 0.9)
    assert p.tolist() == [1.0, -2.0]


def test_rms_without_memory_is_sign_step():
    p, acc = np.array([0.0]), np.zeros(1)
    rms_step(p, np.array([-3.0]), acc, 0.01, 0.0)
    assert math.isclose(p[0], 0.01, rel_tol=1e-6)


def test_rms_constant_grad_step_tends_to_lr():
    p, acc = np.zeros(1), np.zeros(1)
    prev = 0.0
    for _ in range(300):
        rms_step(p, np.array([0.5]), acc, 0.01, 0.9)
        step, prev = prev - p[0], p[0]
    assert math.isclose(step, 0.01, rel_tol=1e-4)


def test_rms_rejects_nan():
    with pytest.raises(NumericError):
        rms_step(np.zeros(1), np.array([np.nan]), np.zeros(1), 0.1, 0.9)


@pytest.mark.parametrize("strategy", ["nodes", "edges", "random-walk"])
def test_full_batch_is_every_node(strategy, small):
    got = sample_minibatch(strategy, small.n, small.graph, np.random.default_rng(0))
    assert np.array_equal(got, np.arange(small.n))


@pytest.mark.parametrize("strategy", ["nodes", "edges", "random-walk"])
@given(seed=st.integers(0, 2**31 - 1), b=st.integers(1, 60))
def test_batches_are_distinct_sorted_and_sized(strategy, seed, b):
    g = gen_sbm(60, 3, 0.3, 0.02, feature_dim=4, seed=3).graph
    got = sample_minibatch(strategy, b, g, np.random.default_rng(seed))
    assert got.size == b and np.all(np.diff(got) > 0) and got.min() >= 0 and got.max() < 60


def test_node_sampler_is_uniform():
    g = from_edge_list([(i, i + 1) for i in range(9)], 10)
    rng = np.random.default_rng(0)
    draws, b = 10_000, 3
    counts = np.zeros(10)
    for _ in range(draws):
        counts[sample_minibatch("nodes", b, g, rng)] += 1
    p = b / 10
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma)


def test_walks_stay_in_their_component():
    cliques = [(i, j) for i in range(4) for j in range(i + 1, 4)] + \
              [(i, j) for i in range(4, 8) for j in range(i + 1, 8)]
    g = from_edge_list(cliques, 8)
    walks = random_walks(g, np.arange(8), 20, np.random.default_rng(0))
    assert walks.shape == (8, 21)
    assert np.all((walks < 4) == (walks[:, :1] < 4))


def test_walks_on_edgeless_graph_stay_put():
    g = from_edge_list(np.zeros((0, 2), dtype=int), 3)
    assert np.array_equal(random_walks(g, np.array([0, 2]), 2, np.random.default_rng(0)), [[0, 0, 0], [2, 2, 2]])


def test_sampler_errors(small):
    with pytest.raises(InputError):
        sample_minibatch("nodes", small.n + 1, small.graph, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_minibatch("cluster", 3, small.graph, np.random.default_rng(0))


def test_epoch_covers_every_node_once(small):
    batches = epoch_batches("nodes", 25, small.graph, np.random.default_rng(0))
    assert len(batches) == 3
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(small.n))


def test_config_rejects_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"layers": "3"})
    with pytest.raises(ConfigError):
        ModelConfig(conv="cheb").validate()
    cfg = ModelConfig.from_dict({"lr": 1, "sampler": "edges"})
    assert cfg.lr == 1.0 and ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_one_full_batch_epoch_matches_full_graph_trainer(small):
    cfg = tiny_cfg(batch_size=small.n, codebook_size=small.n, epochs=1)
    state, _ = train(cfg, small)
    model, _ = train_full(cfg, small)
    for a, b in zip(state.model.params(), model.params()):
        assert np.max(np.abs(a - b)) < 1e-5


def test_zero_lr_freezes_weights_but_codebooks_move(small):
    cfg = tiny_cfg(lr=0.0)
    state0, _ = train(tiny_cfg(lr=0.0, epochs=0), small)
    state, _ = train(cfg, small)
    assert all(np.array_equal(a, b) for a, b in zip(state0.model.params(), state.model.params()))
    assert any(not np.array_equal(q0.book.codewords, q.book.codewords)
               for q0, q in zip(state0.quantizers, state.quantizers))


def test_metrics_are_reported(small):
    _, hist = train(tiny_cfg(epochs=3), small)
    assert [m.epoch for m in hist] == [1, 2, 3]
    m = hist[-1]
    assert len(m.eps_per_layer) == 2 and all(0 <= e < 2 for e in m.eps_per_layer)
    assert m.messages_intra > 0 and m.messages_codeword > 0
    assert all(b.wall_secs > a.wall_secs for a, b in zip(hist, hist[1:]))
    assert "wall_secs" not in m.record()


def test_training_is_deterministic(small):
    a = [m.record() for m in train(tiny_cfg(), small)[1]]
    b = [m.record() for m in train(tiny_cfg(), small)[1]]
    assert a == b


@pytest.mark.parametrize("conv", ["sage", "gin", "gat"])
def test_other_convolutions_train(conv, small):
    _, hist = train(tiny_cfg(conv=conv, heads=2 if conv == "gat" else 1, epochs=3), small)
    assert all(np.isfinite(m.train_loss) for m in hist)


def test_evaluation_reuses_inference_path(small):
    state, hist = train(tiny_cfg(), small)
    logits = infer(state, small)
    test = small.test_mask
    acc = float(np.mean(logits[test].argmax(1) == small.labels[test]))
    assert acc == hist[-1].test_acc
    sub = np.array([40, 1, 5])
    assert np.array_equal(infer(state, small, nodes=sub), infer(state, small, nodes=np.sort(sub))[[2, 0, 1]])


def test_full_batch_inference_equals_exact_forward(small):
    state, _ = train(tiny_cfg(batch_norm=False), small)
    logits = infer(state, small, batch_size=small.n)
    ops = GraphOps.build(small.graph, state.model.spec, np.float64)
    ref, _ = full_model_forward(state.model, small.features, ops.convs, training=False)
    assert np.max(np.abs(logits - ref)) < 1e-5


def test_inductive_copy_of_a_node_gets_its_prediction(small):
    state, _ = train(tiny_cfg(), small)
    t = 7
    nbrs = small.graph.neighbors(t)
    n = small.n
    edges = np.concatenate([small.graph.edges, np.stack([np.full(nbrs.size, n), nbrs], 1)])
    g = from_edge_list(edges, n + 1)
    ext = DatasetBundle(g, np.vstack([small.features, small.features[t]]), np.append(small.labels, -1),
                        np.append(small.train_mask, False), np.append(small.val_mask, False),
                        np.append(small.test_mask, False))
    logits = infer(state, ext, inductive=True, batch_size=1)
    assert np.allclose(logits[n], logits[t], atol=1e-10)
    with pytest.raises(InputError):
        infer(state, ext)


def test_train_rejects_unlabeled_data(small):
    bad = DatasetBundle(small.graph, small.features, np.full(small.n, -1), np.zeros(small.n, bool),
                        np.zeros(small.n, bool), np.zeros(small.n, bool))
    with pytest.raises(InputError):
        train(tiny_cfg(), bad)
