import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vqgnn.errors import InputError, NumericError
from vqgnn.vq import (
    Codebook,
    CodewordView,
    LayerQuantizer,
    ProductVqConfig,
    ema_update,
    find_nearest,
    init_codebook,
    merge_blocks,
    relative_error,
    split_blocks,
    vq_update,
    whiten,
)


def test_single_codeword_from_identical_rows():
    v = np.array([3.0, -1.0])
    cb = init_codebook(np.tile(v, (5, 1)), 1, 0)
    assert np.allclose(cb.codewords, 0.0)
    assert np.allclose(cb.unwhitened(), v)


def test_init_deterministic(rng):
    s = rng.normal(size=(50, 3))
    a, b = init_codebook(s, 4, 9), init_codebook(s, 4, 9)
    assert np.array_equal(a.codewords, b.codewords)


def test_init_codewords_are_sample_rows(rng):
    s = rng.normal(size=(100, 3))
    cb = init_codebook(s, 4, 1)
    for c in cb.unwhitened():
        assert np.min(np.linalg.norm(s - c, axis=1)) < 1e-6


def test_init_rejects_empty():
    with pytest.raises(InputError):
        init_codebook(np.zeros((0, 2)), 2, 0)


def test_whiten_standardized_input_is_unchanged(rng):
    v = rng.normal(size=(200, 3))
    v = (v - v.mean(0)) / v.std(0)
    vbar, _, _ = whiten(v, np.zeros(3), np.ones(3), 0.9)
    assert np.allclose(vbar, v, atol=1e-4)


def test_whiten_constant_column():
    v = np.column_stack([np.full(5, 7.0), np.arange(5.0)])
    vbar, _, _ = whiten(v, np.zeros(2), np.ones(2), 0.9)
    assert np.all(vbar[:, 0] == 0)


def test_whiten_moment_recurrence(rng):
    v = rng.normal(size=(1000, 1))
    v = (v - v.mean()) / v.std() + 1.0
    _, mean, var = whiten(v, np.zeros(1), np.ones(1), 0.9)
    assert np.allclose(mean, 0.1)
    assert np.allclose(var, 1.0)


def test_nearest_simple():
    got = find_nearest(np.array([[0.0, 0], [1, 1]]), np.array([[0.0, 0.1], [0.9, 1.0]]))
    assert got.tolist() == [0, 1]


def test_nearest_tie_goes_to_lowest_index():
    cw = np.array([[1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]])
    assert find_nearest(np.zeros((1, 2)), cw).tolist() == [0]


@given(st.integers(0, 2**31 - 1))
def test_nearest_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    v, cw = rng.normal(size=(64, 3)), rng.normal(size=(8, 3))
    d = ((v[:, None, :] - cw[None]) ** 2).sum(-1)
    assert np.array_equal(find_nearest(v, cw), d.argmin(1))


def test_nearest_stacked_branches(rng):
    v, cw = rng.normal(size=(3, 10, 2)), rng.normal(size=(3, 4, 2))
    got = find_nearest(v, cw)
    assert got.shape == (3, 10)
    for p in range(3):
        assert np.array_equal(got[p], find_nearest(v[p], cw[p]))


def test_ema_step_by_hand():
    cb = Codebook(np.zeros((1, 1)), np.ones(1), np.zeros((1, 1)), np.zeros(1), np.ones(1), gamma=0.9)
    ema_update(cb, np.array([[2.0]]), np.array([0]))
    assert np.allclose(cb.cluster_size, [1.0])
    assert np.allclose(cb.cluster_sum, [[0.2]])
    assert np.allclose(cb.codewords, [[0.2]])


def test_ema_without_memory_is_one_kmeans_step(rng):
    vbar = rng.normal(size=(40, 2))
    cw = vbar[:3].copy()
    assign = find_nearest(vbar, cw)
    assert set(assign.tolist()) == {0, 1, 2}
    cb = Codebook(cw, np.ones(3), cw.copy(), np.zeros(2), np.ones(2), gamma=0.0)
    ema_update(cb, vbar, assign)
    for v in range(3):
        assert np.allclose(cb.codewords[v], vbar[assign == v].mean(0))


def test_ema_fixed_point(rng):
    cw = rng.normal(size=(4, 3))
    cb = Codebook(cw.copy(), np.ones(4), cw.copy(), np.zeros(3), np.ones(3))
    ema_update(cb, cw.copy(), np.arange(4))
    assert np.allclose(cb.codewords, cw)


def test_dead_codes_are_reseeded(rng):
    vbar = rng.normal(size=(20, 2))
    cw = np.vstack([vbar.mean(0), [100.0, 100.0]])
    cb = Codebook(cw, np.array([1.0, 1e-4]), cw * np.array([[1.0], [1e-4]]), np.zeros(2), np.ones(2))
    ema_update(cb, vbar, np.zeros(20, dtype=int))
    assert np.min(np.linalg.norm(vbar - cb.codewords[1], axis=1)) == 0.0


def test_vq_update_rejects_nan():
    cb = init_codebook(np.ones((3, 2)), 1, 0)
    with pytest.raises(NumericError):
        vq_update(np.full((2, 2), np.nan), cb)


@given(st.integers(0, 2**31 - 1))
def test_vq_update_does_not_increase_batch_wcss_much(seed):
    # one EMA step with gamma=0 is a Lloyd step: the batch WCSS cannot go up
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(60, 2))
    cb = init_codebook(v, 4, rng, gamma=0.0, beta=0.0)
    vbar, _, _ = whiten(v, cb.mean, cb.var, 0.0)
    before = np.sum((vbar - cb.codewords[find_nearest(vbar, cb.codewords)]) ** 2)
    vq_update(v, cb)
    after = np.sum((vbar - cb.codewords[find_nearest(vbar, cb.codewords)]) ** 2)
    assert after <= before + 1e-9


def test_relative_error_cases(rng):
    cw = rng.normal(size=(3, 2))
    assign = np.array([0, 2, 1, 1])
    assert relative_error(cw[assign], assign, cw) == 0.0
    assert relative_error(np.array([[1.0, 0], [-1, 0]]), np.array([0, 0]), np.zeros((1, 2))) == 1.0
    x = rng.normal(size=(5, 2))
    assert relative_error(x, np.arange(5), x) == 0.0
    with pytest.raises(InputError):
        relative_error(np.zeros((2, 2)), np.zeros(2, dtype=int), np.zeros((1, 2)))


def test_split_blocks_shapes(rng):
    v = rng.normal(size=(3, 8))
    assert len(split_blocks(v, 8)) == 1 and np.array_equal(split_blocks(v, 8)[0], v)
    assert [b.shape[1] for b in split_blocks(v, 4)] == [4, 4]
    v6 = rng.normal(size=(3, 6))
    blocks = split_blocks(v6, 4)
    assert [b.shape[1] for b in blocks] == [4, 4]
    assert np.all(blocks[1][:, 2:] == 0)
    assert np.array_equal(merge_blocks(blocks, 6), v6)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 5))
def test_split_merge_round_trip(width, extra, f_prod):
    v = np.arange(2 * (width + extra), dtype=float).reshape(2, -1)
    assert np.array_equal(merge_blocks(split_blocks(v, f_prod), v.shape[1]), v)


def test_branch_layout_covers_columns():
    cfg = ProductVqConfig(f_prod=4, k=2, feat_dim=6, grad_dim=5)
    assert cfg.num_branches == 3
    feat = sum(cfg.feature_part(p)[1].stop - cfg.feature_part(p)[1].start
               for p in range(3) if cfg.feature_part(p))
    grad = sum(cfg.grad_part(p)[1].stop - cfg.grad_part(p)[1].start for p in range(3) if cfg.grad_part(p))
    assert (feat, grad) == (6, 5)
    assert cfg.feature_part(2) is None


def test_lossless_view_reconstructs(rng):
    x, m = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    view = CodewordView.lossless(x, m, 2)
    nodes = np.array([4, 0, 2])
    assert np.allclose(view.reconstruct_features(nodes), x[nodes])
    assert np.allclose(view.reconstruct_grads(nodes), m[nodes])


def test_quantizer_update_and_assign(rng):
    n = 30
    cfg = ProductVqConfig(f_prod=2, k=4, feat_dim=3, grad_dim=2)
    x = rng.normal(size=(n, 3))
    q = LayerQuantizer.initialize(cfg, x, None, rng)
    assert q.assignments.shape == (3, n)
    snap = q.view()
    batch = np.arange(10)
    q.update(x[batch], rng.normal(size=(10, 2)), batch)
    assert 0 <= q.last_rel_error < 2
    assert not np.shares_memory(snap.assignments, q.assignments)
    out = q.assign_features(x[:4])
    assert out.shape == (3, 4) and np.all(out[2] == 0)
    q2 = q.copy()
    q2.extend(2)
    assert q2.assignments.shape == (3, n + 2) and q.assignments.shape == (3, n)
