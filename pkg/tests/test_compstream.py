from __future__ import annotations

import numpy as np
import pytest

from tristream import compstream as cs
from tristream.autodiff import ParameterStore, Tensor, grad
from tristream.structdata import AtomicStructure, compress_composition


def small_cfg():
    return cs.CompStreamConfig(d_comp=16, n_layers=2, n_heads=2, dropout=0.0)


def make_params(cfg, seed=0):
    store = ParameterStore(seed=seed)
    cs.init_comp_params(store, np.random.default_rng(seed), cfg)
    return store


def expanded_attention_oracle(logits_row: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Brute-force softmax over the expanded multiset, aggregated by type."""
    expanded = np.repeat(logits_row, counts)
    types = np.repeat(np.arange(len(counts)), counts)
    w = np.exp(expanded - expanded.max())
    w /= w.sum()
    return np.array([w[types == t].sum() for t in range(len(counts))])


def test_count_weighted_attention_trivial():
    w = cs.count_weighted_attention(np.zeros((2, 2)), np.array([2, 1]))
    np.testing.assert_allclose(w, [[2 / 3, 1 / 3], [2 / 3, 1 / 3]], rtol=1e-12)
    w1 = cs.count_weighted_attention(np.zeros((1, 1)), np.array([7]))
    np.testing.assert_allclose(w1, [[1.0]])
    with pytest.raises(ValueError):
        cs.count_weighted_attention(np.zeros((2, 2)), np.array([0, 1]))


def test_count_weighted_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 4)) * 3
    w = cs.count_weighted_attention(logits, np.array([3, 1, 2, 5]))
    np.testing.assert_allclose(w.sum(axis=1), np.ones(4), atol=1e-12)


def test_expanded_multiset_equivalence_100_instances():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 6))
        counts = rng.integers(1, 7, size=t)
        logits = rng.normal(size=(t, t)) * 2.0
        w = cs.count_weighted_attention(logits, counts)
        for row in range(t):
            oracle = expanded_attention_oracle(logits[row], counts)
            worst = max(worst, np.max(np.abs(w[row] - oracle)))
    assert worst <= 1e-10


def test_layer1_maps_match_expansion_per_head():
    cfg = small_cfg()
    store = make_params(cfg)
    rng = np.random.default_rng(5)
    for _ in range(20):
        t = int(rng.integers(1, 6))
        numbers = np.sort(rng.choice(np.arange(1, 101), size=t, replace=False))
        counts = rng.integers(1, 7, size=t)
        p = store.tensors()
        maps = cs.layer1_attention_maps(numbers, counts, p, cfg)
        raw = cs.raw_layer1_logits(numbers, counts, p, cfg)
        for h in range(cfg.n_heads):
            for row in range(t):
                oracle = expanded_attention_oracle(raw[h, row], counts)
                np.testing.assert_allclose(maps[h, row], oracle, atol=1e-10)


def test_forward_permutation_bitwise():
    cfg = small_cfg()
    store = make_params(cfg)
    s1 = AtomicStructure(np.array([8, 1, 1]), np.zeros((3, 3)))
    s2 = AtomicStructure(np.array([1, 8, 1]), np.zeros((3, 3)))
    c1, c2 = compress_composition(s1), compress_composition(s2)
    p = store.tensors()
    t1, p1 = cs.comp_forward(c1.numbers, c1.counts, p, cfg)
    t2, p2 = cs.comp_forward(c2.numbers, c2.counts, p, cfg)
    assert np.array_equal(t1.data, t2.data)
    assert np.array_equal(p1.data, p2.data)


def test_absolute_counts_change_output():
    cfg = small_cfg()
    store = make_params(cfg)
    p = store.tensors()
    _, h2o = cs.comp_forward(np.array([1, 8]), np.array([2, 1]), p, cfg)
    _, h4o2 = cs.comp_forward(np.array([1, 8]), np.array([4, 2]), p, cfg)
    assert np.max(np.abs(h2o.data - h4o2.data)) > 1e-6


def test_count_pathway_ablation():
    """Doubling counts reaches the output only through the log-count terms."""
    cfg = small_cfg()
    store = make_params(cfg)
    p = store.tensors()
    _, a = cs.comp_forward(np.array([26]), np.array([4]), p, cfg, count_pathway=False)
    _, b = cs.comp_forward(np.array([26]), np.array([8]), p, cfg, count_pathway=False)
    assert np.array_equal(a.data, b.data)
    _, a2 = cs.comp_forward(np.array([26]), np.array([4]), p, cfg, count_pathway=True)
    _, b2 = cs.comp_forward(np.array([26]), np.array([8]), p, cfg, count_pathway=True)
    assert np.max(np.abs(a2.data - b2.data)) > 1e-8


def test_no_position_dependence_is_structural():
    """comp_forward's signature admits no positions at all; document via usage."""
    cfg = small_cfg()
    store = make_params(cfg)
    p = store.tensors()
    tokens, pooled = cs.comp_forward(np.array([1, 8]), np.array([2, 1]), p, cfg)
    assert tokens.shape == (2, cfg.d_comp)
    assert pooled.shape == (cfg.d_comp,)


def test_pooled_is_count_weighted_mean():
    cfg = small_cfg()
    store = make_params(cfg)
    p = store.tensors()
    tokens, pooled = cs.comp_forward(np.array([1, 8]), np.array([3, 1]), p, cfg)
    expected = (3 * tokens.data[0] + 1 * tokens.data[1]) / 4
    np.testing.assert_allclose(pooled.data, expected, rtol=1e-12)


def test_unknown_element_rejected():
    cfg = small_cfg()
    store = make_params(cfg)
    with pytest.raises(ValueError):
        cs.comp_forward(np.array([101]), np.array([1]), store.tensors(), cfg)


def test_mask_token_row_exists_and_is_distinct():
    cfg = small_cfg()
    store = make_params(cfg)
    assert store["comp.embed"].shape == (cfg.vocab + 1, cfg.d_comp)
    p = store.tensors()
    _, with_mask = cs.comp_forward(np.array([cs.MASK_TOKEN, 8]), np.array([2, 1]), p, cfg)
    _, without = cs.comp_forward(np.array([1, 8]), np.array([2, 1]), p, cfg)
    assert np.max(np.abs(with_mask.data - without.data)) > 1e-8


def test_embedding_gradient_matches_fd():
    cfg = small_cfg()
    store = make_params(cfg)
    numbers, counts = np.array([1, 8]), np.array([2, 1])
    probe = np.random.default_rng(3).normal(size=cfg.d_comp)

    def scalar_from(store_):
        p = store_.tensors()
        _, pooled = cs.comp_forward(numbers, counts, p, cfg)
        return (pooled * Tensor(probe)).sum(), p

    out, p = scalar_from(store)
    g = grad(out, p["comp.embed"]).data

    emb = store["comp.embed"]
    h = 1e-5
    for (row, col) in [(1, 0), (1, 3), (8, 2), (8, 15), (0, 0), (50, 1)]:
        orig = emb[row, col]
        emb[row, col] = orig + h
        fp = scalar_from(store)[0].item()
        emb[row, col] = orig - h
        fm = scalar_from(store)[0].item()
        emb[row, col] = orig
        fd = (fp - fm) / (2 * h)
        assert abs(g[row, col] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_dropout_train_vs_eval():
    cfg = cs.CompStreamConfig(d_comp=16, n_layers=1, n_heads=2, dropout=0.5)
    store = make_params(cfg)
    p = store.tensors()
    rng = np.random.default_rng(0)
    _, a = cs.comp_forward(np.array([1]), np.array([1]), p, cfg, train=True, rng=rng)
    _, b = cs.comp_forward(np.array([1]), np.array([1]), p, cfg, train=False)
    assert np.max(np.abs(a.data - b.data)) > 1e-9
