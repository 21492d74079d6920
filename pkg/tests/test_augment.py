"""Fusion, disentangle/reconstruction losses, augmentation and debias weights."""

import math

import numpy as np
import pytest

from defa.augment import (
    DebiasConfig,
    FusionNet,
    cartesian_aug_loss,
    cartesian_labels,
    cartesian_pseudo,
    debias_weight_table,
    disentangle_loss,
    factor_weights,
    pairwise_aug,
    reconstruction_loss,
)
from defa.autodiff import ParamStore, as_tensor
from defa.nn import make_rng
from defa.space import CompositionSpace, FrequencyTable, build_space


def make_fusion(dim=3, layers=1, mix=0.8, seed=0):
    store = ParamStore()
    net = FusionNet(store, dim, layers, 4, mix, make_rng(seed))
    return store, net


def test_fuse_mix_zero_is_exact_sum():
    store, net = make_fusion(mix=0.0)
    rng = make_rng(1)
    va, vo = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.array_equal(net(va, vo).data, va + vo)


def test_fuse_mix_one_is_pure_network():
    store, net = make_fusion(mix=1.0)
    rng = make_rng(2)
    va, vo = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    from defa.autodiff import concat_cols
    from defa.nn import mlp_forward
    expect = mlp_forward(store, "fusion", net.spec,
                         concat_cols(as_tensor(va), as_tensor(vo))).data
    assert np.array_equal(net(va, vo).data, expect)


def test_fuse_hand_example():
    # constant network output [1, 1], residual sum [2, 0], mix 0.8 -> [1.2, 0.8]
    store, net = make_fusion(dim=2, mix=0.8)
    store["fusion/W0"].data[...] = 0.0
    store["fusion/b0"].data[...] = 1.0
    out = net(np.array([[2.0, 0.0]]), np.array([[0.0, 0.0]]))
    assert np.allclose(out.data, [[1.2, 0.8]], atol=1e-15)


def test_fuse_linear_in_mix():
    rng = make_rng(3)
    va, vo = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    outs = {}
    for mix in (0.0, 0.37, 1.0):
        store = ParamStore()
        net = FusionNet(store, 3, 2, 4, mix, make_rng(9))
        outs[mix] = net(va, vo).data
    blended = 0.37 * outs[1.0] + (1 - 0.37) * outs[0.0]
    assert np.allclose(outs[0.37], blended, atol=1e-12)


def test_fuse_shape_mismatch():
    store, net = make_fusion()
    with pytest.raises(ValueError):
        net(np.zeros((2, 3)), np.zeros((3, 3)))


def test_disentangle_orthogonal_and_maximal():
    va = np.array([[1.0, 0.0]])
    vo = np.array([[0.0, 1.0]])
    # cross terms orthogonal: cos(va, t_obj=vo-dir) = 0 and cos(vo, t_attr=va-dir)...
    # signature is (v_attr, v_obj, text_attr_gt, text_obj_gt)
    zero = disentangle_loss(as_tensor(va), as_tensor(vo),
                            as_tensor(vo), as_tensor(va))
    assert zero.item() == pytest.approx(0.0, abs=1e-12)
    # attribute feature parallel to the object text row and vice versa -> 2
    two = disentangle_loss(as_tensor(va), as_tensor(vo),
                           as_tensor(vo), as_tensor(va))
    two = disentangle_loss(as_tensor(va), as_tensor(vo),
                           text_attr_gt=as_tensor(vo), text_obj_gt=as_tensor(va))
    assert two.item() == pytest.approx(2.0, abs=1e-12)


def test_disentangle_hand_value():
    va = np.array([[1.0, 0.0]])
    t_obj_gt = np.array([[1.0, 1.0]]) / math.sqrt(2)
    vo = np.array([[0.0, 1.0]])
    t_attr_gt = np.array([[0.0, -1.0]])
    loss = disentangle_loss(as_tensor(va), as_tensor(vo),
                            as_tensor(t_attr_gt), as_tensor(t_obj_gt))
    assert loss.item() == pytest.approx(1 / math.sqrt(2) - 1.0, abs=1e-6)


def test_reconstruction_loss_extremes():
    v = np.array([[0.2, -0.7, 1.0]])
    assert reconstruction_loss(as_tensor(v), as_tensor(v)).item() == pytest.approx(-1.0)
    assert reconstruction_loss(as_tensor(v), as_tensor(-v)).item() == pytest.approx(1.0)
    u = np.array([[1.0, 0.0]])
    w = np.array([[0.0, 3.0]])
    assert reconstruction_loss(as_tensor(u), as_tensor(w)).item() == pytest.approx(0.0)


def test_pairwise_aug_hand_ce():
    # pseudo equals its own text row, all rows orthonormal, tau=1, 4 candidates
    rows = np.eye(4)
    pseudo = rows[2:3]
    scores, loss = pairwise_aug(as_tensor(pseudo), as_tensor(rows), [2], 1.0)
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 3)), abs=1e-5)
    assert scores.data.shape == (1, 4)


def test_pairwise_aug_equal_scores_log_k():
    # all-orthogonal pseudo: every candidate scores 0 -> ln K
    rows = np.eye(5)[:4]
    pseudo = np.array([[0.0, 0.0, 0.0, 0.0, 1.0]])
    _, loss = pairwise_aug(as_tensor(pseudo), as_tensor(rows), [1], 0.7)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-9)


def test_pairwise_aug_batch_of_one_is_single_ce():
    rng = make_rng(4)
    rows = rng.normal(size=(6, 3))
    pseudo = rng.normal(size=(1, 3))
    from defa.nn import softmax_ce, cosine
    single = softmax_ce(np.array([cosine(pseudo[0], r) for r in rows]), 4, 0.3)
    _, loss = pairwise_aug(as_tensor(pseudo), as_tensor(rows), [4], 0.3)
    assert loss.item() == pytest.approx(single, rel=1e-10)


def test_pairwise_aug_gt_outside_candidates():
    with pytest.raises(IndexError):
        pairwise_aug(as_tensor(np.ones((1, 2))), as_tensor(np.eye(2)), [2], 1.0)


def toy_space(na=2, no=2):
    return CompositionSpace(tuple(f"a{i}" for i in range(na)),
                            tuple(f"o{i}" for i in range(no)),
                            frozenset({(0, 0), (1, 1)}), frozenset({(1, 0)}))


def test_cartesian_labels_enumeration():
    sp = toy_space()
    comp_ids, candidates, gt = cartesian_labels([0, 1], [0, 1], sp)
    # i-major: (a0,o0), (a0,o1), (a1,o0), (a1,o1)
    assert comp_ids.tolist() == [0, 1, 2, 3]
    assert candidates == [(0, 0), (0, 1), (1, 0), (1, 1)]  # includes unseen pairs
    assert gt.tolist() == [0, 1, 2, 3]


def test_cartesian_labels_деduplication():
    sp = toy_space()
    comp_ids, candidates, gt = cartesian_labels([0, 0], [1, 1], sp)
    assert candidates == [(0, 1)]
    assert gt.tolist() == [0, 0, 0, 0]


def test_cartesian_pseudo_batch_one_equals_pairwise():
    store, net = make_fusion(dim=3, mix=0.8, seed=5)
    rng = make_rng(6)
    va, vo = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    assert np.array_equal(cartesian_pseudo(net, va, vo).data, net(va, vo).data)


def test_cartesian_pseudo_diagonal_bitwise_equal():
    store, net = make_fusion(dim=4, layers=2, mix=0.8, seed=7)
    rng = make_rng(8)
    for n in (2, 5, 16):
        va, vo = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        grid = cartesian_pseudo(net, va, vo).data
        pair = net(va, vo).data
        diag = grid[np.arange(n) * n + np.arange(n)]
        assert np.array_equal(diag, pair)


def test_factor_weights_exponent_zero_uniform():
    w = factor_weights([0, 5, 100], 0.0)
    assert np.allclose(w, 1.0, atol=1e-12)


def test_factor_weights_hand_examples():
    w = factor_weights([0, 1, 3], 1.0)
    assert np.allclose(w, [12 / 7, 6 / 7, 3 / 7], atol=1e-9)
    assert np.mean(w) == pytest.approx(1.0, abs=1e-12)
    w2 = factor_weights([0, 3], 0.5)
    assert np.allclose(w2, [4 / 3, 2 / 3], atol=1e-9)


def test_factor_weights_sum_and_monotonicity():
    rng = make_rng(10)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        counts = rng.integers(0, 1000, size=n)
        for strength in (0.0, 0.25, 0.5, 1.0):
            w = factor_weights(counts, strength)
            assert w.sum() == pytest.approx(n, abs=1e-9)
            order = np.argsort(counts)
            sorted_w = w[order]
            assert np.all(np.diff(sorted_w) <= 1e-12)
            if strength > 0:
                sc = np.sort(counts)
                strict = sc[:-1] < sc[1:]
                assert np.all(sorted_w[:-1][strict] > sorted_w[1:][strict])


def freq_table(space, comp_counts):
    grid = np.asarray(comp_counts).reshape(space.n_attrs, space.n_objs)
    return FrequencyTable(grid.sum(axis=1), grid.sum(axis=0), grid.reshape(-1))


def test_debias_table_strength_zero_value():
    sp = toy_space()
    freq = freq_table(sp, [5, 0, 0, 3])
    for mu in (0.0, 0.5, 0.9, 1.0):
        w = debias_weight_table(freq, DebiasConfig(0.0, mu))
        assert np.allclose(w, 2.0 - mu, atol=1e-12)
    assert np.allclose(debias_weight_table(freq, DebiasConfig(0.0, 0.9)), 1.1)


def test_debias_table_blend_extremes():
    sp = toy_space()
    freq = freq_table(sp, [4, 1, 0, 2])
    w_comp = factor_weights(freq.comp_counts, 0.5)
    w_attr = factor_weights(freq.attr_counts, 0.5)
    w_obj = factor_weights(freq.obj_counts, 0.5)
    full_comp = debias_weight_table(freq, DebiasConfig(0.5, 1.0))
    assert np.allclose(full_comp, w_comp)
    full_prim = debias_weight_table(freq, DebiasConfig(0.5, 0.0))
    expect = (w_attr[:, None] + w_obj[None, :]).reshape(-1)
    assert np.allclose(full_prim, expect)


def test_debias_config_validation():
    with pytest.raises(ValueError):
        DebiasConfig(strength=1.5)
    with pytest.raises(ValueError):
        DebiasConfig(comp_blend=-0.1)


def test_cartesian_aug_loss_uniform_weights_reduce_to_mean_ce():
    rng = make_rng(11)
    pseudo = rng.normal(size=(4, 3))
    rows = rng.normal(size=(5, 3))
    gt = np.array([0, 2, 4, 1])
    base = cartesian_aug_loss(as_tensor(pseudo), as_tensor(rows), gt,
                              np.ones(4), 0.5)
    _, plain = pairwise_aug(as_tensor(pseudo), as_tensor(rows), gt, 0.5)
    assert base.item() == pytest.approx(plain.item(), rel=1e-12)


def test_cartesian_aug_loss_weight_scaling():
    # single pseudo feature with weight 2 doubles its CE
    rows = np.eye(3)
    pseudo = np.array([[0.0, 0.0, 1.0]])
    one = cartesian_aug_loss(as_tensor(pseudo), as_tensor(rows), [0],
                             np.array([1.0]), 1.0)
    two = cartesian_aug_loss(as_tensor(pseudo), as_tensor(rows), [0],
                             np.array([2.0]), 1.0)
    assert two.item() == pytest.approx(2 * one.item(), rel=1e-12)


def test_cartesian_aug_loss_symmetric_equal_scores():
    # |B| = 2, all-equal scores over 4 candidates, uniform weight w -> w * ln 4
    rows = np.eye(5)[:4]
    pseudo = np.tile(np.array([[0, 0, 0, 0, 1.0]]), (4, 1))
    w = 1.3
    loss = cartesian_aug_loss(as_tensor(pseudo), as_tensor(rows),
                              [0, 1, 2, 3], np.full(4, w), 2.0)
    assert loss.item() == pytest.approx(w * math.log(4), abs=1e-9)
