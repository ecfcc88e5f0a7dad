import math

import numpy as np
import pytest

import oracles
from pdsa.cics import (
    KeySelection,
    SatParams,
    apply_cics,
    sat_core,
    sat_full,
    sat_keypoint,
    select_key_points,
    select_keys,
)
from pdsa.geom import Neighborhood, ball_query_group
from pdsa.tensor import Tensor, grad_check, mul, named_tensors, reshape, sum_reduce


def params(seed, d=24, c=16):
    return SatParams.init(d, c, np.random.default_rng(seed))


def test_single_row_attends_to_itself():
    p = params(0)
    d = np.random.default_rng(1).normal(size=(1, 24))
    v = d @ p.v.weight.data.T + p.v.bias.data
    exp = v @ p.out.weight.data.T + p.out.bias.data
    np.testing.assert_allclose(sat_full(d, p).data, exp, atol=1e-12)


def test_identical_rows_give_identical_outputs():
    d = np.tile(np.random.default_rng(2).normal(size=24), (5, 1))
    out = sat_full(d, params(1)).data
    np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-14)


def test_full_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 17))
        p = params(int(rng.integers(1 << 30)))
        d = rng.normal(size=(n, 24))
        np.testing.assert_allclose(sat_full(d, p).data, oracles.attention(d, p), rtol=1e-10, atol=1e-12)


def test_attention_rows_sum_to_one_and_equivariance():
    rng = np.random.default_rng(4)
    p = params(5)
    d = rng.normal(size=(10, 24))
    _, attn = sat_core(Tensor(d[None]), p, return_attn=True)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)
    perm = rng.permutation(10)
    np.testing.assert_allclose(sat_full(d[perm], p).data, sat_full(d, p).data[perm], atol=1e-12)


def test_attention_gradient():
    rng = np.random.default_rng(6)
    p = params(7, d=6, c=4)
    d = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    probe = Tensor(rng.normal(size=(5, 4)))
    fn = lambda: sum_reduce(mul(sat_full(d, p), probe))
    assert grad_check(fn, [d] + [t for _, t in named_tensors(p)]) < 1e-4


def _nbh(center, members):
    m = np.asarray(members)
    return Neighborhood(center, m, np.zeros((len(m), 3)), np.zeros(len(m)))


def test_rho_one_keeps_everything():
    nbhs = [_nbh(i, [i, (i + 1) % 4]) for i in range(4)]
    w = [np.random.default_rng(i).uniform(size=(2, 3)) for i in range(4)]
    sel = select_key_points(w, nbhs, 1.0)
    assert sel.keys.tolist() == [0, 1, 2, 3]
    assert sel.assign.tolist() == [0, 1, 2, 3]


def test_two_center_hand_case():
    # disjoint neighborhoods; center 3 receives 0.9 from its own group, center 0 only 0.2
    nbhs = [_nbh(0, [0, 1]), _nbh(3, [3, 2])]
    w = [np.array([[0.2, 0.2], [0.8, 0.8]]), np.array([[0.9, 0.9], [0.1, 0.1]])]
    coords = np.array([[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [1.1, 0, 0]])
    sel = select_key_points(w, nbhs, 0.5, coords)
    assert sel.keys.tolist() == [1]
    assert sel.assign.tolist() == [1, 1]


def test_uniform_weights_score_by_membership_count():
    rng = np.random.default_rng(8)
    pts = rng.uniform(size=(40, 3))
    centers = list(range(0, 40, 2))
    nbhs = ball_query_group(pts, centers, 0.35, 6)
    w = [np.full((6, 4), 1 / 6) for _ in nbhs]
    sel = select_key_points(w, nbhs, 0.3, pts)
    counts = np.zeros(40)
    for nb in nbhs:
        for j in nb.members:
            counts[j] += 1 / 6
    np.testing.assert_allclose(sel.scores, counts[centers], atol=1e-12)
    assert len(sel.keys) == math.ceil(0.3 * len(centers))
    order = sorted(range(len(centers)), key=lambda i: (-counts[centers[i]], i))
    assert sel.keys.tolist() == sorted(order[:len(sel.keys)])


def test_assignment_rules():
    # center 1 holds key 0 in its neighborhood; center 2 holds none and falls back to the nearest key
    scores = np.array([5.0, 1.0, 0.5, 4.0])
    center_pts = np.array([10, 11, 12, 13])
    members = np.array([[10, 11], [11, 10], [12, 12], [13, 12]])
    coords = np.array([[0.0, 0, 0], [0.1, 0, 0], [2.9, 0, 0], [3.0, 0, 0]])
    sel = select_keys(scores, center_pts, members, coords, 0.5)
    assert sel.keys.tolist() == [0, 3]
    assert sel.assign.tolist() == [0, 0, 3, 3]
    assert set(sel.assign.tolist()) <= set(sel.keys.tolist())


def test_select_keys_rejects_bad_rho():
    with pytest.raises(ValueError):
        select_keys(np.ones(3), np.arange(3), np.zeros((3, 1), int), np.zeros((3, 3)), 0.0)


def test_keypoint_reduces_to_full_at_rho_one():
    rng = np.random.default_rng(9)
    p = params(10)
    d = rng.normal(size=(12, 24))
    sel = KeySelection(np.arange(12), np.arange(12), 1.0)
    np.testing.assert_allclose(sat_keypoint(d, sel, p).data, sat_full(d, p).data, atol=1e-10)


def test_single_key_broadcasts():
    p = params(11)
    d = np.random.default_rng(12).normal(size=(6, 24))
    sel = KeySelection(np.array([2]), np.full(6, 2), 1 / 6)
    out = sat_keypoint(d, sel, p).data
    np.testing.assert_allclose(out, np.tile(out[0], (6, 1)), atol=0)


def test_keypoint_matches_loop_over_keys():
    rng = np.random.default_rng(13)
    p = params(14)
    d = rng.normal(size=(10, 24))
    keys = np.array([1, 4, 6, 9])
    assign = keys[rng.integers(0, 4, size=10)]
    assign[keys] = keys
    out = sat_keypoint(d, KeySelection(keys, assign, 0.4), p).data
    ref = oracles.attention(d[keys], p)
    for i in range(10):
        np.testing.assert_allclose(out[i], ref[list(keys).index(assign[i])], rtol=1e-10, atol=1e-12)


def test_apply_cics():
    rng = np.random.default_rng(15)
    f, c1, c2 = rng.normal(size=(3, 5, 4))
    np.testing.assert_array_equal(apply_cics(f, np.zeros((5, 4))).data, f)
    np.testing.assert_allclose(apply_cics(apply_cics(f, c1), c2).data, f + c1 + c2, atol=1e-15)
    with pytest.raises(ValueError):
        apply_cics(f, c1[:3])
