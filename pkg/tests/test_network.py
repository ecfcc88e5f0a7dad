import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from pdsa.network import (
    ModelConfig,
    StageConfig,
    StageState,
    build_plan,
    classify_head,
    encode_batch,
    encoder_forward,
    fp_interpolate,
    init_params,
    initial_state,
    pdsa_forward,
    rotate_batch,
    sa_baseline_forward,
    segment_forward,
    stack_plans,
    three_nn_weights,
)
from pdsa.tensor import (
    MLPParams,
    Tensor,
    cross_entropy_label_smoothing,
    grad_check,
    named_tensors,
    sum_reduce,
)

TINY = ModelConfig(stages=[StageConfig(4, 0.4, 8), StageConfig(2, 0.8, 8)], channels=8)


def cloud(seed, n=32):
    return np.random.default_rng(seed).uniform(-0.5, 0.5, size=(n, 3))


def first_block(coords, cfg, params):
    batch = stack_plans([build_plan(coords, cfg)])
    state = initial_state(batch, cfg, np.float64)
    return batch, state


def test_flags_off_equals_baseline_bitwise():
    rng = np.random.default_rng(0)
    off = replace(TINY, cdip=False, dw=False, cics=False)
    for trial in range(10):
        coords = cloud(int(rng.integers(1 << 30)))
        params = init_params(off, seed=trial)
        batch, state = first_block(coords, off, params)
        a = pdsa_forward(state, batch.blocks[0], params.stages[0], off)
        b = sa_baseline_forward(state, batch.blocks[0], params.stages[0], off)
        assert a.features.data.tobytes() == b.features.data.tobytes()


def test_single_point_input():
    cfg = replace(TINY, stages=[StageConfig(1, 0.4, 4)])
    params = init_params(cfg)
    states = encoder_forward(np.zeros((1, 3)), cfg, params)
    assert states[0].features.shape == (1, 1, 8)
    assert np.all(np.isfinite(states[0].features.data))


def test_stride_larger_than_cloud_rejected():
    with pytest.raises(ValueError):
        build_plan(np.zeros((3, 3)), replace(TINY, stages=[StageConfig(4, 0.4, 4)]))


def test_baseline_matches_neighborhood_loop():
    cfg = replace(TINY, variant="sa_baseline")
    params = init_params(cfg, seed=3)
    coords = cloud(4)
    plan = build_plan(coords, cfg)
    states = encoder_forward(coords, cfg, params)
    b0, b1 = plan.blocks
    exp0 = oracles.sa_block(coords, None, b0.centers, b0.members, params.stages[0].embed)
    np.testing.assert_allclose(states[0].features.data[0], exp0, rtol=1e-10, atol=1e-12)
    exp1 = oracles.sa_block(b0.coords, states[0].features.data[0], b1.centers, b1.members,
                            params.stages[1].embed)
    np.testing.assert_allclose(states[1].features.data[0], exp1, rtol=1e-10, atol=1e-12)


def test_self_only_neighborhood():
    cfg = replace(TINY, variant="sa_baseline", stages=[StageConfig(1, 1e-3, 1)])
    params = init_params(cfg, seed=5)
    coords = cloud(6, n=10)
    out = encoder_forward(coords, cfg, params)[0].features.data[0]
    exp = np.array([oracles.mlp(np.zeros(3), params.stages[0].embed) for _ in range(10)])
    np.testing.assert_allclose(out, exp, atol=1e-12)


def test_encoder_shapes_follow_config():
    cfg = replace(TINY, stages=[StageConfig(4, 0.4, 8)])
    states = encoder_forward(cloud(7, n=64), cfg, init_params(cfg))
    assert states[0].features.shape == (1, 16, 8)
    cfg3 = ModelConfig(stages=[StageConfig(3, 0.3, 4), StageConfig(2, 0.6, 4, la_blocks=1)], channels=4)
    states = encoder_forward(cloud(8, n=50), cfg3, init_params(cfg3))
    sizes = [s.features.shape[1] for s in states]
    assert sizes == [math.ceil(50 / 3), math.ceil(math.ceil(50 / 3) / 2), math.ceil(math.ceil(50 / 3) / 2)]
    assert [s.features.shape[2] for s in states] == [4, 8, 8]


def test_encoder_is_deterministic_and_translation_invariant():
    params = init_params(TINY, seed=9)
    coords = cloud(10, n=64)
    a = encoder_forward(coords, TINY, params)
    b = encoder_forward(coords.copy(), TINY, params)
    c = encoder_forward(coords + 10.0, TINY, params)
    for x, y, z in zip(a, b, c):
        assert x.features.data.tobytes() == y.features.data.tobytes()
        np.testing.assert_allclose(z.features.data, x.features.data, atol=1e-6)


def test_member_permutation_leaves_pooled_output_unchanged():
    params = init_params(TINY, seed=11)
    coords = cloud(12)
    batch, state = first_block(coords, TINY, params)
    plan = dict(batch.blocks[0])
    base = pdsa_forward(state, plan, params.stages[0], TINY).features.data
    perm = np.random.default_rng(13).permutation(plan["members"].shape[2])
    shuffled = {k: (v[:, :, perm] if k in ("members", "rel", "dist", "w_dw", "w_flat") else v)
                for k, v in plan.items()}
    again = pdsa_forward(state, shuffled, params.stages[0], TINY).features.data
    np.testing.assert_allclose(again, base, atol=1e-10)


def _batches_close(a, b, atol):
    np.testing.assert_allclose(a.coords, b.coords, atol=atol)
    for key in a.d0:
        np.testing.assert_allclose(a.d0[key], b.d0[key], atol=atol)
    for x, y in zip(a.blocks, b.blocks):
        for key in ("centers", "members", "refilled"):
            np.testing.assert_array_equal(x[key], y[key])
        for key in ("rel", "dist", "w_dw", "w_flat", "coords"):
            np.testing.assert_allclose(x[key], y[key], atol=atol)


def test_identity_rotation_keeps_batch():
    batch = stack_plans([build_plan(cloud(s, n=64), TINY) for s in range(3)])
    _batches_close(rotate_batch(batch, np.tile(np.eye(3), (3, 1, 1))), batch, atol=1e-15)


def test_rotated_batch_matches_replanning_rotated_clouds():
    from scipy.spatial.transform import Rotation

    rots = Rotation.random(3, random_state=24).as_matrix()
    clouds = [cloud(25 + s, n=64) for s in range(3)]
    batch = stack_plans([build_plan(c, TINY) for c in clouds])
    direct = stack_plans([build_plan(c @ r.T, TINY) for c, r in zip(clouds, rots)])
    _batches_close(rotate_batch(batch, rots), direct, atol=1e-12)


def _all_leaves(params):
    return [t for _, t in named_tensors(params)]


@pytest.mark.parametrize("full_attention_max", [256, 0])
def test_full_model_gradient(full_attention_max):
    cfg = replace(ModelConfig(), full_attention_max=full_attention_max)
    params = init_params(cfg, seed=14)
    coords = np.random.default_rng(15).uniform(-0.5, 0.5, size=(2, 64, 3))
    batch = stack_plans([build_plan(c, cfg) for c in coords])
    labels = np.array([1, 3])
    fn = lambda: cross_entropy_label_smoothing(classify_head(encode_batch(batch, cfg, params)[-1], params),
                                               labels, 0.1)
    assert grad_check(fn, _all_leaves(params), max_per_tensor=6) < 1e-4


def test_head_permutation_and_single_point():
    params = init_params(TINY, seed=16)
    feats = np.random.default_rng(17).normal(size=(1, 5, 16))
    perm = np.random.default_rng(18).permutation(5)
    a = classify_head(StageState(None, Tensor(feats), None), params).data
    b = classify_head(StageState(None, Tensor(feats[:, perm]), None), params).data
    np.testing.assert_array_equal(a, b)
    one = classify_head(StageState(None, Tensor(feats[:, :1]), None), params).data
    np.testing.assert_allclose(one[0], oracles.mlp(feats[0, 0], params.head), atol=1e-12)


def test_head_gradient():
    params = init_params(TINY, seed=19)
    feats = Tensor(np.random.default_rng(20).normal(size=(3, 5, 16)), requires_grad=True)
    fn = lambda: cross_entropy_label_smoothing(classify_head(StageState(None, feats, None), params), [0, 1, 2])
    assert grad_check(fn, [feats] + _all_leaves(params.head)) < 1e-4


def test_three_nn_weights_limits():
    coarse = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [5.0, 5, 5]])
    idx, w = three_nn_weights(coarse, np.array([[1.0, 0, 0]]))
    assert idx[0, 0] == 1 and w[0, 0] > 1 - 1e-6
    idx, w = three_nn_weights(coarse[:1], np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(w, 1.0)


def test_fp_interpolate_matches_loop():
    rng = np.random.default_rng(21)
    coarse_xyz = rng.normal(size=(1, 6, 3))
    fine_xyz = rng.normal(size=(1, 10, 3))
    coarse_f = rng.normal(size=(1, 6, 4))
    skip = rng.normal(size=(1, 10, 2))
    mlp_p = MLPParams.init([6, 5], rng)
    out = fp_interpolate(StageState(coarse_xyz, Tensor(coarse_f), None), fine_xyz, Tensor(skip), mlp_p).data[0]
    for i in range(10):
        ds = sorted((oracles.dist(fine_xyz[0, i], coarse_xyz[0, j]), j) for j in range(6))[:3]
        ws = [1 / max(d, 1e-8) for d, _ in ds]
        interp = sum(w * coarse_f[0, j] for w, (_, j) in zip(ws, ds)) / sum(ws)
        exp = oracles.mlp(np.concatenate([interp, skip[0, i]]), mlp_p)
        np.testing.assert_allclose(out[i], exp, rtol=1e-10, atol=1e-12)


def test_fp_single_coarse_point_broadcasts():
    f = np.array([[[1.0, 2.0, 3.0]]])
    eye = MLPParams.init([3, 3], np.random.default_rng(0), plain_last=True)
    eye.linears[0].weight.data[...] = np.eye(3)
    eye.linears[0].bias.data[...] = 0
    out = fp_interpolate(StageState(np.zeros((1, 1, 3)), Tensor(f), None), np.ones((1, 4, 3)), None, eye).data
    np.testing.assert_allclose(out[0], np.tile(f[0, 0], (4, 1)))


def test_segmentation_forward_shape():
    params = init_params(TINY, seed=22, decoder=True, n_seg_classes=3)
    batch = stack_plans([build_plan(cloud(23), TINY)])
    assert segment_forward(batch, TINY, params).shape == (1, 32, 3)
