import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fewshape.backbone import Backbone
from fewshape.criterion import loss_fs
from fewshape.numerics.gradcheck import check_grads
from fewshape.numerics.optim import AdamW
from fewshape.numerics.tensor import Tensor, no_grad
from fewshape.numerics import tensor as T
from fewshape.sampler import (ConstrainedPool, FeatureSampler, ScoreNet, constrained_pool, foreground_masks,
                              make_score_targets, score_features, select_adaptive, select_topk, topk_indices)


# ------------------------------------------------------------------ targets

def test_target_peak_at_centre_cell():
    maps = make_score_targets([np.array([64.0, 64.0, 40.0, 12.0, 0.3])], (128, 128))
    assert [m.shape for m in maps] == [(16, 16), (8, 8), (4, 4)]
    for m, d in zip(maps, (8, 16, 32)):
        assert m[64 // d, 64 // d] == 1.0
        assert m.max() == 1.0


def test_empty_scene_targets_are_zero():
    for m in make_score_targets([], (128, 128)):
        assert not m.any()


def test_target_at_long_side_contour():
    # centre cell (8, 8) at 1/8 has its centre on (68, 68); the cell above sits on the contour y = 60
    m = make_score_targets([np.array([68.0, 68.0, 60.0, 16.0, 0.0])], (128, 128))[0]
    assert m[7, 8] == pytest.approx(math.exp(-4.5), rel=1e-12)
    assert m[7, 8] == pytest.approx(0.011, abs=5e-4)


def test_targets_combine_by_max():
    a, b = np.array([30.0, 30.0, 30, 10, 0]), np.array([90.0, 90.0, 30, 10, 0.5])
    both = make_score_targets([a, b], (128, 128))
    for m, ma, mb in zip(both, make_score_targets([a], (128, 128)), make_score_targets([b], (128, 128))):
        np.testing.assert_array_equal(m, np.maximum(ma, mb))


target_boxes = st.tuples(st.floats(8, 120), st.floats(8, 120), st.floats(8, 60), st.floats(4, 20),
                         st.floats(-1.57, 1.57))


@settings(max_examples=100, deadline=None)
@given(target_boxes)
def test_target_centre_dominates_and_decays(box):
    box = np.array(box)
    for m, d in zip(make_score_targets([box], (128, 128)), (8, 16, 32)):
        assert 0.0 <= m.min() and m.max() <= 1.0
        ci, cj = int(box[1] // d), int(box[0] // d)
        assert m[ci, cj] == 1.0 and np.all(m <= m[ci, cj])
        # decay along the grid rows and columns leaving the centre
        assert np.all(np.diff(m[ci, cj:]) <= 1e-15) and np.all(np.diff(m[ci, :cj + 1]) >= -1e-15)
        assert np.all(np.diff(m[ci:, cj]) <= 1e-15) and np.all(np.diff(m[:ci + 1, cj]) >= -1e-15)


def test_foreground_threshold():
    masks = foreground_masks([np.array([[0.05, 0.1, 0.11]])])
    np.testing.assert_array_equal(masks[0], [[False, False, True]])


# ------------------------------------------------------------------ pooling

def test_zero_offsets_are_average_pooling_bitwise():
    rng = np.random.default_rng(0)
    pool = ConstrainedPool(rng, 5)
    f = rng.normal(size=(2, 8, 6, 5))
    out = constrained_pool(Tensor(f), pool).data
    ref = f.reshape(2, 4, 2, 3, 2, 5).mean(axis=4).mean(axis=2)
    assert np.array_equal(out, ref)
    np.testing.assert_allclose(out, f.reshape(2, 4, 2, 3, 2, 5).mean(axis=(2, 4)), rtol=0, atol=1e-15)


def test_lambda_is_half_on_zero_cell():
    rng = np.random.default_rng(1)
    pool = ConstrainedPool(rng, 3)
    pool.offset.weight.data = rng.normal(size=pool.offset.weight.shape)
    pool.offset.bias.data = np.array([0.2, -0.4])
    d = pool.offsets(Tensor(np.zeros((1, 4, 6, 3)))).data
    # raw offset is the bias alone; effective = 0.5 * raw * (W, H)
    np.testing.assert_allclose(d[0, 2, 3], 0.5 * np.array([0.2, -0.4]) * np.array([6, 4]))


def test_pool_rejects_odd_sides():
    pool = ConstrainedPool(np.random.default_rng(0), 2)
    with pytest.raises(ValueError):
        pool(Tensor(np.zeros((1, 5, 4, 2))))


@pytest.mark.parametrize("seed", range(4))
def test_pool_offset_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pool = ConstrainedPool(rng, 3)
    # small nonzero weights move samples off the integer lattice
    pool.offset.weight.data = rng.normal(0, 0.02, size=pool.offset.weight.shape)
    pool.offset.bias.data = rng.normal(0, 0.02, size=2)
    f = Tensor(rng.normal(size=(1, 6, 6, 3)), requires_grad=True)
    probe = rng.normal(size=(1, 3, 3, 3))
    err = check_grads(lambda: T.reduce_sum(pool(f) * probe), [pool.offset.weight, pool.offset.bias, f], step=1e-6)
    assert err < 1e-4


# ------------------------------------------------------------------ scoring

def test_zero_final_layer_gives_half():
    net = ScoreNet(np.random.default_rng(0), 4, zero_last=True)
    s = score_features([Tensor(np.random.default_rng(1).normal(size=(2, 4, 4, 4)))], net)[0]
    assert s.shape == (2, 4, 4)
    np.testing.assert_array_equal(s.data, 0.5)


def test_scores_strictly_inside_unit_interval():
    net = ScoreNet(np.random.default_rng(0), 4)
    s = net(Tensor(np.random.default_rng(1).normal(size=(1, 8, 8, 4)) * 3)).data
    assert np.all((s > 0) & (s < 1))


def test_score_only_overfit_reaches_target():
    from fewshape.pipeline.synth import SceneConfig, generate_scene
    rng = np.random.default_rng(0)
    scene = generate_scene(0, SceneConfig(), "train", 0)
    targets = make_score_targets(scene.boxes, (128, 128))
    bb, fs = Backbone(rng, 32), FeatureSampler(rng, 32)
    params = {**bb.named_parameters("b/"), **fs.named_parameters("s/")}
    opt = AdamW(params, lr=3e-3, weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        _, scores = fs(bb(scene.image))
        loss_fs(scores, [t[None] for t in targets]).backward()
        opt.step()
    with no_grad():
        _, scores = fs(bb(scene.image))
    gap = np.mean(np.concatenate([np.abs(s.data[0] - t).ravel() for s, t in zip(scores, targets)]))
    assert gap < 0.05


# ---------------------------------------------------------------- selection

def test_topk_example():
    assert set(topk_indices(np.array([0.9, 0.1, 0.5, 0.7]), 2)) == {0, 3}


def test_topk_ties_row_major():
    np.testing.assert_array_equal(topk_indices(np.full((3, 3), 0.4), 3), [0, 1, 2])


def _pooled(shapes, c=2, rng=None):
    rng = rng or np.random.default_rng(0)
    return [Tensor(rng.normal(size=(1, h, w, c))) for h, w in shapes]


def test_table_budgets_at_1024_give_448_tokens():
    shapes = [(128, 128), (64, 64), (32, 32)]
    rng = np.random.default_rng(0)
    scores = [rng.uniform(size=(1, h, w)) for h, w in shapes]
    s = select_topk(scores, _pooled(shapes, rng=rng), (256, 128, 64))
    assert len(s) == 448
    assert [int(np.sum(s.scale == k)) for k in range(3)] == [256, 128, 64]


def test_topk_budget_too_large_names_scale():
    with pytest.raises(ValueError, match="1/16"):
        select_topk([np.ones((1, 4, 4)), np.ones((1, 2, 2))], _pooled([(4, 4), (2, 2)]), (4, 5))


def test_topk_gathers_matching_features():
    rng = np.random.default_rng(3)
    pooled = _pooled([(4, 4), (2, 2)], c=3, rng=rng)
    scores = [rng.uniform(size=(1, 4, 4)), rng.uniform(size=(1, 2, 2))]
    s = select_topk(scores, pooled, (5, 2))
    for n in range(len(s)):
        k, i, j = s.scale[0, n], s.rows[0, n], s.cols[0, n]
        np.testing.assert_array_equal(s.features.data[0, n], pooled[k].data[0, i, j])
        assert s.scores[0, n] == scores[k][0, i, j]


score_maps = st.lists(
    st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=3
).flatmap(lambda shapes: st.tuples(
    st.just(shapes),
    st.tuples(*[arrays(np.float64, (1, h, w), elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
                for h, w in shapes]),
    st.tuples(*[st.integers(0, h * w) for h, w in shapes]),
))


@settings(max_examples=200, deadline=None)
@given(score_maps)
def test_sampled_set_invariants(case):
    shapes, scores, budgets = case
    if sum(budgets) == 0:
        return
    s = select_topk(list(scores), _pooled(shapes), budgets)
    assert len(s) == sum(budgets)
    triples = set(zip(s.scale[0], s.rows[0], s.cols[0]))
    assert len(triples) == len(s)
    for k, (h, w) in enumerate(shapes):
        sel = np.zeros((h, w), dtype=bool)
        mine = s.scale[0] == k
        sel[s.rows[0, mine], s.cols[0, mine]] = True
        if sel.any() and (~sel).any():
            assert scores[k][0][sel].min() >= scores[k][0][~sel].max()
        # score-descending order within a scale
        assert np.all(np.diff(s.scores[0, mine]) <= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 15))
def test_topk_ignores_unselected_permutation(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.uniform(size=(4, 4))
    chosen = topk_indices(s, n)
    rest = np.setdiff1d(np.arange(16), chosen)
    shuffled = s.copy().reshape(-1)
    shuffled[rest] = rng.permutation(shuffled[rest])
    np.testing.assert_array_equal(topk_indices(shuffled.reshape(4, 4), n), chosen)


def test_adaptive_counts():
    rng = np.random.default_rng(0)
    shapes = [(10, 10), (5, 5), (3, 3)]
    scores = [rng.uniform(size=(1, h, w)) for h, w in shapes]
    fg = [np.zeros((h, w), dtype=bool) for h, w in shapes]
    fg[0][:8, :10] = True
    fg[1][:4, :5] = True     # 80 + 20 = 100 foreground cells
    assert len(select_adaptive(scores, _pooled(shapes), 0.25, fg)) == 25
    full = select_adaptive(scores, _pooled(shapes), 1.0, fg)
    assert len(full) == 100
    assert set(zip(full.scale[0], full.rows[0], full.cols[0])) == {
        (k, i, j) for k, m in enumerate(fg) for i, j in zip(*np.nonzero(m))}


def test_adaptive_picks_top_foreground_jointly():
    scores = [np.array([[[0.9, 0.2], [0.3, 0.1]]]), np.array([[[0.8]]])]
    fg = [np.array([[True, True], [True, False]]), np.array([[True]])]
    s = select_adaptive(scores, _pooled([(2, 2), (1, 1)]), 0.5, fg)
    assert sorted(s.scores[0].tolist()) == [0.8, 0.9]


def test_adaptive_without_foreground_keeps_global_max():
    scores = [np.array([[[0.1, 0.2]]]), np.array([[[0.7]]])]
    s = select_adaptive(scores, _pooled([(1, 2), (1, 1)]), 0.25, [np.zeros((1, 2), bool), np.zeros((1, 1), bool)])
    assert len(s) == 1 and s.scale[0, 0] == 1 and s.scores[0, 0] == 0.7


def test_adaptive_rejects_bad_fraction():
    with pytest.raises(ValueError):
        select_adaptive([np.ones((1, 2, 2))], _pooled([(2, 2)]), 0.0, [np.ones((2, 2), bool)])
