import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_event, random_event, toy_event
from oracles import attention_loop, group_means_loop, hpst_param_count
from hpst import diffcore as dc
from hpst.diffcore import Tape, Tensor
from hpst.errors import ConfigMismatch, RecordMismatch
from hpst.events import Event, View
from hpst.graph import EdgeSet, knn_inter, knn_intra
from hpst.loss import event_loss
from hpst.model import (
    HyperParams,
    Level,
    block_forward,
    check_weights,
    event_inputs,
    event_structure,
    forward,
    forward_structured,
    init_weights,
    inter_attention,
    intra_attention,
    n_parameters,
    param_shapes,
    pool_features,
    predict,
    unpool,
    voxel_pool,
)


def rand_weights(rng, shapes, scale=0.5):
    return {k: Tensor(rng.normal(scale=scale, size=s), requires_grad=True) for k, s in shapes.items()}


def attn_shapes(d, rpe=True):
    s = {"q_proj/weight": (d, d), "q_proj/bias": (d,), "k_proj/weight": (d, d),
         "v_proj/weight": (d, d), "v_proj/bias": (d,)}
    if rpe:
        s.update({"rpe_fc1/weight": (2, d), "rpe_fc1/bias": (d,), "rpe_fc2/weight": (d, 1)})
    return s


# --- weights -----------------------------------------------------------------


def test_init_deterministic():
    h = HyperParams()
    a, b = init_weights(h, 3), init_weights(h, 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_init_seeds_differ():
    h = HyperParams()
    a, b = init_weights(h, 3), init_weights(h, 4)
    assert any(not np.array_equal(a[k].data, b[k].data) for k in a)


def test_init_distribution():
    w = init_weights(HyperParams(), 0)
    for path, t in w.items():
        leaf = path.rsplit("/", 1)[1]
        if leaf == "weight":
            lim = np.sqrt(6.0 / sum(t.shape))
            assert np.abs(t.data).max() <= lim
        elif leaf == "gain":
            assert (t.data == 1).all()
        else:
            assert (t.data == 0).all()


def test_default_parameter_count():
    h = HyperParams()
    assert n_parameters(init_weights(h)) == hpst_param_count(32, 2, 1, 6, 8) == 193_774


@pytest.mark.parametrize("n,m,d", [(1, 1, 4), (2, 2, 8), (3, 1, 6)])
def test_parameter_count_closed_form(n, m, d):
    for inter in (True, False):
        h = HyperParams(n=n, m=m, base_dim=d, inter_view=inter)
        assert n_parameters(init_weights(h)) == hpst_param_count(d, n, m, 6, 8, inter)


def test_parameter_paths():
    shapes = param_shapes(HyperParams())
    assert shapes["enc0/blk0/intra/q_proj/weight"] == (32, 32)
    assert shapes["enc1/blk0/inter_1to0/v_proj/weight"] == (64, 64)
    assert shapes["dec0/up/weight"] == (192, 64)
    assert shapes["sem_head/weight"] == (32, 6)
    assert shapes["ins_head/weight"] == (32, 8)
    assert not any("inter" in k for k in param_shapes(HyperParams(inter_view=False)))


def test_check_weights():
    h = HyperParams(base_dim=4)
    w = init_weights(h)
    check_weights(w, h)
    w["embed/weight"] = Tensor(np.zeros((3, 5)))
    with pytest.raises(ConfigMismatch):
        check_weights(w, h)
    with pytest.raises(ConfigMismatch):
        check_weights(init_weights(h), HyperParams(base_dim=6))


@pytest.mark.parametrize("bad", [dict(n=0), dict(m=0), dict(base_dim=5), dict(k_nn=0), dict(base_voxel_size=0)])
def test_hyper_validation(bad):
    with pytest.raises(ValueError):
        HyperParams(**bad)


def test_hyper_dict_round_trip():
    h = HyperParams(n=3, base_dim=6, inter_view=False)
    assert HyperParams.from_dict(h.to_dict()) == h
    with pytest.raises(ConfigMismatch):
        HyperParams.from_dict({"depth": 3.0})


# --- attention ---------------------------------------------------------------


def test_intra_single_neighbor_returns_its_value(rng):
    d = 3
    w = rand_weights(rng, attn_shapes(d))
    feats = Tensor(rng.normal(size=(2, d)))
    coords = np.array([[0.0, 0.0], [5.0, 1.0]])
    edges = knn_intra(coords, 1)
    out = intra_attention(feats, coords, edges, w).data
    v = feats.data @ w["v_proj/weight"].data + w["v_proj/bias"].data
    np.testing.assert_array_equal(out, v[[1, 0]])


def test_intra_uniform_attention_gives_mean(rng):
    d = 3
    w = rand_weights(rng, attn_shapes(d))
    w["k_proj/weight"] = Tensor(np.zeros((d, d)))
    w["rpe_fc2/weight"] = Tensor(np.zeros((d, 1)))
    feats = Tensor(rng.normal(size=(5, d)))
    coords = rng.uniform(0, 10, size=(5, 2))
    edges = knn_intra(coords, 3)
    out = intra_attention(feats, coords, edges, w).data
    v = feats.data @ w["v_proj/weight"].data + w["v_proj/bias"].data
    for k, nb in enumerate(edges.neighbors):
        np.testing.assert_allclose(out[k], v[nb].mean(axis=0), rtol=1e-13)


def test_intra_line_graph_matches_loop(rng):
    d = 2
    w = rand_weights(rng, attn_shapes(d))
    feats = rng.normal(size=(4, d))
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    edges = EdgeSet.from_lists(0, 0, 2, [[1], [0, 2], [1, 3], [2]])
    out = intra_attention(Tensor(feats), coords, edges, w).data
    a = {k: t.data for k, t in w.items()}
    expected = attention_loop(feats, feats, edges.neighbors, a["q_proj/weight"], a["q_proj/bias"], a["k_proj/weight"],
                              a["v_proj/weight"], a["v_proj/bias"],
                              rpe=(a["rpe_fc1/weight"], a["rpe_fc1/bias"], a["rpe_fc2/weight"]),
                              dst_coords=coords, src_coords=coords)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_intra_isolated_point_outputs_zero(rng):
    w = rand_weights(rng, attn_shapes(3))
    out = intra_attention(Tensor(rng.normal(size=(1, 3))), [[1.0, 1.0]], knn_intra([[1.0, 1.0]], 4), w).data
    np.testing.assert_array_equal(out, 0.0)


def test_inter_empty_source(rng):
    w = rand_weights(rng, attn_shapes(3, rpe=False))
    dst = rng.uniform(0, 10, size=(4, 2))
    edges = knn_inter(np.zeros((0, 2)), dst, 4)
    out = inter_attention(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros((0, 3))), edges, w).data
    np.testing.assert_array_equal(out, np.zeros((4, 3)))


def test_inter_single_source_gives_its_value(rng):
    w = rand_weights(rng, attn_shapes(3, rpe=False))
    src = Tensor(rng.normal(size=(1, 3)))
    edges = knn_inter([[4.0, 4.0]], rng.uniform(0, 10, size=(5, 2)), 8)
    out = inter_attention(Tensor(rng.normal(size=(5, 3))), src, edges, w).data
    v = src.data @ w["v_proj/weight"].data + w["v_proj/bias"].data
    np.testing.assert_array_equal(out, np.repeat(v, 5, axis=0))


def test_inter_two_by_two_hand_computation():
    d = 2
    eye = {"q_proj/weight": np.eye(d), "q_proj/bias": np.zeros(d), "k_proj/weight": np.eye(d),
           "v_proj/weight": np.eye(d), "v_proj/bias": np.zeros(d)}
    w = {k: Tensor(v) for k, v in eye.items()}
    dst = np.array([[1.0, 0.0], [0.0, 2.0]])
    src = np.array([[3.0, 1.0], [-1.0, 1.0]])
    edges = EdgeSet.from_lists(1, 0, 2, [[0, 1], [1, 0]])
    out = inter_attention(Tensor(dst), Tensor(src), edges, w).data
    # destination 0: logits 3/sqrt2, -1/sqrt2
    a0 = np.exp([3 / np.sqrt(2), -1 / np.sqrt(2)])
    a0 /= a0.sum()
    exp0 = a0[0] * src[0] + a0[1] * src[1]
    # destination 1: both logits 2/sqrt2 -> uniform
    exp1 = 0.5 * (src[1] + src[0])
    np.testing.assert_allclose(out, [exp0, exp1], rtol=1e-14)


def test_inter_matches_loop_without_rpe(rng):
    d = 3
    w = rand_weights(rng, attn_shapes(d, rpe=False))
    src_c, dst_c = rng.uniform(0, 20, size=(6, 2)), rng.uniform(0, 20, size=(4, 2))
    src_f, dst_f = rng.normal(size=(6, d)), rng.normal(size=(4, d))
    edges = knn_inter(src_c, dst_c, 3)
    out = inter_attention(Tensor(dst_f), Tensor(src_f), edges, w).data
    a = {k: t.data for k, t in w.items()}
    expected = attention_loop(dst_f, src_f, edges.neighbors, a["q_proj/weight"], a["q_proj/bias"], a["k_proj/weight"],
                              a["v_proj/weight"], a["v_proj/bias"])
    np.testing.assert_allclose(out, expected, rtol=1e-12)


# --- blocks ------------------------------------------------------------------


def level_for(event, k=3):
    h = HyperParams(base_dim=4, k_nn=k)
    return event_structure(event, h).levels[0]


def block_weights(rng, d, inter=True):
    from hpst.model import _block_shapes

    return {k.split("/", 1)[1]: v for k, v in rand_weights(rng, _block_shapes("b", d, inter)).items()}


def test_block_identity_when_output_projections_zero(rng):
    ev = random_event(rng, 5, 4)
    lvl = level_for(ev)
    w = block_weights(rng, 4)
    for key in list(w):
        if key.endswith(("o_proj/weight", "o_proj/bias", "fc2/weight", "fc2/bias")):
            w[key] = Tensor(np.zeros(w[key].shape))
    h = Tensor(rng.normal(size=(9, 4)))
    np.testing.assert_array_equal(block_forward(h, lvl, w).data, h.data)


def test_block_one_view_empty_means_no_inter(rng):
    ev = random_event(rng, 6, 0, n_inst=1)
    lvl = level_for(ev)
    w = block_weights(rng, 4)
    h = Tensor(rng.normal(size=(6, 4)))
    np.testing.assert_array_equal(block_forward(h, lvl, w, use_inter=True).data,
                                  block_forward(h, lvl, w, use_inter=False).data)


def test_block_gradient(rng):
    ev = random_event(rng, 4, 3)
    lvl = level_for(ev, k=2)
    w = block_weights(rng, 4)
    h = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    r = Tensor(rng.normal(size=(7, 4)))
    keys = sorted(w)

    def f(h, *ws):
        out = block_forward(h, lvl, dict(zip(keys, ws)))
        return dc.sum_all(dc.multiply(out, r))

    assert dc.grad_check(f, [h] + [w[k] for k in keys]) < 1e-5


# --- pooling -----------------------------------------------------------------


def test_pool_each_point_own_voxel(rng):
    coords = np.array([[0.5, 0.5], [4.5, 0.5], [2.5, 8.5]])
    feats = Tensor(rng.normal(size=(3, 2)))
    bary, pooled, rec = voxel_pool(coords, feats, 2.0)
    np.testing.assert_array_equal(pooled.data[rec.group_of], feats.data)
    np.testing.assert_array_equal(bary[rec.group_of], coords)


def test_pool_all_in_one_voxel(rng):
    coords = rng.uniform(0, 1.9, size=(6, 2))
    feats = Tensor(rng.normal(size=(6, 3)))
    bary, pooled, rec = voxel_pool(coords, feats, 2.0)
    assert pooled.shape == (1, 3)
    np.testing.assert_allclose(pooled.data[0], feats.data.mean(axis=0), rtol=1e-13)
    np.testing.assert_allclose(bary[0], coords.mean(axis=0), rtol=1e-13)


def test_pool_matches_sequential_oracle(rng):
    coords = rng.uniform(0, 12, size=(30, 2))
    feats = Tensor(rng.normal(size=(30, 4)))
    _, pooled, rec = voxel_pool(coords, feats, 2.0)
    np.testing.assert_allclose(pooled.data, group_means_loop(feats.data, rec.group_of, rec.n_post), rtol=1e-13)


def test_unpool_identity_projection_zero_skip(rng):
    d = 3
    coords = rng.uniform(0, 8, size=(12, 2))
    feats = Tensor(rng.normal(size=(12, d)))
    _, pooled, rec = voxel_pool(coords, feats, 4.0)
    w = {"weight": Tensor(np.vstack([np.eye(d), np.zeros((d, d))])), "bias": Tensor(np.zeros(d))}
    out = unpool(pooled, rec, w, skip=Tensor(np.zeros((12, d)))).data
    np.testing.assert_array_equal(out, pooled.data[rec.group_of])


def test_unpool_one_point_per_voxel_restores(rng):
    d = 2
    coords = np.array([[0.5, 0.5], [4.5, 0.5], [2.5, 8.5]])
    feats = Tensor(rng.normal(size=(3, d)))
    _, pooled, rec = voxel_pool(coords, feats, 2.0)
    w = {"weight": Tensor(np.vstack([np.eye(d), np.zeros((d, d))])), "bias": Tensor(np.zeros(d))}
    np.testing.assert_array_equal(unpool(pooled, rec, w, skip=Tensor(np.zeros((3, d)))).data, feats.data)


@given(st.integers(1, 25), st.integers(0, 2**32))
def test_unpool_output_count(n, seed):
    r = np.random.default_rng(seed)
    coords = r.uniform(0, 10, size=(n, 2))
    feats = Tensor(r.normal(size=(n, 2)))
    _, pooled, rec = voxel_pool(coords, feats, 3.0)
    w = {"weight": Tensor(r.normal(size=(4, 2))), "bias": Tensor(np.zeros(2))}
    assert unpool(pooled, rec, w).shape == (n, 2)


def test_unpool_record_mismatch(rng):
    coords = rng.uniform(0, 10, size=(8, 2))
    _, pooled, rec = voxel_pool(coords, Tensor(rng.normal(size=(8, 2))), 2.0)
    w = {"weight": Tensor(np.zeros((4, 2))), "bias": Tensor(np.zeros(2))}
    with pytest.raises(RecordMismatch):
        unpool(Tensor(np.zeros((rec.n_post + 1, 2))), rec, w)
    with pytest.raises(RecordMismatch):
        unpool(pooled, rec, w, skip=Tensor(np.zeros((3, 2))))


def test_pool_features_weighted_conservation(rng):
    coords = rng.uniform(0, 20, size=(40, 2))
    feats = rng.normal(size=(40, 3))
    _, pooled, rec = voxel_pool(coords, Tensor(feats), 2.0)
    weighted = (pooled.data * rec.counts[:, None]).sum(axis=0)
    np.testing.assert_allclose(weighted, feats.sum(axis=0), rtol=1e-9)


# --- full network ------------------------------------------------------------


def test_forward_empty_event(tiny_hyper):
    ev = Event(0, (View.empty(0), View.empty(1)))
    w = init_weights(tiny_hyper)
    sem, ins = forward(ev, w, tiny_hyper)
    assert [s.shape for s in sem] == [(0, 6), (0, 6)]
    assert [s.shape for s in ins] == [(0, 8), (0, 8)]
    probs, slots = predict(ev, w, tiny_hyper)
    assert probs.shape == (0, 6) and slots.shape == (0,)


@given(st.integers(0, 12), st.integers(0, 12), st.integers(0, 2**32))
def test_forward_shapes(n0, n1, seed):
    r = np.random.default_rng(seed)
    if n0 + n1 == 0:
        n0 = 1
    ev = random_event(r, n0, n1, n_inst=1)
    h = HyperParams(base_dim=4, k_nn=3)
    sem, ins = forward(ev, init_weights(h, 1), h)
    assert [s.shape for s in sem] == [(n0, 6), (n1, 6)]
    assert [s.shape for s in ins] == [(n0, 8), (n1, 8)]


def test_forward_gradient_toy_event():
    tiny_hyper = HyperParams(base_dim=2, k_nn=2)
    ev = toy_event()
    w = init_weights(tiny_hyper, 5)
    keys = sorted(w)
    st_ = event_structure(ev, tiny_hyper)
    inputs = event_inputs(ev)

    def f(*ws):
        sem, ins = forward_structured(inputs, st_, dict(zip(keys, ws)), tiny_hyper)
        return event_loss(sem, ins, ev).tensor

    assert dc.grad_check(f, [w[k] for k in keys]) < 1e-4


def test_permutation_equivariance_within_view(rng):
    h = HyperParams(base_dim=4, k_nn=3)
    w = init_weights(h, 2)
    base = random_event(rng, 8, 7)
    # continuous coordinates remove neighbour ties
    coords = [v.coords + rng.uniform(0, 0.9, size=v.coords.shape) for v in base.views]
    perm = rng.permutation(8)

    def build(order):
        v0 = base.views[0]
        views = (View(0, coords[0][order], v0.values[order], v0.sem[order], v0.ins[order]),
                 View(1, coords[1], base.views[1].values, base.views[1].sem, base.views[1].ins))
        return Event(0, views)

    p0, s0 = predict(build(np.arange(8)), w, h)
    p1, s1 = predict(build(perm), w, h)
    np.testing.assert_allclose(p1[:8], p0[:8][perm], rtol=1e-10)
    np.testing.assert_allclose(p1[8:], p0[8:], rtol=1e-10)


def _cross_view_jacobian(h, w, ev, hit=0, eps=1e-6):
    st_ = event_structure(ev, h)
    inputs = event_inputs(ev)
    n0 = len(ev.views[0])
    x1 = Tensor(inputs[1], requires_grad=True)
    r = Tensor(np.random.default_rng(0).normal(size=(n0, h.n_classes)))
    with Tape() as tape:
        sem, _ = forward_structured([inputs[0], x1], st_, w, h)
        out = dc.sum_all(dc.multiply(dc.gather(sem, np.arange(n0)), r))
    tape.backward(out)
    return x1.grad[hit, 2]


def test_cross_view_influence(tiny_hyper):
    ev = toy_event()
    w = init_weights(tiny_hyper, 1)
    assert _cross_view_jacobian(tiny_hyper, w, ev) != 0.0


def test_zeroed_inter_values_cut_cross_view_influence(tiny_hyper):
    ev = toy_event()
    w = init_weights(tiny_hyper, 1)
    for k in w:
        if "/inter_" in k and "/v_proj/" in k:
            w[k] = Tensor(np.zeros(w[k].shape), requires_grad=True)
    assert _cross_view_jacobian(tiny_hyper, w, ev) == 0.0
    base, _ = predict(ev, w, tiny_hyper)
    v1 = ev.views[1]
    moved = Event(0, (ev.views[0], View(1, v1.coords, v1.values * 7.0, v1.sem, v1.ins)))
    after, _ = predict(moved, w, tiny_hyper)
    np.testing.assert_array_equal(after[:3], base[:3])


def test_no_inter_hyper_has_no_cross_view_path(tiny_hyper):
    from dataclasses import replace

    h = replace(tiny_hyper, inter_view=False)
    assert _cross_view_jacobian(h, init_weights(h, 1), toy_event()) == 0.0


def test_pool_features_gradient(rng):
    x = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    group_of, counts = np.array([0, 1, 0, 2, 1, 0]), np.array([3, 2, 1])
    r = Tensor(rng.normal(size=(3, 2)))
    assert dc.grad_check(lambda x: dc.sum_all(dc.multiply(pool_features(x, group_of, counts), r)), [x]) < 1e-6


def test_structure_rebuilds_edges_per_level(tiny_hyper):
    ev = random_event(np.random.default_rng(3), 20, 15)
    st_ = event_structure(ev, tiny_hyper)
    assert len(st_.levels) == tiny_hyper.n + 1 and len(st_.pools) == tiny_hyper.n
    for s in range(tiny_hyper.n):
        lvl = st_.levels[s]
        assert lvl.intra is not None and lvl.intra.n_dst == len(lvl.coords)
        assert st_.pools[s].n_pre == len(lvl.coords)
        assert st_.pools[s].n_post == len(st_.levels[s + 1].coords)
    assert st_.levels[-1].intra is None


def test_pooling_stays_within_view(tiny_hyper):
    ev = make_event([(1, 1, 1.0, 0, 0)], [(1, 1, 1.0, 0, 0)])
    st_ = event_structure(ev, tiny_hyper)
    assert st_.levels[1].n_view == (1, 1)
