from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilp.core import RngStream, SystemAction, desk_config
from tilp.fsl import (DEFAULT_WIDTHS, LayeredModel, SplitTrainer, build_geometry, client_forward,
                      client_gradients, client_step, compress, cross_entropy, evaluate_success, fed_average,
                      init_model, kept_count, load_samples_csv, make_dataset, save_samples_csv, server_step,
                      split_view)
from tilp.nn import mlp_backward, mlp_forward


def zero_model(widths=DEFAULT_WIDTHS):
    params = []
    for a, b in zip(widths[:-1], widths[1:]):
        params += [np.zeros((a, b)), np.zeros(b)]
    return LayeredModel(tuple(widths), tuple(params))


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


# forward ------------------------------------------------------------------------


def test_zero_network_gives_zero_activation():
    S, _ = client_forward(np.ones((3, 16)), zero_model(), 3)
    assert S.shape == (3, 24) and np.all(S == 0)


def test_one_layer_hand_example():
    W = np.array([[0.5, -1.0], [2.0, 0.25]])
    b = np.array([0.1, -0.2])
    model = LayeredModel((2, 2, 2), (W, b, np.eye(2), np.zeros(2)))
    x = np.array([[1.0, 2.0]])
    # W.T @ x + b = [0.5 + 4.0 + 0.1, -1.0 + 0.5 - 0.2]
    S, _ = client_forward(x, model, 1)
    assert np.allclose(S, np.tanh([[4.6, -0.7]]), rtol=0, atol=1e-15)


def test_empty_batch_keeps_width():
    S, _ = client_forward(np.zeros((0, 16)), init_model(RngStream(0)), 2)
    assert S.shape == (0, 32)


def test_width_mismatch_is_error():
    with pytest.raises(ValueError):
        client_forward(np.zeros((2, 15)), init_model(RngStream(0)), 2)


def test_split_view_partitions_layers():
    m = init_model(RngStream(1))
    v = split_view(m, 3)
    assert len(v.client_prefix) == 6 and len(v.server_tail) == 2 * (m.n_layers - 3)
    assert all(a is b for a, b in zip(v.client_prefix + v.server_tail, m.params))


def test_model_shape_validation():
    with pytest.raises(ValueError):
        LayeredModel((2, 3), (np.zeros((3, 2)), np.zeros(3)))


# compression --------------------------------------------------------------------


def test_compress_identity_at_zero():
    S = RngStream(0).normal(size=(5, 8))
    out, mask = compress(S, 0.0, RngStream(1))
    assert np.array_equal(out, S) and mask.kept.all()


def test_compress_total_drop():
    S = RngStream(0).normal(size=(5, 8))
    out, mask = compress(S, 1.0, RngStream(1))
    assert np.all(out == 0) and not mask.kept.any()


def test_compress_width_four_half():
    S = np.arange(1.0, 13.0).reshape(3, 4)
    out, mask = compress(S, 0.5, RngStream(42))
    assert mask.kept.sum() == 2
    assert np.array_equal(out[:, mask.kept], 2 * S[:, mask.kept])
    assert np.all(out[:, ~mask.kept] == 0)


@settings(max_examples=100, deadline=None)
@given(width=st.integers(1, 64), q=st.floats(0, 1), seed=st.integers(0, 2**32))
def test_mask_keep_fraction(width, q, seed):
    _, mask = compress(np.ones((2, width)), q, RngStream(seed))
    assert mask.kept.sum() == kept_count(width, q) == math.floor((1 - q) * width + 0.5)


def test_compression_unbiased():
    S = np.ones((1, 16))
    total = np.zeros(16)
    rng = RngStream(3)
    for _ in range(4000):
        total += compress(S, 0.5, rng)[0][0]
    assert np.allclose(total / 4000, 1.0, atol=0.1)


# loss and server ----------------------------------------------------------------


def test_cross_entropy_hand_case():
    logits = np.array([[0.0, 0.0], [math.log(3.0), 0.0]])
    loss, grad = cross_entropy(logits, [0, 1])
    # sample 1: log 2; sample 2: -log(1/4)
    assert abs(loss - 1.5 * math.log(2.0)) <= 1e-12
    assert np.allclose(grad, np.array([[-0.5, 0.5], [0.75, -0.75]]) / 2, rtol=0, atol=1e-15)


def _batch(seed, n=6):
    g = RngStream(seed).generator()
    return g.standard_normal((n, 16)), g.integers(0, 4, n)


def test_server_single_terminal_is_plain_sgd():
    model = init_model(RngStream(0))
    x, y = _batch(1)
    S, _ = client_forward(x, model, 2)
    res = server_step([S], [y], model, [2], [1.0], 0.1)
    tail = model.layers(3, model.n_layers)
    out, acts = mlp_forward(tail, S)
    loss, d = cross_entropy(out, y)
    g, _ = mlp_backward(tail, acts, d)
    expect = [p - 0.1 * gi for p, gi in zip(tail, g)]
    assert res.loss == loss
    assert all(np.array_equal(a, b) for a, b in zip(res.model.layers(3, model.n_layers), expect))
    assert all(np.array_equal(a, b) for a, b in zip(res.model.layers(1, 2), model.layers(1, 2)))


def test_server_equal_batches_weight_half():
    model = init_model(RngStream(0))
    (x1, y1), (x2, y2) = _batch(1), _batch(2)
    S1, S2 = client_forward(x1, model, 2)[0], client_forward(x2, model, 2)[0]
    res = server_step([S1, S2], [y1, y2], model, [2, 2], [0.5, 0.5], 0.1)
    assert res.loss == pytest.approx(0.5 * res.per_terminal_loss.sum(), rel=1e-15)


def test_server_empty_is_error():
    with pytest.raises(ValueError):
        server_step([], [], init_model(RngStream(0)), [], [], 0.1)


# client -------------------------------------------------------------------------


def test_unscheduled_client_untouched():
    model = init_model(RngStream(0))
    S, cache = client_forward(_batch(1)[0], model, 2)
    assert client_step(cache, np.ones_like(S), model, 2, 0.1, scheduled=False) is model


def test_zero_split_gradient_is_fixed_point():
    model = init_model(RngStream(0))
    S, cache = client_forward(_batch(1)[0], model, 2)
    out = client_step(cache, np.zeros_like(S), model, 2, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(out.params, model.params))


def _split_loss(params, x, y, widths, split, mask):
    m = LayeredModel(widths, tuple(params))
    S, _ = client_forward(x, m, split)
    out, _ = mlp_forward(m.layers(split + 1, m.n_layers), mask.apply(S) if mask else S)
    return cross_entropy(out, y)[0]


def _analytic(model, x, y, split, mask):
    S, cache = client_forward(x, model, split)
    St = mask.apply(S) if mask else S
    res = server_step([St], [y], model, [split], [1.0], 1.0, [mask] if mask else None)
    tail_grad = [p - q for p, q in zip(model.params[2 * split:], res.model.params[2 * split:])]
    return client_gradients(cache, res.split_grads[0], model, split) + tail_grad


@pytest.mark.parametrize("split, q", [(1, 0.0), (3, 0.5), (5, 0.7)])
def test_backprop_matches_finite_differences(split, q):
    model = init_model(RngStream(split))
    x, y = _batch(10 + split, n=4)
    mask = compress(np.ones((1, model.layer_widths[split])), q, RngStream(99))[1] if q else None
    grads = _analytic(model, x, y, split, mask)
    g = RngStream(5).generator()
    h = 1e-6
    for j in range(len(model.params)):
        flat_idx = g.choice(model.params[j].size, min(8, model.params[j].size), replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, model.params[j].shape)
            plus = [p.copy() for p in model.params]
            minus = [p.copy() for p in model.params]
            plus[j][idx] += h
            minus[j][idx] -= h
            fd = (_split_loss(plus, x, y, model.layer_widths, split, mask)
                  - _split_loss(minus, x, y, model.layer_widths, split, mask)) / (2 * h)
            an = grads[j][idx]
            assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an)) + 1e-9


def test_masked_coordinates_pass_no_gradient():
    model = init_model(RngStream(0))
    x, y = _batch(3)
    S, _ = client_forward(x, model, 2)
    St, mask = compress(S, 0.75, RngStream(4))
    res = server_step([St], [y], model, [2], [1.0], 0.1, [mask])
    assert np.all(res.split_grads[0][:, ~mask.kept] == 0)


def test_single_terminal_round_equals_monolithic_sgd():
    cfg = desk_config(n_terminals=2, lr_client=0.1, lr_server=0.1)
    data = make_dataset(2, 40, RngStream(1))
    tr = SplitTrainer(cfg, data, RngStream(2))
    start = tr.global_model()
    action = SystemAction([1e6, 0], [0.1, 0], [3, 1], [0.0, 0.0], [True, False])
    rng = RngStream(7)
    idx = rng.copy().integers(0, 40, cfg.batch_size)
    tr.train_round(action, rng)
    xb, yb = data.shards_x[0][idx], data.shards_y[0][idx]
    out, acts = mlp_forward(start.params, xb)
    _, d = cross_entropy(out, yb)
    g, _ = mlp_backward(start.params, acts, d)
    expect = [p - 0.1 * gi for p, gi in zip(start.params, g)]
    got = tr.clients[0].layers(1, 3) + tr.server.layers(4, start.n_layers)
    assert all(np.allclose(a, b, rtol=0, atol=1e-14) for a, b in zip(got, expect))


# averaging ----------------------------------------------------------------------


def test_fed_average_mean():
    a = [np.array([[1.0, 3.0]]), np.zeros(2)]
    b = [np.array([[3.0, 1.0]]), np.zeros(2)]
    out = fed_average([a, b], [0.5, 0.5])
    assert np.array_equal(out[0][0], [[2.0, 2.0]]) and np.array_equal(out[1][0], [[2.0, 2.0]])


def test_fed_average_owner_subset():
    m1, m2 = init_model(RngStream(1)), init_model(RngStream(2))
    out = fed_average([m1.layers(1, 2), m2.layers(1, 3)], [0.5, 0.5])
    assert all(np.array_equal(a, b) for a, b in zip(out[1][4:6], m2.layers(3, 3)))
    assert np.allclose(out[0][0], 0.5 * (m1.params[0] + m2.params[0]))
    assert len(out[0]) == 4 and len(out[1]) == 6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32), k=st.integers(1, 5))
def test_fed_average_fixed_point_and_hull(seed, k):
    g = RngStream(seed).generator()
    base = [g.standard_normal((3, 2)), g.standard_normal(2)]
    same = fed_average([base] * k, g.random(k) + 0.1)
    assert all(np.allclose(a, b, rtol=0, atol=1e-12) for out in same for a, b in zip(out, base))
    models = [[g.standard_normal((3, 2)), g.standard_normal(2)] for _ in range(k)]
    out = fed_average(models, g.random(k) + 0.1)[0]
    for j in range(2):
        stack = np.stack([m[j] for m in models])
        assert np.all(out[j] >= stack.min(axis=0) - 1e-12) and np.all(out[j] <= stack.max(axis=0) + 1e-12)


def test_fed_average_rejects_negative_weights():
    with pytest.raises(ValueError):
        fed_average([[np.zeros(1), np.zeros(1)]], [-1.0])


# evaluation ---------------------------------------------------------------------


def test_always_class_zero_is_perfect_on_zero_labels():
    m = zero_model()
    b = m.params[-1].copy()
    b[0] = 1.0
    m = LayeredModel(m.layer_widths, m.params[:-1] + (b,))
    assert evaluate_success(m, np.ones((10, 16)), np.zeros(10, int)) == 1.0


def test_untrained_symmetric_model_is_chance():
    data = make_dataset(2, 10, RngStream(3))
    gamma = evaluate_success(zero_model(), data.eval_x, data.eval_y)
    assert len(data.eval_y) == 400 and abs(gamma - 0.25) <= 0.05


def test_delta_gamma_sign():
    data = make_dataset(2, 10, RngStream(3))
    g0 = evaluate_success(zero_model(), data.eval_x, data.eval_y)
    g1 = evaluate_success(init_model(RngStream(4)), data.eval_x, data.eval_y)
    d = g1 - g0
    assert (d > 0) == (g1 > g0) and (d < 0) == (g1 < g0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), scale=st.floats(1e-3, 1e3))
def test_success_bounded_and_scale_invariant(seed, scale):
    m = init_model(RngStream(seed))
    x, y = _batch(seed % 1000, n=50)
    gamma = evaluate_success(m, x, y)
    scaled = LayeredModel(m.layer_widths, m.params[:-2] + (m.params[-2] * scale, m.params[-1] * scale))
    assert 0.0 <= gamma <= 1.0
    assert evaluate_success(scaled, x, y) == gamma


# geometry and data --------------------------------------------------------------


def test_geometry_tables():
    geom = build_geometry(payload_scale=5e4)
    assert geom.psi(1) == 32 * 32 * 5e4
    phi = geom.phi(np.arange(1, 6))
    mem = geom.mem(np.arange(1, 6))
    assert np.all(np.diff(phi) > 0) and np.all(np.diff(mem) >= 0)
    assert np.all(geom.act_bits_per_sample[1:] > 0) and phi[0] == 16 * 32
    with pytest.raises(ValueError):
        build_geometry(payload_scale=0.0)


def test_dataset_shapes_and_csv_round_trip(tmp_path):
    data = make_dataset(3, 20, RngStream(0))
    assert all(x.shape == (20, 16) for x in data.shards_x)
    assert set(np.concatenate(data.shards_y)) <= {0, 1, 2, 3}
    path = tmp_path / "eval.csv"
    save_samples_csv(data.eval_x, data.eval_y, path)
    x, y = load_samples_csv(path)
    assert np.array_equal(x, data.eval_x) and np.array_equal(y, data.eval_y)


def test_trainer_bit_identical_trajectories():
    cfg = desk_config(n_terminals=3)
    action = SystemAction([1e6] * 3, [0.1] * 3, [1, 2, 3], [0.3, 0.0, 0.6], [True, True, True])

    def run():
        tr = SplitTrainer(cfg, make_dataset(3, 30, RngStream(1)), RngStream(2))
        rng = RngStream(3)
        for t in range(4):
            tr.train_round(action, rng)
            if t == 1:
                tr.aggregate()
        return np.concatenate([p.ravel() for p in tr.global_model().params])

    assert run().tobytes() == run().tobytes()


def test_aggregation_syncs_clients():
    cfg = desk_config(n_terminals=3)
    tr = SplitTrainer(cfg, make_dataset(3, 30, RngStream(1)), RngStream(2))
    tr.train_round(SystemAction([1e6] * 3, [0.1] * 3, [1, 2, 3], [0.0] * 3, [True] * 3), RngStream(3))
    tr.aggregate()
    assert all(c is tr.server for c in tr.clients) and np.all(tr.owned == 0)
