"""Network forward pass, integrator, and rollout behavior."""

import numpy as np
import pytest

from gnsim.autodiff import Tensor
from gnsim.dataset import Metadata
from gnsim.graph import EncodedGraph, build_graph, radius_graph, target_acceleration
from gnsim.model import (
    LatentGraph,
    ModelConfig,
    RolloutError,
    decode,
    encode,
    euler_update,
    init_model_params,
    predict,
    process_step,
    rollout,
)
from gnsim.nn import MlpParams, mlp_init

from test_graph import make_meta


def tiny_config(**overrides):
    defaults = dict(
        dim=2,
        latent_width=16,
        mlp_hidden_width=16,
        message_passing_steps=2,
        num_particle_types=3,
        type_embedding_width=4,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def random_graph(rng, config, n=6, meta=None):
    meta = meta or make_meta(radius=0.25)
    inputs = 0.1 + 0.8 * rng.random((6, n, config.dim))
    types = rng.integers(0, config.num_particle_types, size=n)
    params = init_model_params(config, int(rng.integers(0, 2**31)))
    g = build_graph(inputs, types, meta, params.type_embedding, None)
    return g, params, inputs, types, meta


def zero_params(config, seed=0):
    params = init_model_params(config, seed)
    for t in params.flatten():
        t.value[:] = 0.0
    return params


# --- encode ---------------------------------------------------------------------


def test_encode_zero_features_zero_initialized_zero_latents():
    config = tiny_config(layer_norm=False)
    params = zero_params(config)
    g = EncodedGraph(
        nodes=Tensor(np.zeros((4, config.node_feature_width))),
        senders=np.array([0, 1]),
        receivers=np.array([1, 0]),
        edges=Tensor(np.zeros((2, config.edge_feature_width))),
    )
    lg = encode(g, params, None)
    assert np.array_equal(lg.nodes.value, np.zeros((4, 16)))
    assert np.array_equal(lg.edges.value, np.zeros((2, 16)))


def test_encode_single_node_no_edges_shapes():
    rng = np.random.default_rng(0)
    config = tiny_config()
    params = init_model_params(config, 1)
    g = EncodedGraph(
        nodes=Tensor(rng.standard_normal((1, config.node_feature_width))),
        senders=np.empty(0, dtype=np.int64),
        receivers=np.empty(0, dtype=np.int64),
        edges=Tensor(np.zeros((0, config.edge_feature_width))),
    )
    lg = encode(g, params, None)
    assert lg.nodes.shape == (1, 16)
    assert lg.edges.shape == (0, 16)


def test_encode_matches_per_row_application():
    rng = np.random.default_rng(1)
    config = tiny_config()
    g, params, *_ = random_graph(rng, config)
    lg = encode(g, params, None)
    for i in range(g.nodes.rows):
        row = encode(
            EncodedGraph(
                nodes=Tensor(g.nodes.value[i:i + 1]),
                senders=np.empty(0, dtype=np.int64),
                receivers=np.empty(0, dtype=np.int64),
                edges=Tensor(np.zeros((0, config.edge_feature_width))),
            ),
            params,
            None,
        ).nodes.value
        # batched vs single-row GEMM may round the dot products differently
        np.testing.assert_allclose(lg.nodes.value[i], row[0], atol=1e-12)


# --- process_step ---------------------------------------------------------------


def identity_like_step_mlps():
    """Hand-set single-layer MLPs: msg = e + v_r - v_s, update = agg + v."""
    eye = np.eye(2)
    w_edge = np.concatenate([eye, eye, -eye], axis=0)    # (6, 2)
    w_node = np.concatenate([eye, eye], axis=0)          # (4, 2)
    edge_mlp = MlpParams([(Tensor(w_edge), Tensor(np.zeros((1, 2))))])
    node_mlp = MlpParams([(Tensor(w_node), Tensor(np.zeros((1, 2))))])
    return edge_mlp, node_mlp


def test_process_step_zero_mlps_is_identity():
    rng = np.random.default_rng(2)
    w_e = MlpParams([(Tensor(np.zeros((6, 2))), Tensor(np.zeros((1, 2))))])
    w_n = MlpParams([(Tensor(np.zeros((4, 2))), Tensor(np.zeros((1, 2))))])
    lg = LatentGraph(
        nodes=Tensor(rng.standard_normal((3, 2))),
        edges=Tensor(rng.standard_normal((4, 2))),
        senders=np.array([0, 1, 2, 0]),
        receivers=np.array([1, 0, 0, 2]),
    )
    out = process_step(lg, w_e, w_n, None, residual=True)
    assert np.array_equal(out.nodes.value, lg.nodes.value)
    assert np.array_equal(out.edges.value, lg.edges.value)


def test_process_step_hand_computed_width_two():
    edge_mlp, node_mlp = identity_like_step_mlps()
    lg = LatentGraph(
        nodes=Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])),
        edges=Tensor(np.array([[0.5, 0.5], [0.25, 0.25]])),
        senders=np.array([1, 0]),
        receivers=np.array([0, 1]),
    )
    out = process_step(lg, edge_mlp, node_mlp, None, residual=True)
    # edge 0 (s=1, r=0): msg = e + v0 - v1 = [-1.5, -1.5]; e' = [-1, -1]
    # edge 1 (s=0, r=1): msg = e + v1 - v0 = [2.25, 2.25]; e' = [2.5, 2.5]
    np.testing.assert_allclose(out.edges.value, [[-1.0, -1.0], [2.5, 2.5]])
    # v0' = v0 + (agg0 + v0) = [1,2] + [0,1];  v1' = v1 + (agg1 + v1)
    np.testing.assert_allclose(out.nodes.value, [[1.0, 3.0], [8.5, 10.5]])


def test_process_step_isolated_node_gets_zero_aggregate():
    edge_mlp, node_mlp = identity_like_step_mlps()
    # node 2 has no incoming edges; with update = agg + v its new latent
    # is exactly v + (0 + v) = 2v.
    lg = LatentGraph(
        nodes=Tensor(np.array([[1.0, 1.0], [2.0, 2.0], [5.0, -1.0]])),
        edges=Tensor(np.array([[0.0, 0.0], [0.0, 0.0]])),
        senders=np.array([1, 0]),
        receivers=np.array([0, 1]),
    )
    out = process_step(lg, edge_mlp, node_mlp, None, residual=True)
    np.testing.assert_allclose(out.nodes.value[2], [10.0, -2.0])


def test_process_step_superposition_split_edge():
    # One edge carrying the sum of two latents aggregates identically to
    # two parallel edges carrying the parts.
    edge_mlp, node_mlp = identity_like_step_mlps()
    a, b = np.array([0.3, -0.2]), np.array([0.1, 0.4])
    nodes = np.array([[1.0, 2.0], [3.0, 4.0]])
    merged = LatentGraph(
        nodes=Tensor(nodes.copy()),
        edges=Tensor((a + b)[None, :] / 1.0),
        senders=np.array([1]),
        receivers=np.array([0]),
    )
    # With residual off and msg = e + v_r - v_s, aggregation is linear in e;
    # the first split edge pre-subtracts the v_r - v_s carried by the second.
    split = LatentGraph(
        nodes=Tensor(nodes.copy()),
        edges=Tensor(np.stack([a - nodes[0] + nodes[1], b])),
        senders=np.array([1, 1]),
        receivers=np.array([0, 0]),
    )
    out_merged = process_step(merged, edge_mlp, node_mlp, None, residual=False)
    out_split = process_step(split, edge_mlp, node_mlp, None, residual=False)
    np.testing.assert_allclose(
        out_merged.nodes.value[0], out_split.nodes.value[0], atol=1e-12
    )


# --- decode ---------------------------------------------------------------------


def test_decode_zero_weights_emits_bias():
    config = tiny_config()
    params = init_model_params(config, 3)
    for w, b in params.decoder.layers:
        w.value[:] = 0.0
        b.value[:] = 0.0
    params.decoder.layers[-1][1].value[:] = [0.7, -0.3]
    lg = LatentGraph(
        nodes=Tensor(np.random.default_rng(4).standard_normal((5, 16))),
        edges=Tensor(np.zeros((0, 16))),
        senders=np.empty(0, dtype=np.int64),
        receivers=np.empty(0, dtype=np.int64),
    )
    out = decode(lg, params, None)
    np.testing.assert_allclose(out.value, np.tile([0.7, -0.3], (5, 1)))


def test_decode_empty_graph():
    config = tiny_config()
    params = init_model_params(config, 5)
    lg = LatentGraph(
        nodes=Tensor(np.zeros((0, 16))),
        edges=Tensor(np.zeros((0, 16))),
        senders=np.empty(0, dtype=np.int64),
        receivers=np.empty(0, dtype=np.int64),
    )
    assert decode(lg, params, None).shape == (0, 2)


def test_decode_matches_per_row_oracle():
    rng = np.random.default_rng(6)
    config = tiny_config()
    params = init_model_params(config, 7)
    latents = rng.standard_normal((4, 16))
    lg = LatentGraph(
        nodes=Tensor(latents),
        edges=Tensor(np.zeros((0, 16))),
        senders=np.empty(0, dtype=np.int64),
        receivers=np.empty(0, dtype=np.int64),
    )
    out = decode(lg, params, None).value
    for i in range(4):
        h = latents[i:i + 1]
        for j, (w, b) in enumerate(params.decoder.layers):
            h = h @ w.value + b.value
            if j < len(params.decoder.layers) - 1:
                h = np.maximum(h, 0.0)
        np.testing.assert_allclose(out[i], h[0], atol=1e-12)


# --- predict --------------------------------------------------------------------


def test_predict_permutation_equivariant_bitwise():
    rng = np.random.default_rng(7)
    config = tiny_config()
    g, params, *_ = random_graph(rng, config, n=8)
    perm = rng.permutation(8)
    inv = np.argsort(perm)
    permuted = EncodedGraph(
        nodes=Tensor(g.nodes.value[perm]),
        senders=inv[g.senders],
        receivers=inv[g.receivers],
        edges=Tensor(g.edges.value.copy()),
    )
    out = predict(g, params, None).value
    out_perm = predict(permuted, params, None).value
    assert np.array_equal(out_perm, out[perm])


def test_predict_zero_steps_skips_processor():
    rng = np.random.default_rng(8)
    config = tiny_config()
    g, params, *_ = random_graph(rng, config)
    direct = decode(encode(g, params, None), params, None).value
    assert np.array_equal(predict(g, params, None, steps=0).value, direct)


def test_predict_deterministic():
    rng = np.random.default_rng(9)
    config = tiny_config()
    g, params, *_ = random_graph(rng, config)
    assert np.array_equal(predict(g, params, None).value,
                          predict(g, params, None).value)


def test_predict_with_global_context():
    rng = np.random.default_rng(10)
    config = tiny_config(global_width=3)
    params = init_model_params(config, 11)
    meta = make_meta(radius=0.25)
    inputs = 0.1 + 0.8 * rng.random((6, 5, 2))
    types = rng.integers(0, 3, size=5)
    g = build_graph(inputs, types, meta, params.type_embedding, None)
    g.u = Tensor(rng.standard_normal((1, 3)))
    out = predict(g, params, None)
    assert out.shape == (5, 2)
    g.u = Tensor(rng.standard_normal((1, 3)))
    assert not np.array_equal(out.value, predict(g, params, None).value)


# --- euler_update ---------------------------------------------------------------


def test_euler_inertial_continuation():
    meta = make_meta()
    out = euler_update(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]),
                       np.zeros((1, 2)), meta)
    np.testing.assert_array_equal(out, [[2.0, 0.0]])


def test_euler_hand_arithmetic():
    meta = make_meta()
    # denormalized a = 1 (std 1, mean 0), v = 1 -> v' = 2, x' = 3
    out = euler_update(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]),
                       np.array([[1.0, 0.0]]), meta)
    assert out[0, 0] == pytest.approx(3.0)


def test_euler_denormalizes_with_statistics():
    meta = make_meta(acc_mean=[0.5, -0.5], acc_std=[2.0, 4.0])
    out = euler_update(np.zeros((1, 2)), np.zeros((1, 2)),
                       np.array([[1.0, 1.0]]), meta)
    np.testing.assert_allclose(out, [[2.5, 3.5]])


def test_euler_inverts_target_acceleration():
    rng = np.random.default_rng(11)
    meta = make_meta(
        acc_mean=rng.normal(size=2) * 1e-4,
        acc_std=rng.uniform(0.5, 2.0, size=2) * 1e-3,
    )
    for _ in range(50):
        inputs = rng.random((6, 4, 2))
        target = rng.random((4, 2))
        a_norm = target_acceleration(inputs, target, meta)
        recovered = euler_update(inputs[-1], inputs[-2], a_norm, meta)
        np.testing.assert_allclose(recovered, target, atol=1e-10)


def test_euler_shape_mismatch():
    meta = make_meta()
    with pytest.raises(ValueError):
        euler_update(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 2)), meta)


# --- rollout --------------------------------------------------------------------


def test_rollout_single_step_equals_predict_plus_euler():
    rng = np.random.default_rng(12)
    config = tiny_config()
    g, params, inputs, types, meta = random_graph(rng, config)
    frames = rollout(inputs, types, params, meta, 1)
    a_norm = predict(g, params, None).value
    expected = np.clip(
        euler_update(inputs[-1], inputs[-2], a_norm, meta),
        meta.bounds[:, 0], meta.bounds[:, 1],
    )
    np.testing.assert_array_equal(frames[:6], inputs)
    np.testing.assert_array_equal(frames[6], expected)


def test_rollout_zero_network_follows_mean_acceleration():
    # Zero-initialized model predicts normalized a = 0, i.e. denormalized
    # a = acc_mean every step: x_{t+1} = 2 x_t - x_{t-1} + acc_mean.
    config = tiny_config(layer_norm=False)
    params = zero_params(config)
    meta = make_meta(
        bounds=[[0.0, 100.0], [0.0, 100.0]],
        acc_mean=[1e-4, -2e-4],
        acc_std=[1e-3, 1e-3],
    )
    drift = np.array([0.003, 0.001])
    start = np.array([50.0, 50.0])
    inputs = np.stack([[start + k * drift] for k in range(6)])
    frames = rollout(inputs, np.array([0]), params, meta, 20)
    x_prev, x_t = inputs[-2, 0], inputs[-1, 0]
    for k in range(20):
        x_next = 2.0 * x_t - x_prev + meta.acc_mean
        np.testing.assert_allclose(frames[6 + k, 0], x_next, atol=1e-12)
        x_prev, x_t = x_t, x_next


def test_rollout_zero_steps_returns_inputs():
    rng = np.random.default_rng(13)
    config = tiny_config()
    _, params, inputs, types, meta = random_graph(rng, config)
    frames = rollout(inputs, types, params, meta, 0)
    np.testing.assert_array_equal(frames, inputs)


def test_rollout_clamps_to_bounds():
    config = tiny_config(layer_norm=False)
    params = zero_params(config)
    meta = make_meta(acc_mean=[0.0, 0.0], acc_std=[1.0, 1.0])
    # strong constant drift marches the particle into the high wall
    drift = np.array([0.2, 0.0])
    inputs = np.stack([[np.array([0.2, 0.5]) + k * drift] for k in range(6)])
    inputs = np.clip(inputs, 0.1, 0.9)
    frames = rollout(inputs, np.array([0]), params, meta, 10)
    assert frames.max() <= 0.9 and frames.min() >= 0.1
    assert frames[-1, 0, 0] == 0.9


def test_rollout_reports_nonfinite_step():
    rng = np.random.default_rng(14)
    config = tiny_config()
    _, params, inputs, types, meta = random_graph(rng, config)
    params.decoder.layers[-1][1].value[:] = np.inf
    with pytest.raises(RolloutError, match="step 0"):
        rollout(inputs, types, params, meta, 3)


def test_rollout_wrong_window_length():
    rng = np.random.default_rng(15)
    config = tiny_config()
    _, params, inputs, types, meta = random_graph(rng, config)
    with pytest.raises(ValueError, match="6"):
        rollout(inputs[:4], types, params, meta, 1)
