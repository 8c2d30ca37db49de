"""Graph construction: cell-list connectivity vs brute force, feature layouts."""

import numpy as np
import pytest

from gnsim.autodiff import Tensor
from gnsim.dataset import Metadata
from gnsim.graph import (
    build_graph,
    edge_features,
    node_features,
    radius_graph,
    target_acceleration,
)


def brute_force_edges(positions, radius, include_self=False):
    """All-pairs reference for the fixed-radius graph, same ordering."""
    positions = np.asarray(positions, dtype=np.float64)
    delta = positions[:, None, :] - positions[None, :, :]
    within = (delta * delta).sum(axis=2) <= radius * radius
    if not include_self:
        np.fill_diagonal(within, False)
    receivers, senders = np.nonzero(within)
    return senders.astype(np.int64), receivers.astype(np.int64)


def make_meta(dim=2, radius=0.015, vel_mean=None, vel_std=None,
              acc_mean=None, acc_std=None, bounds=None):
    return Metadata(
        bounds=np.array([[0.1, 0.9]] * dim) if bounds is None else np.asarray(bounds),
        sequence_length=100,
        default_connectivity_radius=radius,
        dim=dim,
        dt=0.0025,
        vel_mean=np.zeros(dim) if vel_mean is None else np.asarray(vel_mean),
        vel_std=np.ones(dim) if vel_std is None else np.asarray(vel_std),
        acc_mean=np.zeros(dim) if acc_mean is None else np.asarray(acc_mean),
        acc_std=np.ones(dim) if acc_std is None else np.asarray(acc_std),
    )


# --- radius_graph ---------------------------------------------------------------


def test_radius_graph_three_point_hand_case():
    positions = np.array([[0.0, 0.0], [0.01, 0.0], [0.5, 0.0]])
    senders, receivers = radius_graph(positions, 0.015)
    assert set(zip(senders, receivers)) == {(0, 1), (1, 0)}


def test_radius_graph_single_particle_empty():
    senders, receivers = radius_graph(np.array([[0.3, 0.3]]), 0.015)
    assert senders.size == 0 and receivers.size == 0


def test_radius_graph_matches_brute_force_1000_points():
    rng = np.random.default_rng(0)
    positions = rng.random((1000, 2))
    senders, receivers = radius_graph(positions, 0.05)
    bf_senders, bf_receivers = brute_force_edges(positions, 0.05)
    np.testing.assert_array_equal(senders, bf_senders)
    np.testing.assert_array_equal(receivers, bf_receivers)


def test_radius_graph_tie_at_radius_counts():
    positions = np.array([[0.0, 0.0], [0.015, 0.0]])
    senders, receivers = radius_graph(positions, 0.015)
    assert set(zip(senders, receivers)) == {(0, 1), (1, 0)}


def test_radius_graph_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(10):
        positions = rng.random((rng.integers(2, 80), 2))
        senders, receivers = radius_graph(positions, 0.12)
        edges = set(zip(senders.tolist(), receivers.tolist()))
        assert all((r, s) in edges for s, r in edges)
        assert all(s != r for s, r in edges)


def test_radius_graph_sorted_by_receiver_then_sender():
    rng = np.random.default_rng(2)
    positions = rng.random((60, 2))
    senders, receivers = radius_graph(positions, 0.2)
    keys = list(zip(receivers.tolist(), senders.tolist()))
    assert keys == sorted(keys)


def test_radius_graph_include_self():
    positions = np.array([[0.2, 0.2], [0.8, 0.8]])
    senders, receivers = radius_graph(positions, 0.01, include_self=True)
    assert set(zip(senders, receivers)) == {(0, 0), (1, 1)}


def test_radius_graph_cell_list_equivalence_random_sizes():
    rng = np.random.default_rng(3)
    for _ in range(25):
        n = int(rng.integers(1, 400))
        dim = int(rng.choice([2, 3]))
        positions = rng.random((n, dim)) * rng.uniform(0.5, 3.0)
        radius = float(rng.uniform(0.02, 0.3))
        senders, receivers = radius_graph(positions, radius)
        bf_s, bf_r = brute_force_edges(positions, radius)
        np.testing.assert_array_equal(senders, bf_s)
        np.testing.assert_array_equal(receivers, bf_r)


def test_radius_graph_rejects_bad_inputs():
    with pytest.raises(ValueError):
        radius_graph(np.zeros((3, 2)), 0.0)
    with pytest.raises(ValueError):
        radius_graph(np.array([[np.nan, 0.0]]), 0.1)


# --- node_features --------------------------------------------------------------


def test_node_features_normalization_identity_and_saturated_walls():
    # Constant drift equal to vel_mean -> zero velocity block; particle at
    # the box center, further than R from every wall -> boundary block +1.
    meta = make_meta(vel_mean=[0.001, -0.002], vel_std=[0.01, 0.02])
    drift = np.array([0.001, -0.002])
    inputs = np.stack([[np.array([0.5, 0.5]) + k * drift] for k in range(6)])
    embed = Tensor(np.zeros((1, 4)))
    out = node_features(inputs, np.array([0]), meta, embed, None).value
    assert out.shape == (1, 5 * 2 + 2 * 2 + 4)
    np.testing.assert_allclose(out[0, :10], 0.0, atol=1e-12)
    np.testing.assert_array_equal(out[0, 10:14], [1.0, 1.0, 1.0, 1.0])


def test_node_features_wall_distance_half_radius():
    meta = make_meta(radius=0.015)
    x = np.array([0.1 + 0.0075, 0.5])     # R/2 from the low wall of dim 0
    inputs = np.broadcast_to(x, (6, 1, 2)).copy()
    embed = Tensor(np.zeros((1, 4)))
    out = node_features(inputs, np.array([0]), meta, embed, None).value
    assert out[0, 10] == pytest.approx(0.5)    # low wall, dim 0
    assert out[0, 11] == 1.0                   # high wall, dim 0, saturated


def test_node_features_match_straight_line_recomputation():
    rng = np.random.default_rng(4)
    meta = make_meta(
        vel_mean=rng.normal(size=2) * 1e-3,
        vel_std=rng.uniform(0.5, 2.0, size=2) * 1e-2,
    )
    n = 7
    inputs = 0.1 + 0.8 * rng.random((6, n, 2))
    types = rng.integers(0, 3, size=n)
    embed = Tensor(rng.standard_normal((3, 5)))
    out = node_features(inputs, types, meta, embed, None).value

    R = meta.default_connectivity_radius
    for i in range(n):
        row = []
        for t in range(5):
            v = inputs[t + 1, i] - inputs[t, i]
            row.extend((v - meta.vel_mean) / meta.vel_std)
        for d in range(2):
            low = np.clip((inputs[-1, i, d] - meta.bounds[d, 0]) / R, -1, 1)
            high = np.clip((meta.bounds[d, 1] - inputs[-1, i, d]) / R, -1, 1)
            row.extend([low, high])
        row.extend(embed.value[types[i]])
        np.testing.assert_allclose(out[i], row, atol=1e-12)


def test_node_features_unknown_type_rejected():
    meta = make_meta()
    inputs = np.full((6, 1, 2), 0.5)
    embed = Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError, match="type"):
        node_features(inputs, np.array([5]), meta, embed, None)


# --- edge_features --------------------------------------------------------------


def test_edge_features_coincident_particles():
    positions = np.array([[0.3, 0.3], [0.3, 0.3]])
    out = edge_features(positions, np.array([0]), np.array([1]), 0.015).value
    np.testing.assert_array_equal(out, [[0.0, 0.0, 0.0]])


def test_edge_features_at_exact_radius_norm_one():
    positions = np.array([[0.0, 0.0], [0.015, 0.0]])
    out = edge_features(positions, np.array([1]), np.array([0]), 0.015).value
    np.testing.assert_allclose(out, [[1.0, 0.0, 1.0]], atol=1e-14)


def test_edge_features_match_brute_force_distances():
    rng = np.random.default_rng(5)
    positions = rng.random((200, 2))
    radius = 0.08
    senders, receivers = radius_graph(positions, radius)
    out = edge_features(positions, senders, receivers, radius).value
    assert out.shape == (senders.size, 3)
    assert (out[:, 2] <= 1.0 + 1e-12).all()
    for k in range(senders.size):
        disp = (positions[senders[k]] - positions[receivers[k]]) / radius
        np.testing.assert_allclose(out[k, :2], disp, atol=1e-14)
        np.testing.assert_allclose(out[k, 2], np.linalg.norm(disp), atol=1e-12)


def test_edge_features_empty_graph():
    out = edge_features(np.zeros((3, 2)), np.empty(0, dtype=np.int64),
                        np.empty(0, dtype=np.int64), 0.1)
    assert out.shape == (0, 3)


# --- target_acceleration --------------------------------------------------------


def test_target_second_difference_hand_case():
    meta = make_meta()
    inputs = np.zeros((6, 1, 2))
    inputs[-2, 0, 0] = 0.0
    inputs[-1, 0, 0] = 1.0
    target = np.array([[3.0, 0.0]])
    out = target_acceleration(inputs, target, meta)
    assert out[0, 0] == pytest.approx(3.0 - 2.0 * 1.0 + 0.0)


def test_target_constant_velocity_gives_negative_mean_over_std():
    meta = make_meta(acc_mean=[0.25, -0.5], acc_std=[0.5, 2.0])
    drift = np.array([0.01, 0.02])
    inputs = np.stack([[k * drift] for k in range(6)])
    target = 6 * drift[None, :]
    out = target_acceleration(inputs, target, meta)
    np.testing.assert_allclose(out, [-meta.acc_mean / meta.acc_std], atol=1e-12)


def test_target_free_fall_window_equals_gravity_per_step():
    from gnsim.dataset import enumerate_windows
    from gnsim.reference import GeneratorConfig, generate_reference

    g, dt = -1.0, 0.0025
    config = GeneratorConfig(
        num_particles=1, num_steps=20, dt=dt, gravity=(0.0, g),
        initial_speed=0.0, repulsion_stiffness=0.0,
    )
    traj_set, meta = generate_reference(config, seed=0)
    window = enumerate_windows(traj_set)[0]
    raw = (
        target_acceleration(window.inputs, window.target, meta) * meta.acc_std
        + meta.acc_mean
    )
    np.testing.assert_allclose(raw, [[0.0, g * dt * dt]], atol=1e-12)


# --- invariants -----------------------------------------------------------------


def test_features_permutation_equivariant():
    rng = np.random.default_rng(6)
    meta = make_meta(radius=0.2)
    n = 9
    inputs = 0.1 + 0.8 * rng.random((6, n, 2))
    types = rng.integers(0, 3, size=n)
    embed = Tensor(rng.standard_normal((3, 4)))
    perm = rng.permutation(n)

    base = node_features(inputs, types, meta, embed, None).value
    permuted = node_features(inputs[:, perm], types[perm], meta, embed, None).value
    np.testing.assert_array_equal(permuted, base[perm])

    s0, r0 = radius_graph(inputs[-1], 0.2)
    s1, r1 = radius_graph(inputs[-1, perm], 0.2)
    inv = np.argsort(perm)
    relabeled = {(inv[s], inv[r]) for s, r in zip(s0, r0)}
    assert set(zip(s1.tolist(), r1.tolist())) == relabeled


def test_features_translation_invariant_away_from_walls():
    rng = np.random.default_rng(7)
    meta = make_meta(radius=0.015, bounds=[[0.0, 10.0], [0.0, 10.0]])
    inputs = 4.0 + rng.random((6, 5, 2))           # > R from every wall
    shift = np.array([2.0, 1.5])                   # still > R from every wall
    types = np.zeros(5, dtype=np.int64)
    embed = Tensor(rng.standard_normal((1, 4)))

    a = node_features(inputs, types, meta, embed, None).value
    b = node_features(inputs + shift, types, meta, embed, None).value
    np.testing.assert_allclose(a, b, atol=1e-12)

    s, r = radius_graph(inputs[-1], 0.5)
    ea = edge_features(inputs[-1], s, r, 0.5).value
    eb = edge_features(inputs[-1] + shift, s, r, 0.5).value
    np.testing.assert_allclose(ea, eb, atol=1e-12)


def test_build_graph_assembles_consistent_batch():
    rng = np.random.default_rng(8)
    meta = make_meta(radius=0.25)
    inputs = 0.1 + 0.8 * rng.random((6, 6, 2))
    types = rng.integers(0, 2, size=6)
    embed = Tensor(rng.standard_normal((2, 4)))
    g = build_graph(inputs, types, meta, embed, None)
    assert g.nodes.shape == (6, 18)
    assert g.edges.shape == (g.senders.size, 3)
    s, r = radius_graph(inputs[-1], 0.25)
    np.testing.assert_array_equal(g.senders, s)
    np.testing.assert_array_equal(g.receivers, r)
