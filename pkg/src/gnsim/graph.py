"""Turn particle position windows into featurized graphs.

Connectivity is a fixed-radius graph built with a cell list (cells of side
R; only the 3^dim neighboring cells are scanned per particle).  Node
features are normalized velocity history, clipped wall distances, and a
learned type embedding; edge features are relative displacements scaled
by the connectivity radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, concat_cols, gather_rows
from .dataset import Metadata


@dataclass
class EncodedGraph:
    """Featurized particle graph ready for the network.

    Connectivity is symmetric (both directions of every pair present) and
    free of self-edges unless explicitly requested.  Edge k runs from
    senders[k] to receivers[k].  ``u`` is an optional global feature row
    shared by every node and edge; None means no global context.
    """

    nodes: Tensor                 # (n, d_v)
    senders: np.ndarray           # (E,) int64
    receivers: np.ndarray         # (E,) int64
    edges: Tensor                 # (E, d_e)
    u: Tensor | None = None


def radius_graph(
    positions: np.ndarray, radius: float, include_self: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Directed edges (i, j) for every pair with ||x_i - x_j|| <= radius.

    Ties at exactly the radius count as connected.  Output is sorted by
    (receiver, sender) so the edge order is deterministic.
    """
    if radius <= 0.0:
        raise ValueError(f"radius must be positive, got {radius}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2:
        raise ValueError(f"positions must be (n, dim), got {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    n, dim = positions.shape

    cells = np.floor(positions / radius).astype(np.int64).tolist()
    buckets: dict[tuple, list[int]] = {}
    for i, key in enumerate(map(tuple, cells)):
        buckets.setdefault(key, []).append(i)

    offsets = np.stack(
        np.meshgrid(*([np.arange(-1, 2)] * dim), indexing="ij"), axis=-1
    ).reshape(-1, dim).tolist()

    r2 = radius * radius
    senders_parts, receivers_parts = [], []
    for key, members in buckets.items():
        candidates = []
        for off in offsets:
            neighbor = buckets.get(tuple(k + o for k, o in zip(key, off)))
            if neighbor:
                candidates.extend(neighbor)
        cand = np.asarray(candidates, dtype=np.int64)
        recv = np.asarray(members, dtype=np.int64)
        delta = positions[recv][:, None, :] - positions[cand][None, :, :]
        within = (delta * delta).sum(axis=2) <= r2
        if not include_self:
            within &= recv[:, None] != cand[None, :]
        ri, ci = np.nonzero(within)
        receivers_parts.append(recv[ri])
        senders_parts.append(cand[ci])

    if senders_parts:
        senders = np.concatenate(senders_parts)
        receivers = np.concatenate(receivers_parts)
    else:
        senders = np.empty(0, dtype=np.int64)
        receivers = np.empty(0, dtype=np.int64)
    order = np.lexsort((senders, receivers))
    return senders[order], receivers[order]


def node_features(
    input_positions: np.ndarray,
    types: np.ndarray,
    meta: Metadata,
    type_embedding: Tensor,
    tape: Tape | None,
    radius: float | None = None,
) -> Tensor:
    """Per-particle feature rows from a window of input positions.

    Layout per particle: the 5 normalized finite-difference velocities in
    time order (oldest first), then per dimension the distances to the
    low and high walls divided by R and clipped to [-1, 1], then the type
    embedding row.  Only the embedding block is differentiable.
    """
    input_positions = np.asarray(input_positions, dtype=np.float64)
    steps, n, dim = input_positions.shape
    if steps < 2:
        raise ValueError(f"need at least 2 input positions, got {steps}")
    types = np.asarray(types, dtype=np.int64)
    if types.size and (types.min() < 0 or types.max() >= type_embedding.rows):
        raise ValueError(
            f"particle type out of embedding range [0, {type_embedding.rows}): "
            f"min {types.min()}, max {types.max()}"
        )
    if radius is None:
        radius = meta.default_connectivity_radius

    vel = np.diff(input_positions, axis=0)                 # (steps-1, n, dim)
    vel = (vel - meta.vel_mean) / meta.vel_std
    vel_flat = vel.transpose(1, 0, 2).reshape(n, (steps - 1) * dim)

    latest = input_positions[-1]                           # (n, dim)
    low, high = meta.bounds[:, 0], meta.bounds[:, 1]
    walls = np.empty((n, 2 * dim))
    walls[:, 0::2] = (latest - low) / radius
    walls[:, 1::2] = (high - latest) / radius
    np.clip(walls, -1.0, 1.0, out=walls)

    const_block = Tensor(np.concatenate([vel_flat, walls], axis=1))
    embed_rows = gather_rows(type_embedding, types, tape)
    return concat_cols([const_block, embed_rows], tape)


def edge_features(
    positions: np.ndarray,
    senders: np.ndarray,
    receivers: np.ndarray,
    radius: float,
) -> Tensor:
    """Relative sender-to-receiver displacements and norms, scaled by R."""
    positions = np.asarray(positions, dtype=np.float64)
    disp = (positions[senders] - positions[receivers]) / radius
    norm = np.sqrt((disp * disp).sum(axis=1, keepdims=True))
    return Tensor(np.concatenate([disp, norm], axis=1))


def target_acceleration(
    inputs: np.ndarray, target: np.ndarray, meta: Metadata
) -> np.ndarray:
    """Normalized second position difference the model should predict.

    Raw acceleration is target - 2*x_t + x_{t-1} in per-step units, over
    the last two input positions and the target position.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    raw = target - 2.0 * inputs[-1] + inputs[-2]
    return (raw - meta.acc_mean) / meta.acc_std


def build_graph(
    input_positions: np.ndarray,
    types: np.ndarray,
    meta: Metadata,
    type_embedding: Tensor,
    tape: Tape | None,
    radius: float | None = None,
    include_self: bool = False,
) -> EncodedGraph:
    """Connectivity plus node and edge features for one position window."""
    if radius is None:
        radius = meta.default_connectivity_radius
    latest = np.asarray(input_positions, dtype=np.float64)[-1]
    senders, receivers = radius_graph(latest, radius, include_self=include_self)
    nodes = node_features(
        input_positions, types, meta, type_embedding, tape, radius=radius
    )
    edges = edge_features(latest, senders, receivers, radius)
    return EncodedGraph(nodes=nodes, senders=senders, receivers=receivers, edges=edges)
