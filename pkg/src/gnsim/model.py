"""Encoder-processor-decoder network over particle graphs, plus the integrator.

The network predicts one normalized acceleration per particle: node and
edge features are embedded into a latent graph, refined by M rounds of
learned message passing (edge update, sum-aggregation by receiver, node
update, residual on both), and decoded per node.  ``euler_update`` turns
predicted accelerations back into positions and ``rollout`` iterates the
whole pipeline autoregressively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    broadcast_rows,
    concat_cols,
    gather_rows,
    scatter_sum,
)
from .dataset import Metadata
from .graph import EncodedGraph, build_graph
from .nn import MlpParams, mlp_forward, mlp_init


class RolloutError(RuntimeError):
    """A rollout produced a non-finite prediction."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; all widths chain consistently."""

    dim: int = 2
    latent_width: int = 128
    mlp_hidden_width: int = 128
    mlp_hidden_layers: int = 2
    message_passing_steps: int = 10
    num_particle_types: int = 8
    type_embedding_width: int = 16
    input_positions: int = 6
    global_width: int = 0
    residual: bool = True
    layer_norm: bool = True
    activation: str = "relu"

    @property
    def node_feature_width(self) -> int:
        return (self.input_positions - 1) * self.dim + 2 * self.dim \
            + self.type_embedding_width

    @property
    def edge_feature_width(self) -> int:
        return self.dim + 1

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "latent_width": self.latent_width,
            "mlp_hidden_width": self.mlp_hidden_width,
            "mlp_hidden_layers": self.mlp_hidden_layers,
            "message_passing_steps": self.message_passing_steps,
            "num_particle_types": self.num_particle_types,
            "type_embedding_width": self.type_embedding_width,
            "input_positions": self.input_positions,
            "global_width": self.global_width,
            "residual": self.residual,
            "layer_norm": self.layer_norm,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Every learnable array: encoders, per-step processor MLPs, decoder,
    and the particle-type embedding table."""

    config: ModelConfig
    node_encoder: MlpParams
    edge_encoder: MlpParams
    edge_mlps: list[MlpParams]        # one per message-passing step
    node_mlps: list[MlpParams]
    decoder: MlpParams
    type_embedding: Tensor

    def flatten(self) -> list[Tensor]:
        """Canonical parameter order; checkpoints and Adam rely on it."""
        out = self.node_encoder.tensors() + self.edge_encoder.tensors()
        for e_mlp, n_mlp in zip(self.edge_mlps, self.node_mlps):
            out += e_mlp.tensors() + n_mlp.tensors()
        out += self.decoder.tensors()
        out.append(self.type_embedding)
        return out

    def num_parameters(self) -> int:
        return sum(t.value.size for t in self.flatten())

    def copy(self) -> "ModelParams":
        """Deep copy of all parameter arrays; the config is shared."""

        def copy_mlp(m: MlpParams) -> MlpParams:
            return MlpParams(
                [(Tensor(w.value.copy()), Tensor(b.value.copy()))
                 for w, b in m.layers],
                activation=m.activation,
                output_layer_norm=m.output_layer_norm,
            )

        return ModelParams(
            config=self.config,
            node_encoder=copy_mlp(self.node_encoder),
            edge_encoder=copy_mlp(self.edge_encoder),
            edge_mlps=[copy_mlp(m) for m in self.edge_mlps],
            node_mlps=[copy_mlp(m) for m in self.node_mlps],
            decoder=copy_mlp(self.decoder),
            type_embedding=Tensor(self.type_embedding.value.copy()),
        )


@dataclass
class LatentGraph:
    nodes: Tensor                 # (n, latent_width)
    edges: Tensor                 # (E, latent_width)
    senders: np.ndarray
    receivers: np.ndarray
    u: Tensor | None = None


def _mlp_widths(cfg: ModelConfig, d_in: int, d_out: int) -> list[int]:
    return [d_in] + [cfg.mlp_hidden_width] * cfg.mlp_hidden_layers + [d_out]


def init_model_params(config: ModelConfig, seed: int) -> ModelParams:
    """Randomly initialized parameters; deterministic for a given seed."""
    if config.message_passing_steps < 0:
        raise ValueError("message_passing_steps must be >= 0")
    rng = np.random.default_rng(seed)
    L = config.latent_width
    u = config.global_width

    def make(d_in, d_out, norm):
        return mlp_init(
            _mlp_widths(config, d_in, d_out),
            rng,
            activation=config.activation,
            output_layer_norm=norm,
        )

    node_encoder = make(config.node_feature_width, L, config.layer_norm)
    edge_encoder = make(config.edge_feature_width, L, config.layer_norm)
    edge_mlps = [
        make(3 * L + u, L, config.layer_norm)
        for _ in range(config.message_passing_steps)
    ]
    node_mlps = [
        make(2 * L + u, L, config.layer_norm)
        for _ in range(config.message_passing_steps)
    ]
    decoder = make(L, config.dim, False)
    type_embedding = Tensor(
        rng.normal(0.0, 0.01, size=(config.num_particle_types,
                                    config.type_embedding_width))
    )
    return ModelParams(
        config=config,
        node_encoder=node_encoder,
        edge_encoder=edge_encoder,
        edge_mlps=edge_mlps,
        node_mlps=node_mlps,
        decoder=decoder,
        type_embedding=type_embedding,
    )


def encode(g: EncodedGraph, params: ModelParams, tape: Tape | None) -> LatentGraph:
    """Embed node and edge features into the latent graph."""
    return LatentGraph(
        nodes=mlp_forward(params.node_encoder, g.nodes, tape),
        edges=mlp_forward(params.edge_encoder, g.edges, tape),
        senders=g.senders,
        receivers=g.receivers,
        u=g.u,
    )


def process_step(
    lg: LatentGraph,
    edge_mlp: MlpParams,
    node_mlp: MlpParams,
    tape: Tape | None,
    residual: bool = True,
) -> LatentGraph:
    """One message-passing round: edge update, receiver-sum, node update.

    Edge input is (edge latent, receiver latent, sender latent, global);
    aggregated messages are summed by superposition; node input is
    (aggregate, node latent, global).  Residual connections add the
    previous latents to both updates.
    """
    n = lg.nodes.rows
    e = lg.edges.rows
    edge_parts = [
        lg.edges,
        gather_rows(lg.nodes, lg.receivers, tape),
        gather_rows(lg.nodes, lg.senders, tape),
    ]
    if lg.u is not None:
        edge_parts.append(broadcast_rows(lg.u, e, tape))
    msg = mlp_forward(edge_mlp, concat_cols(edge_parts, tape), tape)
    new_edges = add(lg.edges, msg, tape) if residual else msg

    aggregated = scatter_sum(new_edges, lg.receivers, n, tape)
    node_parts = [aggregated, lg.nodes]
    if lg.u is not None:
        node_parts.append(broadcast_rows(lg.u, n, tape))
    update = mlp_forward(node_mlp, concat_cols(node_parts, tape), tape)
    new_nodes = add(lg.nodes, update, tape) if residual else update

    return LatentGraph(
        nodes=new_nodes,
        edges=new_edges,
        senders=lg.senders,
        receivers=lg.receivers,
        u=lg.u,
    )


def decode(lg: LatentGraph, params: ModelParams, tape: Tape | None) -> Tensor:
    """Per-node normalized acceleration; unconstrained output, no layer norm."""
    return mlp_forward(params.decoder, lg.nodes, tape)


def predict(
    g: EncodedGraph,
    params: ModelParams,
    tape: Tape | None,
    steps: int | None = None,
) -> Tensor:
    """Full forward pass: encode, M processor rounds, decode."""
    if steps is None:
        steps = params.config.message_passing_steps
    if steps > params.config.message_passing_steps:
        raise ValueError(
            f"requested {steps} message-passing steps but params hold "
            f"{params.config.message_passing_steps}"
        )
    lg = encode(g, params, tape)
    for m in range(steps):
        lg = process_step(
            lg,
            params.edge_mlps[m],
            params.node_mlps[m],
            tape,
            residual=params.config.residual,
        )
    return decode(lg, params, tape)


def euler_update(
    x_t: np.ndarray,
    x_prev: np.ndarray,
    accel_norm: np.ndarray,
    meta: Metadata,
) -> np.ndarray:
    """Semi-implicit Euler step in per-step units.

    The normalized acceleration is denormalized with the metadata
    statistics; velocity updates first, position moves with the updated
    velocity.  dt is folded into the statistics, so no dt appears here.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    accel_norm = np.asarray(accel_norm, dtype=np.float64)
    if x_t.shape != x_prev.shape or x_t.shape != accel_norm.shape:
        raise ValueError(
            f"euler_update shape mismatch: {x_t.shape}, {x_prev.shape}, "
            f"{accel_norm.shape}"
        )
    accel = accel_norm * meta.acc_std + meta.acc_mean
    velocity = x_t - x_prev
    velocity = velocity + accel
    return x_t + velocity


def rollout(
    initial_positions: np.ndarray,
    types: np.ndarray,
    params: ModelParams,
    meta: Metadata,
    num_steps: int,
    radius: float | None = None,
) -> np.ndarray:
    """Autoregressive prediction from the first window of positions.

    Each step rebuilds the radius graph and features from the latest
    predicted window, predicts accelerations, integrates, and clamps the
    result to the box bounds.  Returns (window + num_steps, n, dim).
    """
    initial_positions = np.asarray(initial_positions, dtype=np.float64)
    window = params.config.input_positions
    if initial_positions.shape[0] != window:
        raise ValueError(
            f"rollout needs exactly {window} initial positions, "
            f"got {initial_positions.shape[0]}"
        )
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    n, dim = initial_positions.shape[1:]
    low, high = meta.bounds[:, 0], meta.bounds[:, 1]

    frames = np.empty((window + num_steps, n, dim))
    frames[:window] = initial_positions
    for k in range(num_steps):
        current = frames[k:k + window]
        g = build_graph(current, types, meta, params.type_embedding, None,
                        radius=radius)
        accel_norm = predict(g, params, None).value
        if not np.all(np.isfinite(accel_norm)):
            raise RolloutError(f"non-finite prediction at rollout step {k}")
        nxt = euler_update(current[-1], current[-2], accel_norm, meta)
        frames[window + k] = np.clip(nxt, low, high)
    return frames
