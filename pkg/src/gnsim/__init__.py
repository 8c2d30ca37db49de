"""Learned particle-dynamics simulation: train a graph network on particle
trajectories and roll out new trajectories with semi-implicit Euler updates."""

from .autodiff import Tape, Tensor, backward, gather_rows, scatter_sum
from .dataset import (
    INPUT_SEQUENCE_LENGTH,
    CodecError,
    Metadata,
    MetadataError,
    Trajectory,
    TrajectorySet,
    TrainingWindow,
    compute_statistics,
    enumerate_windows,
    read_metadata,
    read_npz,
    write_metadata,
    write_npz,
)
from .graph import EncodedGraph, build_graph, edge_features, node_features, radius_graph
from .graph import target_acceleration
from .model import (
    ModelConfig,
    ModelParams,
    RolloutError,
    decode,
    encode,
    euler_update,
    init_model_params,
    predict,
    process_step,
    rollout,
)
from .nn import AdamState, MlpParams, adam_step, mlp_forward, mlp_init
from .reference import ConfigError, GeneratorConfig, generate_reference
from .training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainEvent,
    batch_gradients,
    ddp_train,
    inject_noise,
    load_checkpoint,
    loss,
    one_step_errors,
    save_checkpoint,
    train_step,
    window_loss,
)
from .vtk import write_vtk, write_vtk_series

__version__ = "0.1.0"
