"""Training loop: loss, noise injection, data-parallel workers, checkpoints.

Data parallelism uses in-process workers.  Windows are shuffled once by
seed and dealt round-robin to worker shards, so the global batch that W
workers assemble at step t is identical to the batch a single worker with
the same global batch size would take; gradients are averaged in fixed
worker order and every replica applies the same update, which keeps
parameter replicas bitwise identical across worker counts (up to the
documented float tolerance for worker counts that are not powers of two).

Noise streams are counter-based: the generator for a given window is
derived from (seed, step, global slot), never from an evolving per-worker
state.  That makes restarts exact and keeps noise independent of how
windows are spread across workers.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tape, Tensor, backward, mean_all, mul, scale, sub
from .autodiff import add as t_add
from .dataset import Metadata, TrainingWindow, TrajectorySet, enumerate_windows
from .graph import build_graph, target_acceleration
from .model import ModelConfig, ModelParams, init_model_params, predict
from .nn import AdamState, adam_step

CHECKPOINT_MAGIC = b"GNSIMCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, corrupt, or from an incompatible version."""


@dataclass(frozen=True)
class TrainConfig:
    # noise_std must stay small next to the dataset's acceleration scale:
    # the denoising targets it induces otherwise drown the physics signal.
    batch_per_worker: int = 2
    num_workers: int = 1
    lr_init: float = 3e-4
    lr_final: float = 1e-6
    num_steps: int = 1000
    noise_std: float = 1e-4
    checkpoint_interval: int = 500
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.num_workers < 1:
            raise ValueError(f"num_workers must be >= 1, got {self.num_workers}")
        if self.batch_per_worker < 1:
            raise ValueError(f"batch_per_worker must be >= 1, got {self.batch_per_worker}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.noise_std < 0.0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.lr_init <= 0.0 or self.lr_final <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")

    def learning_rate(self, step: int) -> float:
        """Exponential decay from lr_init to lr_final across num_steps."""
        if self.num_steps <= 1:
            return self.lr_init
        frac = min(step, self.num_steps - 1) / (self.num_steps - 1)
        return self.lr_init * (self.lr_final / self.lr_init) ** frac

    def to_dict(self) -> dict:
        return {
            "batch_per_worker": self.batch_per_worker,
            "num_workers": self.num_workers,
            "lr_init": self.lr_init,
            "lr_final": self.lr_final,
            "num_steps": self.num_steps,
            "noise_std": self.noise_std,
            "checkpoint_interval": self.checkpoint_interval,
            "seed": self.seed,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class Checkpoint:
    """Everything needed to continue a run exactly where it stopped."""

    params: ModelParams
    adam: AdamState
    step: int                      # number of completed optimizer steps
    rng_state: dict
    train_config: TrainConfig
    dataset_fingerprint: str


def loss(pred: Tensor, target: np.ndarray, tape: Tape | None) -> Tensor:
    """Mean squared error over every entry of the prediction."""
    target_t = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target_t.shape:
        raise ValueError(f"loss shape mismatch: {pred.shape} vs {target_t.shape}")
    diff = sub(pred, target_t, tape)
    return mean_all(mul(diff, diff, tape), tape)


def inject_noise(
    window: TrainingWindow, noise_std: float, rng: np.random.Generator
) -> TrainingWindow:
    """Random-walk perturbation of the input positions; target untouched.

    Per-step increments are N(0, std/sqrt(k)) for k velocity steps and are
    summed cumulatively, so the final input position is displaced with
    standard deviation ``noise_std``.  std = 0 returns the window as is.
    """
    if noise_std < 0.0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std == 0.0:
        return window
    steps = window.inputs.shape[0]
    increments = rng.normal(
        0.0, noise_std / np.sqrt(steps - 1), size=(steps - 1,) + window.inputs.shape[1:]
    )
    noisy = window.inputs.copy()
    noisy[1:] += np.cumsum(increments, axis=0)
    return TrainingWindow(
        trajectory_index=window.trajectory_index,
        start=window.start,
        inputs=noisy,
        target=window.target,
        types=window.types,
    )


def window_loss(
    window: TrainingWindow, params: ModelParams, meta: Metadata, tape: Tape | None
) -> Tensor:
    """Featurize one window, run the network, and score the prediction."""
    g = build_graph(window.inputs, window.types, meta, params.type_embedding, tape)
    pred = predict(g, params, tape)
    target = target_acceleration(window.inputs, window.target, meta)
    return loss(pred, target, tape)


def batch_gradients(
    batch: list[TrainingWindow],
    params: ModelParams,
    meta: Metadata,
) -> tuple[float, list[np.ndarray]]:
    """Mean batch loss and its gradient for every parameter, in flatten order."""
    if not batch:
        raise ValueError("batch must not be empty")
    tape = Tape()
    total = None
    for window in batch:
        l = window_loss(window, params, meta, tape)
        total = l if total is None else t_add(total, l, tape)
    batch_loss = scale(total, 1.0 / len(batch), tape) if len(batch) > 1 else total
    grads = backward(tape, batch_loss)
    flat = params.flatten()
    grad_list = [
        grads[t] if t in grads else np.zeros(t.shape) for t in flat
    ]
    return float(batch_loss.value[0, 0]), grad_list


def train_step(
    batch: list[TrainingWindow],
    params: ModelParams,
    opt_state: AdamState,
    meta: Metadata,
    lr: float | None = None,
) -> float:
    """Single-worker step: batch gradients then one Adam update in place."""
    loss_value, grads = batch_gradients(batch, params, meta)
    adam_step(params.flatten(), grads, opt_state, lr=lr)
    return loss_value


def _noise_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, step, slot)))


def _shard_windows(windows: list, num_workers: int, rng: np.random.Generator):
    """Shuffle once, deal round-robin; shard sizes differ by at most one."""
    order = rng.permutation(len(windows))
    shuffled = [windows[i] for i in order]
    return [shuffled[w::num_workers] for w in range(num_workers)]


@dataclass
class TrainEvent:
    step: int                      # 0-based step index just completed
    loss: float                    # mean worker loss for this step
    seconds: float                 # wall-clock spent on this step
    checkpoint: Checkpoint | None  # set on checkpoint-interval steps and at the end


def ddp_train(
    traj_set: TrajectorySet,
    meta: Metadata,
    config: TrainConfig,
    resume: Checkpoint | None = None,
) -> Iterator[TrainEvent]:
    """Data-parallel training; yields one event per optimizer step.

    Every worker computes gradients on its own sub-batch; gradients are
    averaged in worker order and a single Adam update is applied, so all
    replicas stay identical.  Checkpoints are emitted every
    ``checkpoint_interval`` steps and after the final step.
    """
    config.validate()
    fingerprint = traj_set.fingerprint()
    windows = enumerate_windows(traj_set, config.model.input_positions)
    W = config.num_workers
    B = config.batch_per_worker
    if len(windows) < W:
        raise ValueError(f"{len(windows)} windows cannot feed {W} workers")
    shards = _shard_windows(windows, W, np.random.default_rng(config.seed))

    if resume is not None:
        if resume.dataset_fingerprint != fingerprint:
            raise CheckpointError(
                "checkpoint was trained on different data "
                f"(fingerprint {resume.dataset_fingerprint[:12]}... vs "
                f"{fingerprint[:12]}...)"
            )
        if resume.train_config.model != config.model:
            raise CheckpointError("checkpoint model configuration does not match")
        params = resume.params
        adam = resume.adam
        start_step = resume.step
    else:
        params = init_model_params(config.model, config.seed)
        adam = AdamState.init(params.flatten(), lr=config.lr_init)
        start_step = 0

    def worker_task(w: int, step: int):
        shard = shards[w]
        batch = []
        for j in range(B):
            window = shard[(step * B + j) % len(shard)]
            noisy = inject_noise(
                window, config.noise_std, _noise_rng(config.seed, step, j * W + w)
            )
            batch.append(noisy)
        return batch_gradients(batch, params, meta)

    executor = ThreadPoolExecutor(max_workers=W) if W > 1 else None
    flat = params.flatten()
    try:
        for step in range(start_step, config.num_steps):
            t0 = time.perf_counter()
            if executor is None:
                results = [worker_task(0, step)]
            else:
                results = list(
                    executor.map(lambda w: worker_task(w, step), range(W))
                )
            # Fixed-order reduction: sum over workers 0..W-1, then scale.
            mean_loss = sum(r[0] for r in results) / W
            avg = [g.copy() for g in results[0][1]]
            for _, grads in results[1:]:
                for i, g in enumerate(grads):
                    avg[i] += g
            if W > 1:
                inv = 1.0 / W
                for i in range(len(avg)):
                    avg[i] *= inv
            adam_step(flat, avg, adam, lr=config.learning_rate(step))
            seconds = time.perf_counter() - t0

            done = step + 1
            emit = done % config.checkpoint_interval == 0 or done == config.num_steps
            ckpt = None
            if emit:
                # Snapshot: later steps must not mutate an emitted checkpoint.
                ckpt = Checkpoint(
                    params=params.copy(),
                    adam=AdamState(
                        m=[a.copy() for a in adam.m],
                        v=[a.copy() for a in adam.v],
                        step=adam.step,
                        lr=adam.lr,
                        beta1=adam.beta1,
                        beta2=adam.beta2,
                        eps=adam.eps,
                    ),
                    step=done,
                    rng_state={"kind": "counter", "noise_seed": int(config.seed)},
                    train_config=config,
                    dataset_fingerprint=fingerprint,
                )
            yield TrainEvent(step=step, loss=mean_loss, seconds=seconds,
                             checkpoint=ckpt)
    finally:
        if executor is not None:
            executor.shutdown(wait=False)


def one_step_errors(
    windows: list[TrainingWindow], params: ModelParams, meta: Metadata
) -> tuple[float, float]:
    """Mean one-step MSE of the model and of the zero-prediction baseline.

    Both are on normalized accelerations, averaged over all windows with
    no noise injection.
    """
    model_total = 0.0
    baseline_total = 0.0
    for window in windows:
        g = build_graph(window.inputs, window.types, meta, params.type_embedding, None)
        pred = predict(g, params, None).value
        target = target_acceleration(window.inputs, window.target, meta)
        model_total += float(((pred - target) ** 2).mean())
        baseline_total += float((target ** 2).mean())
    n = len(windows)
    return model_total / n, baseline_total / n


# --- checkpoint serialization ------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic "GNSIMCKP"
#   4 bytes   format version (u32)
#   32 bytes  sha256 of everything after this field
#   8 bytes   header length (u64)
#   header    JSON: step, rng_state, train_config, dataset_fingerprint,
#             adam hyperparameters, array shapes
#   blob      raw float64 array data, C-order, in header order


def _checkpoint_arrays(ckpt: Checkpoint) -> list[np.ndarray]:
    flat = [t.value for t in ckpt.params.flatten()]
    return flat + ckpt.adam.m + ckpt.adam.v


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = _checkpoint_arrays(ckpt)
    header = {
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "train_config": ckpt.train_config.to_dict(),
        "dataset_fingerprint": ckpt.dataset_fingerprint,
        "adam": {
            "step": int(ckpt.adam.step),
            "lr": ckpt.adam.lr,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "eps": ckpt.adam.eps,
        },
        "array_shapes": [list(a.shape) for a in arrays],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype=np.float64).tobytes()
                    for a in arrays)
    payload = struct.pack("<Q", len(header_bytes)) + header_bytes + blob
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(digest)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < 8 + 4 + 32 + 8 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    digest = data[12:44]
    payload = data[44:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    (header_len,) = struct.unpack_from("<Q", payload, 0)
    header = json.loads(payload[8:8 + header_len].decode("utf-8"))
    blob = payload[8 + header_len:]

    train_config = TrainConfig.from_dict(header["train_config"])
    params = init_model_params(train_config.model, seed=0)
    flat = params.flatten()
    shapes = [tuple(s) for s in header["array_shapes"]]
    n_params = len(flat)
    if len(shapes) != 3 * n_params:
        raise CheckpointError(
            f"{path}: expected {3 * n_params} arrays, header lists {len(shapes)}"
        )
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: array data truncated")
        arrays.append(
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            .reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after array data")

    for t, a in zip(flat, arrays[:n_params]):
        if t.shape != a.shape:
            raise CheckpointError(
                f"{path}: parameter shape {a.shape} does not match model {t.shape}"
            )
        t.value = a
    adam_meta = header["adam"]
    adam = AdamState(
        m=arrays[n_params:2 * n_params],
        v=arrays[2 * n_params:],
        step=adam_meta["step"],
        lr=adam_meta["lr"],
        beta1=adam_meta["beta1"],
        beta2=adam_meta["beta2"],
        eps=adam_meta["eps"],
    )
    return Checkpoint(
        params=params,
        adam=adam,
        step=header["step"],
        rng_state=header["rng_state"],
        train_config=train_config,
        dataset_fingerprint=header["dataset_fingerprint"],
    )
