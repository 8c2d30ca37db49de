"""Trajectory datasets: metadata JSON, npz trajectory archives, training windows.

Dataset layout on disk:

* ``metadata.json`` — bounds, sequence_length, default_connectivity_radius,
  dim, dt, and per-dimension vel/acc normalization statistics.  Statistics
  are in finite-difference units (position deltas per step, no division
  by dt).
* ``*.npz`` — a zip archive of npy members, one pair per trajectory:
  ``trajectory_<k>_positions`` shaped (n_time_steps, n_particles, dim) and
  ``trajectory_<k>_types`` shaped (n_particles,), plus a scalar
  ``trajectory_count`` member.  Positions are written as uncompressed
  64-bit little-endian npy v1.0; reads also accept deflated members and
  32-bit floats (promoted to 64-bit).
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

INPUT_SEQUENCE_LENGTH = 6

_METADATA_KEYS = (
    "bounds",
    "sequence_length",
    "default_connectivity_radius",
    "dim",
    "dt",
    "vel_mean",
    "vel_std",
    "acc_mean",
    "acc_std",
)


class MetadataError(ValueError):
    """Metadata file missing, malformed, or violating its invariants."""


class CodecError(ValueError):
    """Trajectory archive is not a valid npz of trajectory members."""


@dataclass
class Metadata:
    """Dataset descriptor; statistics are per-step position differences."""

    bounds: np.ndarray               # (dim, 2) [low, high] per dimension
    sequence_length: int
    default_connectivity_radius: float
    dim: int
    dt: float
    vel_mean: np.ndarray             # (dim,)
    vel_std: np.ndarray
    acc_mean: np.ndarray
    acc_std: np.ndarray
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        for name in ("vel_mean", "vel_std", "acc_mean", "acc_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.dim not in (2, 3):
            raise MetadataError(f"dim must be 2 or 3, got {self.dim}")
        if self.bounds.shape != (self.dim, 2):
            raise MetadataError(
                f"bounds must be shaped ({self.dim}, 2), got {self.bounds.shape}"
            )
        if not np.all(self.bounds[:, 0] < self.bounds[:, 1]):
            raise MetadataError("bounds must satisfy low < high per dimension")
        for name in ("vel_mean", "vel_std", "acc_mean", "acc_std"):
            if getattr(self, name).shape != (self.dim,):
                raise MetadataError(f"{name} must have length dim={self.dim}")
        if np.any(self.vel_std <= 0.0) or np.any(self.acc_std <= 0.0):
            raise MetadataError("std components must be positive")

    def to_dict(self) -> dict:
        d = {
            "bounds": self.bounds.tolist(),
            "sequence_length": int(self.sequence_length),
            "default_connectivity_radius": float(self.default_connectivity_radius),
            "dim": int(self.dim),
            "dt": float(self.dt),
            "vel_mean": self.vel_mean.tolist(),
            "vel_std": self.vel_std.tolist(),
            "acc_mean": self.acc_mean.tolist(),
            "acc_std": self.acc_std.tolist(),
        }
        d.update(self.extras)
        return d


def read_metadata(path) -> Metadata:
    """Parse a metadata JSON file; unknown keys are kept in ``extras``."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise MetadataError(f"malformed metadata JSON in {path}: {e}") from e
    if not isinstance(raw, dict):
        raise MetadataError(f"metadata root must be a JSON object in {path}")
    missing = [k for k in _METADATA_KEYS if k not in raw]
    if missing:
        raise MetadataError(f"metadata missing required key(s): {', '.join(missing)}")
    extras = {k: v for k, v in raw.items() if k not in _METADATA_KEYS}
    return Metadata(
        bounds=raw["bounds"],
        sequence_length=raw["sequence_length"],
        default_connectivity_radius=raw["default_connectivity_radius"],
        dim=raw["dim"],
        dt=raw["dt"],
        vel_mean=raw["vel_mean"],
        vel_std=raw["vel_std"],
        acc_mean=raw["acc_mean"],
        acc_std=raw["acc_std"],
        extras=extras,
    )


def write_metadata(path, meta: Metadata) -> None:
    with open(path, "w") as fh:
        json.dump(meta.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass
class Trajectory:
    """One particle position history plus per-particle material types."""

    positions: np.ndarray    # (n_time_steps, n_particles, dim), float64
    types: np.ndarray        # (n_particles,), int64, >= 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.types = np.asarray(self.types, dtype=np.int64)
        if self.positions.ndim != 3:
            raise ValueError(
                f"positions must be (steps, particles, dim), got {self.positions.shape}"
            )
        if self.types.ndim != 1 or self.types.shape[0] != self.positions.shape[1]:
            raise ValueError(
                f"types shape {self.types.shape} does not match "
                f"{self.positions.shape[1]} particles"
            )
        if self.types.size and self.types.min() < 0:
            raise ValueError("particle types must be non-negative")

    @property
    def n_time_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


@dataclass
class TrajectorySet:
    """A list of trajectories sharing one spatial dimensionality.

    Training additionally expects every trajectory to span at least
    INPUT_SEQUENCE_LENGTH + 1 steps; that is enforced where windows are
    enumerated so short trajectories can still be stored and inspected.
    """

    trajectories: list[Trajectory]

    def __post_init__(self):
        dims = {t.dim for t in self.trajectories}
        if len(dims) > 1:
            raise ValueError(f"mixed trajectory dimensionalities: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def dim(self) -> int:
        if not self.trajectories:
            raise ValueError("empty TrajectorySet has no dimensionality")
        return self.trajectories[0].dim

    def fingerprint(self) -> str:
        """Content hash over all positions and types, order-sensitive."""
        h = hashlib.sha256()
        for t in self.trajectories:
            h.update(np.ascontiguousarray(t.positions).tobytes())
            h.update(np.ascontiguousarray(t.types).tobytes())
        return h.hexdigest()


def write_npz(path, traj_set: TrajectorySet) -> None:
    """Write trajectories as uncompressed npy v1.0 members.

    Members are stored (not deflated) and carry a fixed zip timestamp, so
    the same trajectory set always produces byte-identical archives.
    """
    members = {"trajectory_count": np.array(len(traj_set.trajectories), dtype=np.int64)}
    for k, t in enumerate(traj_set.trajectories):
        members[f"trajectory_{k}_positions"] = np.ascontiguousarray(
            t.positions, dtype=np.float64
        )
        members[f"trajectory_{k}_types"] = np.ascontiguousarray(t.types, dtype=np.int64)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED, allowZip64=True) as zf:
        for name, arr in members.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, version=(1, 0))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_STORED
            zf.writestr(info, buf.getvalue())


def read_npz(path) -> TrajectorySet:
    """Read a trajectory archive written by write_npz (or equivalent)."""
    try:
        with np.load(path) as archive:
            names = set(archive.files)
            if "trajectory_count" not in names:
                raise CodecError(f"{path}: missing trajectory_count member")
            count = int(archive["trajectory_count"])
            trajectories = []
            for k in range(count):
                pos_name = f"trajectory_{k}_positions"
                type_name = f"trajectory_{k}_types"
                if pos_name not in names or type_name not in names:
                    raise CodecError(f"{path}: missing members for trajectory {k}")
                positions = archive[pos_name]
                types = archive[type_name]
                if positions.dtype.kind != "f" or positions.dtype.itemsize not in (4, 8):
                    raise CodecError(
                        f"{path}: {pos_name} must be 32- or 64-bit float, "
                        f"got {positions.dtype}"
                    )
                if types.dtype.kind not in ("i", "u"):
                    raise CodecError(
                        f"{path}: {type_name} must be integer, got {types.dtype}"
                    )
                if positions.ndim != 3:
                    raise CodecError(
                        f"{path}: {pos_name} must be 3-D, got shape {positions.shape}"
                    )
                if types.ndim != 1 or types.shape[0] != positions.shape[1]:
                    raise CodecError(
                        f"{path}: {type_name} shape {types.shape} inconsistent with "
                        f"positions {positions.shape}"
                    )
                trajectories.append(
                    Trajectory(
                        positions=positions.astype(np.float64),
                        types=types.astype(np.int64),
                    )
                )
    except (zipfile.BadZipFile, OSError) as e:
        raise CodecError(f"{path}: not a readable npz archive: {e}") from e
    except ValueError as e:
        raise CodecError(f"{path}: corrupt npy member: {e}") from e
    return TrajectorySet(trajectories)


@dataclass
class TrainingWindow:
    """Six consecutive input positions plus the position to predict.

    ``inputs`` and ``target`` are views into the trajectory arrays.
    """

    trajectory_index: int
    start: int
    inputs: np.ndarray      # (input_len, n_particles, dim)
    target: np.ndarray      # (n_particles, dim)
    types: np.ndarray       # (n_particles,)


def enumerate_windows(
    traj_set: TrajectorySet, input_len: int = INPUT_SEQUENCE_LENGTH
) -> list[TrainingWindow]:
    """All windows of input_len positions plus one target, per trajectory.

    A trajectory of T steps yields exactly T - input_len windows.
    """
    if input_len < 2:
        raise ValueError(f"input_len must be >= 2, got {input_len}")
    windows = []
    for j, traj in enumerate(traj_set.trajectories):
        T = traj.n_time_steps
        if T < input_len + 1:
            raise ValueError(
                f"trajectory {j} has {T} steps; need at least {input_len + 1}"
            )
        for t0 in range(T - input_len):
            windows.append(
                TrainingWindow(
                    trajectory_index=j,
                    start=t0,
                    inputs=traj.positions[t0:t0 + input_len],
                    target=traj.positions[t0 + input_len],
                    types=traj.types,
                )
            )
    return windows


def compute_statistics(
    traj_set: TrajectorySet,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-dimension mean/std of first and second position differences.

    Velocities are x_{t+1} - x_t and accelerations their differences, in
    per-step units (no division by dt), pooled over all particles, steps
    and trajectories.  Stds are population stds floored at 1e-12.
    """
    vels, accs = [], []
    for j, traj in enumerate(traj_set.trajectories):
        if traj.n_time_steps < 3:
            raise ValueError(
                f"trajectory {j} has {traj.n_time_steps} steps; "
                "statistics need at least 3"
            )
        v = np.diff(traj.positions, axis=0)
        a = np.diff(v, axis=0)
        vels.append(v.reshape(-1, traj.dim))
        accs.append(a.reshape(-1, traj.dim))
    vel = np.concatenate(vels, axis=0)
    acc = np.concatenate(accs, axis=0)
    floor = 1e-12
    return (
        vel.mean(axis=0),
        np.maximum(vel.std(axis=0), floor),
        acc.mean(axis=0),
        np.maximum(acc.std(axis=0), floor),
    )
