"""Brute-force reference simulator that produces ground-truth trajectories.

Physics: constant gravity, linear short-range pairwise repulsion, and box
walls that reflect with a restitution factor.  Integration is semi-implicit
Euler (velocity first, position with the updated velocity).  Forces are
evaluated with an all-pairs scan; this is meant for desk-scale data, not
large systems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Metadata, Trajectory, TrajectorySet, compute_statistics


class ConfigError(ValueError):
    """Generator configuration is non-physical or inconsistent."""


@dataclass
class GeneratorConfig:
    num_particles: int = 64
    num_steps: int = 200              # stored frames, including the initial one
    num_trajectories: int = 1
    dim: int = 2
    dt: float = 0.0025
    gravity: tuple = None             # defaults to -9.81 along the last axis
    restitution: float = 0.5
    repulsion_stiffness: float = 3000.0   # acceleration per unit overlap
    repulsion_range: float = 0.025
    bounds: tuple = ((0.1, 0.9), (0.1, 0.9))
    connectivity_radius: float = 0.03     # emitted in metadata, not used here
    initial_speed: float = 0.2            # std of the random initial velocity
    material_types: int = 1

    def __post_init__(self):
        if self.gravity is None:
            g = np.zeros(self.dim)
            g[-1] = -9.81
            self.gravity = tuple(g)

    def validate(self) -> None:
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")
        if self.num_particles < 1 or self.num_steps < 2 or self.num_trajectories < 1:
            raise ConfigError("particle, step, and trajectory counts must be positive")
        if self.dt <= 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not (0.0 <= self.restitution <= 1.0):
            raise ConfigError(
                f"restitution must lie in [0, 1], got {self.restitution}"
            )
        if self.repulsion_stiffness < 0.0 or self.repulsion_range <= 0.0:
            raise ConfigError("repulsion stiffness must be >= 0 and range > 0")
        bounds = np.asarray(self.bounds, dtype=np.float64)
        if bounds.shape != (self.dim, 2):
            raise ConfigError(
                f"bounds must be shaped ({self.dim}, 2), got {bounds.shape}"
            )
        if not np.all(bounds[:, 0] < bounds[:, 1]):
            raise ConfigError("bounds are degenerate: need low < high per dimension")
        if len(self.gravity) != self.dim:
            raise ConfigError("gravity must have one component per dimension")
        if self.connectivity_radius <= 0.0:
            raise ConfigError("connectivity_radius must be positive")
        if self.material_types < 1:
            raise ConfigError("material_types must be >= 1")


def _pairwise_repulsion(x: np.ndarray, stiffness: float, rng_len: float) -> np.ndarray:
    """Acceleration from linear springs active below the repulsion range."""
    n = x.shape[0]
    if n == 1 or stiffness == 0.0:
        return np.zeros_like(x)
    delta = x[:, None, :] - x[None, :, :]          # (n, n, dim), x_i - x_j
    dist = np.sqrt((delta * delta).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    overlap = rng_len - dist
    # Coincident pairs get no force rather than a NaN direction.
    active = (overlap > 0.0) & (dist > 1e-12)
    scale = np.zeros_like(dist)
    np.divide(stiffness * overlap, dist, out=scale, where=active)
    return (scale[:, :, None] * delta).sum(axis=1)


def _reflect(x: np.ndarray, v: np.ndarray, bounds: np.ndarray, restitution: float):
    """Mirror positions at the walls, damping the normal velocity.

    Guaranteed to leave every position inside the box: after a few mirror
    passes any remaining overshoot is clamped.
    """
    low, high = bounds[:, 0], bounds[:, 1]
    for _ in range(4):
        below = x < low
        above = x > high
        if not (below.any() or above.any()):
            break
        x = np.where(below, 2.0 * low - x, x)
        x = np.where(above, 2.0 * high - x, x)
        hit = below | above
        v = np.where(hit, -restitution * v, v)
    return np.clip(x, low, high), v


def simulate_trajectory(
    config: GeneratorConfig, rng: np.random.Generator
) -> Trajectory:
    """One trajectory: random start, then num_steps - 1 integration steps."""
    bounds = np.asarray(config.bounds, dtype=np.float64)
    low, high = bounds[:, 0], bounds[:, 1]
    margin = min(config.repulsion_range, 0.25 * float((high - low).min()))
    x = rng.uniform(
        low + margin, high - margin, size=(config.num_particles, config.dim)
    )
    v = rng.normal(0.0, config.initial_speed, size=x.shape)
    gravity = np.asarray(config.gravity, dtype=np.float64)

    frames = np.empty((config.num_steps, config.num_particles, config.dim))
    frames[0] = x
    for t in range(1, config.num_steps):
        a = gravity + _pairwise_repulsion(
            x, config.repulsion_stiffness, config.repulsion_range
        )
        v = v + config.dt * a
        x = x + config.dt * v
        x, v = _reflect(x, v, bounds, config.restitution)
        frames[t] = x

    types = np.arange(config.num_particles, dtype=np.int64) % config.material_types
    return Trajectory(positions=frames, types=types)


def generate_reference(
    config: GeneratorConfig, seed: int
) -> tuple[TrajectorySet, Metadata]:
    """Deterministic ground-truth dataset plus metadata with measured statistics."""
    config.validate()
    rng = np.random.default_rng(seed)
    traj_set = TrajectorySet(
        [simulate_trajectory(config, rng) for _ in range(config.num_trajectories)]
    )
    vel_mean, vel_std, acc_mean, acc_std = compute_statistics(traj_set)
    meta = Metadata(
        bounds=np.asarray(config.bounds, dtype=np.float64),
        sequence_length=config.num_steps,
        default_connectivity_radius=config.connectivity_radius,
        dim=config.dim,
        dt=config.dt,
        vel_mean=vel_mean,
        vel_std=vel_std,
        acc_mean=acc_mean,
        acc_std=acc_std,
    )
    return traj_set, meta
