"""Legacy ASCII VTK PolyData export of particle frames.

One file per frame: POINTS (z padded with 0 for 2-D data), one VERTICES
cell per particle, and an integer "particle_type" scalar field.  Floats
are printed with shortest-round-trip precision (up to 17 significant
digits), so parsed coordinates are bitwise equal to the written ones.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _fmt(x: float) -> str:
    """Exact round-trip float text; integral values drop the trailing .0."""
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def write_vtk(positions: np.ndarray, types: np.ndarray, path) -> None:
    """Write one particle frame as legacy ASCII PolyData."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] not in (2, 3):
        raise ValueError(
            f"positions must be (n, 2) or (n, 3), got {positions.shape}"
        )
    types = np.asarray(types, dtype=np.int64)
    n = positions.shape[0]
    if types.shape != (n,):
        raise ValueError(f"types shape {types.shape} does not match {n} particles")
    if positions.shape[1] == 2:
        positions = np.concatenate([positions, np.zeros((n, 1))], axis=1)

    lines = [
        "# vtk DataFile Version 3.0",
        "particle frame",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {n} double",
    ]
    for p in positions:
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}")
    lines.append(f"VERTICES {n} {2 * n}")
    for i in range(n):
        lines.append(f"1 {i}")
    lines.append(f"POINT_DATA {n}")
    lines.append("SCALARS particle_type int 1")
    lines.append("LOOKUP_TABLE default")
    for t in types:
        lines.append(str(int(t)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtk_series(
    positions: np.ndarray, types: np.ndarray, out_dir, prefix: str = "frame"
) -> list[Path]:
    """Write every frame of a (steps, n, dim) trajectory; returns the paths."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3:
        raise ValueError(f"expected (steps, n, dim) positions, got {positions.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(positions):
        path = out_dir / f"{prefix}_{k:06d}.vtk"
        write_vtk(frame, types, path)
        paths.append(path)
    return paths
