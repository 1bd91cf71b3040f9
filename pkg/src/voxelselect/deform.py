"""Gaussian-spline deformation fields.

A subject's displacement field is interpolated from per-control-point weight
vectors through an (unnormalized) Gaussian radial kernel,

    u_{i,k} = sum_b exp(-||v_k - v_b||^2 / (2 omega^2)) * w_{i,b},

and voxel k is displaced to the voxel nearest to v_k + u_{i,k} (rounding
half-away-from-zero per axis, clamped inside the grid).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .volume import VoxelGrid, write_volume, read_volume

__all__ = [
    "ControlLattice",
    "DisplacementSet",
    "build_lattice",
    "kernel_matrix",
    "interpolate_field",
    "displace_index",
    "displaced_targets",
    "round_half_away",
    "write_displacements",
    "read_displacements",
]

#: kernel values below exp(-8) ~ 3.4e-4 (beyond 4*omega) are dropped in fast mode
KERNEL_CUTOFF_RADII = 4.0


@dataclass(frozen=True)
class ControlLattice:
    """Fixed control points with a shared Gaussian kernel width (voxels)."""

    grid: VoxelGrid
    control_points: np.ndarray  # (B, rank) voxel coordinates
    kernel_width: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.control_points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != self.grid.rank:
            raise ValueError(f"control points must be (B, {self.grid.rank})")
        if pts.shape[0] < 1:
            raise ValueError("need at least one control point")
        if self.kernel_width <= 0:
            raise ValueError("kernel width must be positive")
        upper = np.asarray(self.grid.dims, dtype=np.float64) - 1
        if np.any(pts < 0) or np.any(pts > upper):
            raise ValueError("control points must lie inside the grid")
        pts.setflags(write=False)
        object.__setattr__(self, "control_points", pts)

    @property
    def count(self) -> int:
        return self.control_points.shape[0]


@dataclass
class DisplacementSet:
    """Per-subject elementary displacement weights at the lattice control points."""

    lattice: ControlLattice
    weights: np.ndarray  # (n, B, rank)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        expected = (w.shape[0], self.lattice.count, self.lattice.grid.rank)
        if w.shape != expected:
            raise ValueError(f"weights must have shape {expected}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        self.weights = w

    @property
    def subjects(self) -> int:
        return self.weights.shape[0]


def _axis_positions(length: int, omega: float) -> np.ndarray:
    """Regular positions with spacing 2*omega, margins >= 2.5*omega, centered.

    Falls back to a single centered point when the margin rule admits none.
    """
    margin = 2.5 * omega
    span = (length - 1) - 2 * margin
    if span < 0:
        return np.array([(length - 1) // 2], dtype=np.float64)
    count = int(np.floor(span / (2 * omega))) + 1
    start = (length - 1) / 2 - (count - 1) * omega
    pos = start + 2 * omega * np.arange(count)
    return np.floor(pos + 0.5)  # snap to voxel coordinates


def build_lattice(grid: VoxelGrid, omega: float) -> ControlLattice:
    """Regular control lattice with spacing 2*omega and 2.5*omega boundary margins."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    axes = [_axis_positions(dim, omega) for dim in grid.dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.reshape(-1) for m in mesh])
    return ControlLattice(grid, pts, float(omega))


def kernel_matrix(lattice: ControlLattice, exact: bool = False) -> np.ndarray:
    """Gaussian kernel weights K[k, b] between every voxel and control point.

    In fast mode entries beyond KERNEL_CUTOFF_RADII * omega are zeroed; exact
    mode keeps the full Gaussian for oracle comparisons.
    """
    coords = lattice.grid.coordinates()  # (d, rank)
    diff = coords[:, None, :] - lattice.control_points[None, :, :]
    sq = np.einsum("kbr,kbr->kb", diff, diff)
    omega2 = lattice.kernel_width**2
    K = np.exp(-sq / (2 * omega2))
    if not exact:
        K[sq > (KERNEL_CUTOFF_RADII * lattice.kernel_width) ** 2] = 0.0
    return K


def interpolate_field(ds: DisplacementSet, subject: int, exact: bool = False) -> np.ndarray:
    """Displacement vectors u_i over the whole grid, shape (d, rank)."""
    if not 0 <= subject < ds.subjects:
        raise IndexError(f"subject {subject} out of range")
    K = kernel_matrix(ds.lattice, exact=exact)
    return K @ ds.weights[subject]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (0.5 -> 1, -0.5 -> -1), elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def displaced_targets(grid: VoxelGrid, coords: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Flat indices of the voxels nearest to coords + u (clamped into the grid).

    coords and u may carry any leading batch shape over a trailing rank axis.
    """
    moved = round_half_away(np.asarray(coords, dtype=np.float64) + u)
    upper = np.asarray(grid.dims) - 1
    moved = np.clip(moved, 0, upper).astype(np.intp)
    return np.ravel_multi_index(tuple(np.moveaxis(moved, -1, 0)), grid.dims)


def displace_index(grid: VoxelGrid, k: int, u_k) -> int:
    """Displaced voxel index phi(k) for a single voxel and displacement vector."""
    u_k = np.asarray(u_k, dtype=np.float64).reshape(grid.rank)
    if not np.all(np.isfinite(u_k)):
        raise ValueError("displacement must be finite")
    coord = grid.unravel([k])[0].astype(np.float64)
    return int(displaced_targets(grid, coord, u_k))


def write_displacements(path, ds: DisplacementSet) -> None:
    """Serialize weights to the volume container plus a JSON kernel sidecar."""
    write_volume(path, ds.weights, kind="weights")
    sidecar = {
        "omega": ds.lattice.kernel_width,
        "control_points": ds.lattice.control_points.tolist(),
        "grid_dims": list(ds.lattice.grid.dims),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1)


def read_displacements(path) -> DisplacementSet:
    weights = read_volume(path)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    lattice = ControlLattice(
        VoxelGrid(tuple(sidecar["grid_dims"])),
        np.asarray(sidecar["control_points"], dtype=np.float64),
        float(sidecar["omega"]),
    )
    return DisplacementSet(lattice, weights)
