"""Voxel grids, scalar/label fields, connected components and file I/O.

Volumes are stored in a minimal portable container: one JSON header line
``{"dims": [...], "dtype": "f64"|"u32", "kind": "scalar"|"labels"|"weights"}``
terminated by a newline, followed by the raw little-endian payload in C order
(last axis fastest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "VoxelGrid",
    "ScalarMap",
    "Parcellation",
    "SubjectData",
    "VolumeFormatError",
    "read_volume",
    "write_volume",
    "connected_components",
    "read_dataset_manifest",
    "write_dataset_manifest",
    "write_pgm",
]


class VolumeFormatError(ValueError):
    """Raised for malformed volume files (bad header, payload mismatch...)."""


@dataclass(frozen=True)
class VoxelGrid:
    """A rank-1/2/3 lattice of voxels indexed 0..d-1 in C order."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(v) for v in self.dims)
        object.__setattr__(self, "dims", dims)
        if not 1 <= len(dims) <= 3:
            raise ValueError(f"grid rank must be 1, 2 or 3, got {len(dims)}")
        if any(v < 1 for v in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def coordinates(self) -> np.ndarray:
        """Integer coordinates of every voxel, shape (d, rank), C order."""
        grids = np.indices(self.dims).reshape(self.rank, -1).T
        return np.ascontiguousarray(grids, dtype=np.float64)

    def ravel(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.intp)
        return np.ravel_multi_index(tuple(coords.T), self.dims)

    def unravel(self, indices) -> np.ndarray:
        return np.column_stack(np.unravel_index(np.asarray(indices, dtype=np.intp), self.dims))


@dataclass(frozen=True)
class ScalarMap:
    """A real-valued field over a voxel grid (effects, variances, statistics...)."""

    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != self.grid.size:
            raise ValueError(
                f"value count {values.size} does not match grid size {self.grid.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar map contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        """Values reshaped to the grid dims."""
        return self.values.reshape(self.grid.dims)

    def __eq__(self, other):
        return (
            isinstance(other, ScalarMap)
            and self.grid == other.grid
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class Parcellation:
    """Label field assigning each voxel to one of N regions (0-based)."""

    grid: VoxelGrid
    labels: np.ndarray
    region_count: int = 0

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32).reshape(-1)
        if labels.size != self.grid.size:
            raise ValueError(
                f"label count {labels.size} does not match grid size {self.grid.size}"
            )
        n = self.region_count or int(labels.max()) + 1
        if labels.max() >= n:
            raise VolumeFormatError(
                f"label {int(labels.max())} out of range for region count {n}"
            )
        sizes = np.bincount(labels, minlength=n)
        if np.any(sizes == 0):
            raise ValueError("every region must contain at least one voxel")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "region_count", n)

    @property
    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.region_count)

    def region_voxels(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels == j)

    def __eq__(self, other):
        return (
            isinstance(other, Parcellation)
            and self.grid == other.grid
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SubjectData:
    """One subject's effect map y_i and known estimation variances s_i^2."""

    effects: ScalarMap
    variances: ScalarMap

    def __post_init__(self):
        if self.effects.grid != self.variances.grid:
            raise ValueError("effect and variance maps must share one grid")
        if np.any(self.variances.values < 0):
            raise ValueError("variances must be nonnegative")

    @property
    def grid(self) -> VoxelGrid:
        return self.effects.grid


_DTYPES = {"f64": "<f8", "u32": "<u4"}


def write_volume(path, obj, kind: str | None = None) -> None:
    """Write a ScalarMap, Parcellation, or raw weight array to the container format."""
    if isinstance(obj, ScalarMap):
        kind = kind or "scalar"
        dims, payload = obj.grid.dims, obj.values.astype("<f8")
        dtype = "f64"
    elif isinstance(obj, Parcellation):
        kind = kind or "labels"
        dims, payload = obj.grid.dims, obj.labels.astype("<u4")
        dtype = "u32"
    else:
        arr = np.ascontiguousarray(obj, dtype=np.float64)
        kind = kind or "weights"
        dims, payload, dtype = arr.shape, arr.astype("<f8"), "f64"
    header = {"dims": list(dims), "dtype": dtype, "kind": kind}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(payload.tobytes(order="C"))


def read_volume(path):
    """Read a volume file; returns a ScalarMap, Parcellation or weight ndarray."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("ascii"))
        dims = tuple(int(v) for v in header["dims"])
        dtype = header["dtype"]
        kind = header["kind"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"malformed volume header in {path}: {exc}") from exc
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unknown dtype {dtype!r} in {path}")
    values = np.frombuffer(payload, dtype=_DTYPES[dtype])
    expected = int(np.prod(dims))
    if values.size != expected:
        raise VolumeFormatError(
            f"payload holds {values.size} values but header declares {expected}"
        )
    if kind == "scalar":
        if not np.all(np.isfinite(values)):
            raise VolumeFormatError(f"non-finite values in scalar volume {path}")
        return ScalarMap(VoxelGrid(dims), values)
    if kind == "labels":
        return Parcellation(VoxelGrid(dims), values)
    if kind == "weights":
        return values.reshape(dims).copy()
    raise VolumeFormatError(f"unknown volume kind {kind!r} in {path}")


def connected_components(smap: ScalarMap, threshold: float) -> list[np.ndarray]:
    """Clusters of voxels strictly above threshold under face adjacency.

    Returns a list of sorted flat-index arrays; their union is exactly the
    suprathreshold set and two voxels share a cluster iff they are linked by
    a face-adjacent suprathreshold path (2/4/6-connectivity in rank 1/2/3).
    """
    return mask_components(smap.grid, smap.as_array() > threshold)


def mask_components(grid: VoxelGrid, mask) -> list[np.ndarray]:
    """Face-adjacent components of a boolean mask, as flat-index arrays."""
    mask = np.asarray(mask, dtype=bool).reshape(grid.dims)
    structure = ndimage.generate_binary_structure(grid.rank, 1)
    labeled, n = ndimage.label(mask, structure=structure)
    flat = labeled.reshape(-1)
    return [np.flatnonzero(flat == c) for c in range(1, n + 1)]


# --- dataset manifests -----------------------------------------------------


def write_dataset_manifest(path, effect_paths, variance_paths, parcellation_path=None,
                           extra: dict | None = None) -> None:
    manifest = {
        "subjects": [
            {"effects": str(e), "variances": str(v)}
            for e, v in zip(effect_paths, variance_paths, strict=True)
        ]
    }
    if parcellation_path is not None:
        manifest["parcellation"] = str(parcellation_path)
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_dataset_manifest(path):
    """Load a dataset manifest; returns (list of SubjectData, Parcellation | None, raw dict)."""
    import os.path as op

    with open(path) as fh:
        manifest = json.load(fh)
    base = op.dirname(op.abspath(path))

    def _resolve(p):
        return p if op.isabs(p) else op.join(base, p)

    subjects = []
    for entry in manifest["subjects"]:
        eff = read_volume(_resolve(entry["effects"]))
        var = read_volume(_resolve(entry["variances"]))
        subjects.append(SubjectData(eff, var))
    parc = None
    if manifest.get("parcellation"):
        parc = read_volume(_resolve(manifest["parcellation"]))
    return subjects, parc, manifest


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D array as an 8-bit grayscale PGM (min-max scaled)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM output needs a 2D array")
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
