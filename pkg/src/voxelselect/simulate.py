"""Synthetic data generators: warped phantoms, sparse means, atlases.

Every generator draws from the package's own hierarchical model: a truth
map is built geometrically, optionally pre-smoothed, warped per subject by
a smooth random displacement field, and observed under heteroscedastic
Gaussian noise with per-voxel variance maps.  A Voronoi-style synthetic
atlas provides connected parcellations for region-level experiments.
"""

from __future__ import annotations

import collections

import numpy as np
from scipy import ndimage

from .volume import VoxelGrid, ScalarMap, Parcellation, SubjectData
from .deform import (
    ControlLattice,
    DisplacementSet,
    build_lattice,
    interpolate_field,
    displaced_targets,
)


def _warp_targets(grid, fields):
    """Displaced flat indices for per-subject fields of shape (n, d, rank)."""
    coords = grid.coordinates()
    return np.stack([displaced_targets(grid, coords, u) for u in fields])


def _smooth_field_norm(dims, omega):
    """L2 norm of the Gaussian smoothing kernel on this grid (interior)."""
    probe = np.zeros(tuple(min(s, int(12 * omega) | 1) for s in dims))
    probe[tuple(s // 2 for s in probe.shape)] = 1.0
    return float(np.sqrt((ndimage.gaussian_filter(probe, omega) ** 2).sum()))


def sample_fields(grid, n, sigma_s, omega, rng):
    """Per-voxel-control displacement fields with marginal std sigma_s.

    Smooths white noise with a Gaussian kernel of width omega and rescales
    so each displacement coordinate is marginally N(0, sigma_s^2); returns
    an (n, d, rank) array.
    """
    d, rank = grid.size, grid.rank
    fields = np.zeros((n, d, rank))
    if sigma_s == 0:
        return fields
    c = _smooth_field_norm(grid.dims, omega)
    for i in range(n):
        for ax in range(rank):
            white = rng.standard_normal(grid.dims)
            f = ndimage.gaussian_filter(white, omega) / c * sigma_s
            fields[i, :, ax] = f.reshape(-1)
    return fields


def _observe(truth_vox, grid, fields, sigma2, epsilon, n, rng,
             var_scaled=False):
    """Warp the truth per subject and add the two-level observation noise.

    var_scaled=False draws the first-level std as epsilon * |N(0,1)|;
    var_scaled=True draws the first-level variance as epsilon * chi2(1),
    so the noise level scales the variance rather than the std.
    """
    d = grid.size
    tgt = _warp_targets(grid, fields)
    scale = epsilon if var_scaled else epsilon ** 2
    subjects = []
    for i in range(n):
        s2 = scale * rng.standard_normal(d) ** 2
        x = truth_vox[tgt[i]] + np.sqrt(sigma2) * rng.standard_normal(d)
        y = x + np.sqrt(s2) * rng.standard_normal(d)
        subjects.append(SubjectData(ScalarMap(grid, y), ScalarMap(grid, s2)))
    return subjects


def gen_1d(n_subjects=40, length=50, centers=(10, 25, 33), width=2.0,
           height=5.0, sigma_s=3.0, omega=6.5, sigma2=1.0, epsilon=4.0,
           seed=0):
    """1-d line phantom: three Gaussian bumps, lattice-based warps.

    Returns (subjects, truth map, truth displacements).  Displacements are
    drawn on the coarse control lattice implied by omega; observation
    noise std per voxel is epsilon times an absolute standard normal.
    """
    rng = np.random.default_rng(seed)
    grid = VoxelGrid((length,))
    v = np.arange(length, dtype=float)
    truth = np.zeros(length)
    for c in centers:
        truth += height * np.exp(-((v - c) ** 2) / (2 * width ** 2))
    lattice = build_lattice(grid, omega)
    w = sigma_s * rng.standard_normal((n_subjects, lattice.count, 1))
    ds = DisplacementSet(lattice, w)
    fields = np.stack([interpolate_field(ds, i) for i in range(n_subjects)])
    subjects = _observe(truth, grid, fields, sigma2, epsilon, n_subjects, rng)
    return subjects, ScalarMap(grid, truth), ds


def _ball_mask(grid, center, radius):
    center = np.asarray(center, dtype=float)
    for ax, c in enumerate(center):
        if c - radius < -0.5 or c + radius > grid.dims[ax] - 0.5:
            raise ValueError("phantom geometry exceeds the grid")
    coords = grid.coordinates()
    return np.sum((coords - center) ** 2, axis=1) <= radius ** 2


def gen_grid_phantom(kind="disc", dims=None, n_subjects=None, value=5.0,
                     diameter=7.0, sigma_s=None, omega=4.0, sigma2=1.0,
                     epsilon=1.0, presmooth=None, seed=0, atlas=None,
                     active_regions=None, kernel_radius=3.0):
    """2-d/3-d phantoms warped by per-voxel-control displacement fields.

    kind="disc": centered uniform disc (default 24x24, n=30, sigma_s=1).
    kind="spheres": two uniform spheres (default 24x32x32, n=40,
    sigma_s=2, 0.5-voxel pre-smoothing).  kind="atlas-peaks": Gaussian
    peaks at the centroids of the chosen regions of a supplied atlas.
    Observation variance is sigma2 + s^2 with s^2/epsilon chi-squared(1),
    so the noise level scales the first-level variance.
    Returns (subjects, truth map, truth fields, parcellation).
    """
    rng = np.random.default_rng(seed)
    radius = diameter / 2.0

    if kind == "disc":
        dims = dims or (24, 24)
        n_subjects = n_subjects or 30
        sigma_s = 1.0 if sigma_s is None else sigma_s
        presmooth = 0.0 if presmooth is None else presmooth
        grid = VoxelGrid(tuple(dims))
        center = [(s - 1) / 2.0 for s in dims]
        active = _ball_mask(grid, center, radius)
        truth = np.where(active, value, 0.0)
        labels = active.astype(int)
    elif kind == "spheres":
        dims = dims or (24, 32, 32)
        n_subjects = n_subjects or 40
        sigma_s = 2.0 if sigma_s is None else sigma_s
        presmooth = 0.5 if presmooth is None else presmooth
        grid = VoxelGrid(tuple(dims))
        q1 = [dims[0] / 2.0 - 0.5, dims[1] * 0.3, dims[2] / 2.0 - 0.5]
        q2 = [dims[0] / 2.0 - 0.5, dims[1] * 0.7, dims[2] / 2.0 - 0.5]
        m1, m2 = _ball_mask(grid, q1, radius), _ball_mask(grid, q2, radius)
        truth = np.where(m1 | m2, value, 0.0)
        labels = np.zeros(grid.size, dtype=int)
        labels[m1], labels[m2] = 1, 2
    elif kind == "atlas-peaks":
        if atlas is None or active_regions is None:
            raise ValueError("atlas-peaks needs an atlas and active regions")
        grid = atlas.grid
        n_subjects = n_subjects or 30
        sigma_s = 1.0 if sigma_s is None else sigma_s
        presmooth = 0.0 if presmooth is None else presmooth
        coords = grid.coordinates()
        truth = np.zeros(grid.size)
        for j in active_regions:
            c = coords[atlas.region_voxels(j)].mean(axis=0)
            truth += value * np.exp(
                -np.sum((coords - c) ** 2, axis=1) / (2 * kernel_radius ** 2))
        labels = atlas.labels
    else:
        raise ValueError("kind must be 'disc', 'spheres' or 'atlas-peaks'")

    if presmooth > 0:
        truth = ndimage.gaussian_filter(
            truth.reshape(grid.dims), presmooth).reshape(-1)
    fields = sample_fields(grid, n_subjects, sigma_s, omega, rng)
    subjects = _observe(truth, grid, fields, sigma2, epsilon, n_subjects, rng,
                        var_scaled=True)
    parc = Parcellation(grid, labels)
    return subjects, ScalarMap(grid, truth), fields, parc


def gen_sparse_means(n=50_000, active_count=10_000, low=2.0, high=6.0,
                     seed=0):
    """Sparse-mean sample: the first active_count means uniform[low, high],
    the rest zero, unit Gaussian noise.  Returns (y, active indices)."""
    if active_count > n:
        raise ValueError("active_count exceeds sample size")
    rng = np.random.default_rng(seed)
    mu = np.zeros(n)
    mu[:active_count] = rng.uniform(low, high, active_count)
    return mu + rng.standard_normal(n), np.arange(active_count)


def _neighbors(grid):
    """Flat-index face-neighbor offsets as (axis strides, dims)."""
    strides = np.empty(grid.rank, dtype=np.intp)
    acc = 1
    for ax in range(grid.rank - 1, -1, -1):
        strides[ax] = acc
        acc *= grid.dims[ax]
    return strides


def synth_atlas(grid, N, seed=0, mask=None):
    """Connected Voronoi-style parcellation of the grid.

    Grows N regions simultaneously by breadth-first search from uniformly
    sampled seed voxels, so every region is a connected face-path Voronoi
    cell.  With a boolean mask, label 0 is reserved for the background
    and the N regions (labels 1..N) tile the masked voxels.
    """
    rng = np.random.default_rng(seed)
    d = grid.size
    if mask is None:
        eligible = np.arange(d)
    else:
        eligible = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    if not 1 <= N <= eligible.size:
        raise ValueError("need 1 <= N <= number of eligible voxels")
    seeds = rng.choice(eligible, size=N, replace=False)
    offset = 1 if mask is not None else 0
    labels = np.full(d, -1, dtype=np.int64)
    in_domain = np.zeros(d, dtype=bool)
    in_domain[eligible] = True
    queue = collections.deque()
    for j, s in enumerate(seeds):
        labels[s] = j + offset
        queue.append(int(s))
    dims = grid.dims
    strides = _neighbors(grid)
    while queue:
        v = queue.popleft()
        coord = np.unravel_index(v, dims)
        for ax in range(grid.rank):
            for step in (-1, 1):
                if not 0 <= coord[ax] + step < dims[ax]:
                    continue
                nb = v + step * strides[ax]
                if in_domain[nb] and labels[nb] < 0:
                    labels[nb] = labels[v]
                    queue.append(int(nb))
    if mask is not None:
        labels[~in_domain] = 0
    if np.any(labels < 0):
        raise ValueError("mask splits the domain; some voxels unreachable")
    return Parcellation(grid, labels)
