import numpy as np
import pytest
from scipy import ndimage

from voxelselect.volume import VoxelGrid, mask_components
from voxelselect.simulate import (
    gen_1d,
    gen_grid_phantom,
    gen_sparse_means,
    sample_fields,
    synth_atlas,
)


def test_gen_1d_noiseless_identity():
    subs, truth, ds = gen_1d(n_subjects=3, sigma_s=0.0, sigma2=0.0,
                             epsilon=0.0, seed=1)
    for s in subs:
        assert np.array_equal(s.effects.values, truth.values)
        assert np.all(s.variances.values == 0.0)
    assert np.all(ds.weights == 0.0)


def test_gen_1d_signal_presence():
    for seed in range(10):
        subs, truth, _ = gen_1d(seed=seed)
        naive = np.mean([s.effects.values for s in subs], axis=0)
        r = np.corrcoef(naive, truth.values)[0, 1]
        assert r > 0.5


def _peak_count(v, floor):
    inner = (v[1:-1] > v[:-2]) & (v[1:-1] > v[2:]) & (v[1:-1] > floor)
    return int(inner.sum())


def test_gen_1d_nearby_bumps_merge_in_naive_mean():
    subs, truth, _ = gen_1d(seed=0)
    naive = np.mean([s.effects.values for s in subs], axis=0)
    smoothed = ndimage.gaussian_filter1d(naive, 2.0)
    assert _peak_count(truth.values, 1.0) == 3
    assert _peak_count(smoothed, 1.0) < 3


def test_gen_1d_default_shapes():
    subs, truth, ds = gen_1d()
    assert len(subs) == 40 and truth.grid.dims == (50,)
    assert ds.weights.shape == (40, ds.lattice.count, 1)


def test_field_marginal_std(rng):
    grid = VoxelGrid((16, 16))
    fields = sample_fields(grid, 200, 2.0, 4.0, rng)
    center = grid.ravel(np.array([[8, 8]]))[0]
    stds = fields[:, center, :].std(axis=0)
    assert np.allclose(stds, 2.0, atol=3 * 2.0 / np.sqrt(2 * 200) + 0.15)


def test_field_spatial_smoothness(rng):
    grid = VoxelGrid((64,))
    fields = sample_fields(grid, 60, 1.0, 4.0, rng)
    a, b = fields[:, 30, 0], fields[:, 31, 0]
    assert np.corrcoef(a, b)[0, 1] > 0.9


def test_disc_phantom_defaults():
    subs, truth, fields, parc = gen_grid_phantom("disc", seed=3)
    assert len(subs) == 30 and truth.grid.dims == (24, 24)
    assert parc.region_count == 2
    # independent disc-size oracle
    yy, xx = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
    inside = (yy - 11.5) ** 2 + (xx - 11.5) ** 2 <= 3.5 ** 2
    assert parc.region_sizes[1] == inside.sum()
    assert np.all(truth.values[parc.labels == 1] == 5.0)
    assert fields.shape == (30, 576, 2)


def test_sphere_phantom_defaults():
    subs, truth, fields, parc = gen_grid_phantom("spheres", seed=4)
    assert truth.grid.dims == (24, 32, 32)
    assert len(subs) == 40 and parc.region_count == 3
    assert parc.region_sizes[1] == parc.region_sizes[2]  # congruent spheres
    # pre-smoothing moves mass off the plateau but keeps the peak near 5
    assert 3.0 < truth.values.max() <= 5.0
    assert truth.values.min() >= 0.0


def test_phantom_noise_moments():
    subs, truth, _, _ = gen_grid_phantom(
        "disc", dims=(12, 12), n_subjects=400, sigma_s=0.0, epsilon=0.0,
        seed=5)
    Y = np.stack([s.effects.values for s in subs])
    resid_var = Y.var(axis=0).mean()
    assert resid_var == pytest.approx(1.0, abs=3 * np.sqrt(2 / 400))
    assert all(np.all(s.variances.values == 0.0) for s in subs)


def test_phantom_geometry_error():
    with pytest.raises(ValueError):
        gen_grid_phantom("disc", dims=(10, 10), diameter=50.0)


def test_atlas_peaks_phantom(rng):
    grid = VoxelGrid((16, 16))
    atlas = synth_atlas(grid, 4, seed=7)
    subs, truth, fields, parc = gen_grid_phantom(
        "atlas-peaks", atlas=atlas, active_regions=[2], n_subjects=5,
        value=5.0, kernel_radius=2.0, seed=7)
    assert parc is atlas or np.array_equal(parc.labels, atlas.labels)
    centroid = grid.coordinates()[atlas.region_voxels(2)].mean(axis=0)
    peak_vox = int(np.argmax(truth.values))
    dist = np.linalg.norm(grid.coordinates()[peak_vox] - centroid)
    assert dist < 1.0  # peak sits at the active region's centroid
    assert truth.values.max() == pytest.approx(5.0, rel=0.1)


def test_sparse_means_null():
    y, active = gen_sparse_means(1000, 100, 0.0, 0.0, seed=0)
    assert abs(y.mean()) < 3 / np.sqrt(1000)
    assert len(active) == 100


def test_sparse_means_active_block():
    y, active = gen_sparse_means(50_000, 10_000, 2.0, 6.0, seed=1)
    block = y[active]
    se = np.sqrt((1.0 + (6 - 2) ** 2 / 12) / len(active))
    assert block.mean() == pytest.approx(4.0, abs=3 * se)
    assert y[10_000:].mean() == pytest.approx(0.0, abs=3 / np.sqrt(40_000))


def test_sparse_means_validation():
    with pytest.raises(ValueError):
        gen_sparse_means(10, 20)


def test_atlas_single_region():
    parc = synth_atlas(VoxelGrid((5, 5)), 1, seed=0)
    assert parc.region_count == 1
    assert np.all(parc.labels == 0)


def test_atlas_regions_connected_and_partition(rng):
    grid = VoxelGrid((12, 12, 6))
    parc = synth_atlas(grid, 9, seed=11)
    assert parc.region_count == 9
    total = 0
    for j in range(9):
        vox = parc.region_voxels(j)
        total += len(vox)
        mask = np.zeros(grid.size, dtype=bool)
        mask[vox] = True
        assert len(mask_components(grid, mask)) == 1
    assert total == grid.size


def test_atlas_with_mask():
    grid = VoxelGrid((10, 10))
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:8, 2:8] = True
    parc = synth_atlas(grid, 3, seed=2, mask=mask)
    assert parc.region_count == 4  # background + 3
    assert np.all((parc.labels == 0) == ~mask.reshape(-1))


def test_atlas_seed_reproducible():
    grid = VoxelGrid((8, 8))
    p1 = synth_atlas(grid, 5, seed=3)
    p2 = synth_atlas(grid, 5, seed=3)
    assert np.array_equal(p1.labels, p2.labels)


def test_atlas_too_many_regions():
    with pytest.raises(ValueError):
        synth_atlas(VoxelGrid((3,)), 4)
