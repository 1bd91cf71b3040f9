import numpy as np
import pytest

from voxelselect.volume import VoxelGrid, ScalarMap, Parcellation, SubjectData


def make_subjects(Y, S2, grid):
    return [
        SubjectData(ScalarMap(grid, Y[i]), ScalarMap(grid, S2[i]))
        for i in range(Y.shape[0])
    ]


def simulate_flat(rng, grid, parc, eta, nu2, sig2, n, s2_low=0.5, s2_high=1.5):
    """Draw a dataset from the regional model with zero displacements."""
    eta = np.asarray(eta, dtype=float)
    nu2 = np.asarray(nu2, dtype=float)
    sig2 = np.asarray(sig2, dtype=float)
    labels = parc.labels
    d = grid.size
    mu = eta[labels] + np.sqrt(nu2[labels]) * rng.standard_normal(d)
    S2 = rng.uniform(s2_low, s2_high, (n, d))
    X = mu + np.sqrt(sig2[labels]) * rng.standard_normal((n, d))
    Y = X + np.sqrt(S2) * rng.standard_normal((n, d))
    return Y, S2, mu


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)
