import numpy as np
import pytest
import scipy.sparse as sp

from xcmix.dataset import SparseDataset, generate_synthetic


@pytest.fixture(scope="session")
def tiny_synth():
    """Small planted dataset shared by fast tests."""
    return generate_synthetic(300, 64, 40, 2, noise_level=0.05, seed=11)


def make_dataset(n, d, l, seed=0, density=0.2, min_pos=0, max_pos=3, label_feats=False):
    """Random (not planted) dataset for structural tests."""
    rng = np.random.default_rng(seed)
    feats = sp.random(n, d, density=density, format="csr", dtype=np.float32,
                      random_state=np.random.RandomState(seed))
    positives = []
    for _ in range(n):
        k = int(rng.integers(min_pos, max_pos + 1))
        positives.append(np.sort(rng.choice(l, size=min(k, l), replace=False)).astype(np.int32))
    lf = None
    if label_feats:
        lf = sp.random(l, d, density=density, format="csr", dtype=np.float32,
                       random_state=np.random.RandomState(seed + 1))
    return SparseDataset(n, d, l, feats, positives, lf)
