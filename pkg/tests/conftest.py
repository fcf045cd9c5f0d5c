import os

# one compute thread everywhere, so handoff and in-process models compare
# bit-for-bit (must happen before numpy initializes its BLAS)
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from tshm import CooTensor


def random_tensor(rng, dims, nnz, distinct=True) -> CooTensor:
    """Random COO tensor; coordinates distinct unless asked otherwise."""
    dims = tuple(int(n) for n in dims)
    total = int(np.prod(dims))
    if distinct:
        nnz = min(nnz, total)
        flat = rng.choice(total, size=nnz, replace=False)
    else:
        flat = rng.integers(0, total, size=nnz)
    coords = np.stack(np.unravel_index(flat, dims), axis=1).astype(np.uint64)
    values = rng.standard_normal(nnz)
    return CooTensor(dims, coords.reshape(-1), values)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
