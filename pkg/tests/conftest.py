import numpy as np
import pytest

from pseg import kernels

BACKENDS = ["numba", "numpy"] if kernels.HAS_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run a test once per kernel backend."""
    old = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """16 random work-pieces of 128 points: every class present, fast to featurize."""
    from pseg import synth
    return synth.generate_corpus(synth.random_specs(16, 0, points_per_cloud=128), 1, 7)
