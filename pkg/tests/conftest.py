import numpy as np
import pytest
from hypothesis import settings

from neurofem.fem import poisson_disk_system
from neurofem.kernels import compiled_backend

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

BACKENDS = ["python"] + (["compiled"] if compiled_backend is not None else [])


@pytest.fixture(scope="session")
def small_system():
    # 37 unknowns
    return poisson_disk_system(0.05)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def random_spd(n, seed=0, density=0.2):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    return M @ M.T + n * np.eye(n)
