import numpy as np
import pytest

from memshard.data import Dataset
from memshard.diffusion import Arch, build_schedule, init_params


@pytest.fixture
def sched():
    return build_schedule(20, "cosine")


@pytest.fixture
def tiny_arch():
    return Arch(D=4, E_t=4, hidden=(6, 5))


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(tiny_arch, 0)


def toy_dataset(N=40, D=4, n_classes=4, seed=0, dup_rows=()):
    rng = np.random.default_rng(seed)
    H = int(round(np.sqrt(D)))
    X = rng.random((N, D))
    dup = np.full(N, -1)
    for r in dup_rows:
        X[r] = X[dup_rows[0]]
        dup[r] = 0
    return Dataset(X, np.arange(N) + 100, H, np.arange(N) % n_classes, dup, {"seed": seed})


@pytest.fixture
def toy():
    return toy_dataset()
