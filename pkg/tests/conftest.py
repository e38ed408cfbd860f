import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, floor=0.1):
    B = rng.standard_normal((d, d))
    return B @ B.T + floor * np.eye(d)


def rel_fro(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-300)
