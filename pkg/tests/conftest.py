import numpy as np
import pytest

from dssau.autodiff import Tensor
from dssau.oracle import grad_check


def leaf(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def fd_error(build, *arrays, seed=0, weights_seed=123, floor=1e-6) -> float:
    """Worst relative error of d(sum(R * build(*leaves)))/d(leaves) vs central differences.

    Every coordinate of every leaf is checked.
    """
    leaves = [leaf(a) for a in arrays]
    out_shape = build(*leaves).shape
    r = np.random.default_rng(weights_seed).normal(size=out_shape)

    def f():
        return (build(*leaves) * Tensor(r)).sum()

    report = grad_check(f, leaves, h=1e-4, coords_per_param=10**9, seed=seed, floor=floor)
    return report.max_rel_error


@pytest.fixture
def rng():
    return np.random.default_rng(20241018)
