import numpy as np
import pytest

from garamost import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body under float64 working precision."""
    with T.precision("float64"):
        yield


def t64(rng, *shape, scale=1.0, grad=True):
    """A float64 tensor of standard normals, ready for grad checking."""
    data = rng.standard_normal(shape) * scale
    return T.Tensor(data, requires_grad=grad)
