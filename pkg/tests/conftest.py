import numpy as np
import pytest

from ctsev import tensor


@pytest.fixture(autouse=True)
def single_precision_default():
    """Tests share one process; always restore the default precision."""
    tensor.set_precision("single")
    yield
    tensor.set_precision("single")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
