import numpy as np
import pytest

import slimnas.layers


@pytest.fixture
def float64_layers():
    """Run layer math in float64 so finite differences are meaningful."""
    previous = slimnas.layers.DTYPE
    slimnas.layers.DTYPE = np.float64
    yield
    slimnas.layers.DTYPE = previous
