import numpy as np
import pytest

from seqbc import tensor as T


@pytest.fixture(autouse=True)
def float64_default():
    # The unit suites check numerics against tight tolerances (and run
    # finite-difference gradient checks), which need doubles. Tests that
    # exercise the shipped float32 default switch back explicitly.
    prev = T.default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)
