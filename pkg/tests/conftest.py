import pytest


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed tests measure the algorithm."""
    from splatslam import _kernels

    _kernels.warm_up()
