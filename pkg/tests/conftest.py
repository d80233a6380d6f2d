import pytest

from poolbert import tensor


@pytest.fixture(autouse=True)
def finite_checks():
    """NaN/Inf scanning at op boundaries is on for the whole suite."""
    previous = tensor.set_finite_checks(True)
    yield
    tensor.set_finite_checks(previous)
