import pytest

from gradcases import ALL_CASES, INSTANCES, run_case
from gradcheck import TOL32, TOL64


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_finite_differences(name):
    err32, err64 = run_case(name, INSTANCES)
    assert err32 < TOL32, f"{name}: float32 relative error {err32:.2e}"
    assert err64 < TOL64, f"{name}: float64 relative error {err64:.2e}"
