import numpy as np
import pytest

import gradcheck


@pytest.mark.parametrize("name", sorted(gradcheck.CASES))
def test_gradient_matches_central_difference(name):
    rng = np.random.default_rng(7)
    for _ in range(5):
        fn, x = gradcheck.CASES[name](rng)
        # a vanishing gradient would make the comparison vacuous
        assert float(gradcheck.analytic(fn, x).norm()) > 0
        assert gradcheck.relative_error(fn, x) <= gradcheck.TOLERANCE


def test_finite_difference_on_known_function():
    import torch

    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    fd = gradcheck.finite_difference(lambda v: (v**3).sum(), x)
    assert torch.allclose(fd, 3 * x**2, atol=1e-7)
