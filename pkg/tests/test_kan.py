import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from takand.kan import KANLayer, bspline_basis, make_grid

D = torch.float64


def cox_de_boor(x, knots, i, k):
    """Textbook recursive definition for a single basis function."""
    if k == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(x, knots, i, k - 1)
    right = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) * cox_de_boor(x, knots, i + 1, k - 1)
    return left + right


def test_grid_shape():
    g = make_grid(5, 3)
    assert len(g) == 5 + 2 * 3 + 1
    assert g[3].item() == pytest.approx(-1.0) and g[-4].item() == pytest.approx(1.0)


def test_order_zero_indicator():
    grid = make_grid(5, 0, dtype=D)
    x = torch.tensor([-0.9, -0.1, 0.5], dtype=D)
    B = bspline_basis(x, grid, 0, extrapolate=False)
    for row, j in zip(B, [0, 2, 3]):
        expected = torch.zeros(5, dtype=D)
        expected[j] = 1.0
        assert torch.equal(row, expected)


def test_partition_of_unity():
    grid = make_grid(5, 3, dtype=D)
    x = torch.linspace(-1, 1, 1000, dtype=D)
    B = bspline_basis(x, grid, 3)
    assert float((B.sum(-1) - 1).abs().max()) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.integers(1, 8), st.integers(0, 4))
def test_partition_of_unity_property(x, G, k):
    grid = make_grid(G, k, dtype=D)
    B = bspline_basis(torch.tensor([x], dtype=D), grid, k)
    assert abs(float(B.sum()) - 1.0) < 1e-9
    assert float(B.min()) >= -1e-12


@pytest.mark.parametrize("x", [-0.9, -0.5, -0.1, 0.3, 0.7])
def test_matches_recursive_definition_at_midpoints(x):
    grid = make_grid(5, 3, dtype=D)
    knots = grid.tolist()
    B = bspline_basis(torch.tensor([x], dtype=D), grid, 3, extrapolate=False)[0]
    expected = [cox_de_boor(x, knots, i, 3) for i in range(5 + 3)]
    assert np.allclose(B.numpy(), expected, atol=1e-12)


def test_linear_extrapolation_outside_range():
    torch.manual_seed(0)
    layer = KANLayer(1, 1).double()
    with torch.no_grad():
        layer.base_weight.zero_()
    xs = torch.tensor([[1.2], [1.5], [1.8]], dtype=D)
    y = layer(xs)[:, 0]
    y = y.detach()
    assert abs(float((y[2] - y[1]) - (y[1] - y[0]))) < 1e-12


def test_non_monotone_grid_rejected():
    with pytest.raises(ValueError):
        bspline_basis(torch.zeros(1), torch.tensor([0.0, 1.0, 0.5, 2.0]), 1)


def test_zero_coefficients_zero_output():
    layer = KANLayer(3, 2)
    with torch.no_grad():
        layer.base_weight.zero_()
        layer.spline_coeffs.zero_()
    assert torch.equal(layer(torch.randn(4, 3)), torch.zeros(4, 2))


def test_least_squares_fit_reproduces_sin():
    grid = make_grid(5, 3, dtype=D)
    xs = np.linspace(-1, 1, 200)
    A = np.array([[cox_de_boor(x if x < 1 else 1 - 1e-12, grid.tolist(), i, 3) for i in range(8)] for x in xs])
    coef, *_ = np.linalg.lstsq(A, np.sin(np.pi * xs), rcond=None)
    fit_err = np.abs(A @ coef - np.sin(np.pi * xs)).max()
    layer = KANLayer(1, 1).double()
    with torch.no_grad():
        layer.base_weight.zero_()
        layer.spline_coeffs.copy_(torch.as_tensor(coef).reshape(1, 1, 8))
    out = layer(torch.as_tensor(xs)[:, None])[:, 0].detach().numpy()
    assert np.allclose(out, A @ coef, atol=1e-9)
    assert np.abs(out - np.sin(np.pi * xs)).max() < fit_err + 1e-6


def test_random_layer_direct_summation():
    torch.manual_seed(2)
    layer = KANLayer(3, 2, scale_base=0.7, scale_spline=1.3).double()
    x = torch.rand(4, 3, dtype=D, generator=torch.Generator().manual_seed(0)) * 1.8 - 0.9
    grid = layer.grid.tolist()
    Wb = layer.base_weight.detach().numpy()
    C = layer.spline_coeffs.detach().numpy()
    out = np.zeros((4, 2))
    for n in range(4):
        for j in range(2):
            for i in range(3):
                xi = float(x[n, i])
                out[n, j] += 0.7 * Wb[j, i] * xi / (1 + np.exp(-xi))
                out[n, j] += 1.3 * sum(C[j, i, b] * cox_de_boor(xi, grid, b, 3) for b in range(8))
    assert np.allclose(layer(x).detach().numpy(), out, atol=1e-12)


def test_wrong_input_width():
    with pytest.raises(ValueError):
        KANLayer(3, 2)(torch.zeros(1, 4))
