import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funmon.basis import (
    block_gram,
    build_basis,
    evaluate_design,
    integral_weights,
    project_values,
)
from funmon.errors import InvalidConfiguration, OutOfDomain


def grid_quadrature_matrix(basis, deriv, n_grid):
    """Trapezoid-rule oracle for the integral matrices."""
    a, b = basis.domain
    grid = np.linspace(a, b, n_grid)
    design = evaluate_design(basis, grid, deriv=deriv)
    w = np.full(n_grid, (b - a) / (n_grid - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return design @ (design.T * w[:, None])


def test_partition_of_unity_cubic():
    basis = build_basis((0.0, 1.0), K=4, order=4)
    t = np.linspace(0, 1, 101)
    design = evaluate_design(basis, t)
    assert np.allclose(design.sum(axis=0), 1.0, atol=1e-12)


def test_step_function_gram():
    basis = build_basis((0.0, 1.0), K=2, order=1)
    assert np.allclose(basis.gram, np.diag([0.5, 0.5]), atol=1e-14)
    assert np.allclose(basis.penalty2, 0.0)
    col = evaluate_design(basis, [0.25])[:, 0]
    assert np.allclose(col, [1.0, 0.0])


def test_gram_and_penalty_match_dense_grid_oracle():
    basis = build_basis((0.0, 1.0), K=10, order=4)
    w_oracle = grid_quadrature_matrix(basis, 0, 100_001)
    assert np.max(np.abs(basis.gram - w_oracle)) < 1e-8
    r_oracle = grid_quadrature_matrix(basis, 2, 100_001)
    # second derivatives reach ~1e3 here; compare on a matching scale
    assert np.max(np.abs(basis.penalty2 - r_oracle)) < 1e-8 * max(
        1.0, np.abs(r_oracle).max()
    )


def test_penalty_annihilates_lines():
    basis = build_basis((0.0, 2.0), K=12, order=4)
    grid = np.linspace(0, 2, 200)
    tol = 1e-12 * np.abs(basis.penalty2).max()
    for fn in (lambda t: np.ones_like(t), lambda t: 3.0 - 0.5 * t):
        c = project_values(basis, grid, fn(grid))
        assert abs(c @ basis.penalty2 @ c) < tol * (1.0 + c @ c)


def test_gram_reproduces_inner_products():
    basis = build_basis((0.0, 1.0), K=8, order=4)
    rng = np.random.default_rng(0)
    cf, cg = rng.normal(size=(2, basis.K))
    grid = np.linspace(0, 1, 200_001)
    design = evaluate_design(basis, grid)
    f, g = cf @ design, cg @ design
    assert abs(cf @ basis.gram @ cg - np.trapezoid(f * g, grid)) < 1e-8


def test_gram_eigenvalues_strictly_positive():
    for K, order in [(4, 4), (12, 4), (7, 3), (2, 1)]:
        basis = build_basis((0.0, 1.0), K=K, order=order)
        assert np.linalg.eigvalsh(basis.gram).min() > 0


def test_derivative_against_finite_differences():
    basis = build_basis((0.0, 1.0), K=9, order=4)
    # second derivatives kink at knots; sample strictly inside the spans
    breaks = np.unique(basis.knots)
    t = (breaks[:-1] + breaks[1:]) / 2
    h = 1e-4
    d2 = evaluate_design(basis, t, deriv=2)
    fd = (
        evaluate_design(basis, t + h)
        - 2 * evaluate_design(basis, t)
        + evaluate_design(basis, t - h)
    ) / h**2
    scale = np.abs(d2).max()
    assert np.max(np.abs(d2 - fd)) < 1e-6 * scale


def test_out_of_support_columns_exactly_zero():
    basis = build_basis((0.0, 1.0), K=12, order=4)
    col = evaluate_design(basis, [0.05])[:, 0]
    assert np.all(col[6:] == 0.0)


def test_invalid_configurations():
    with pytest.raises(InvalidConfiguration):
        build_basis((0.0, 1.0), K=3, order=4)
    with pytest.raises(InvalidConfiguration):
        build_basis((1.0, 1.0), K=4, order=4)
    basis = build_basis((0.0, 1.0), K=4, order=4)
    with pytest.raises(OutOfDomain):
        evaluate_design(basis, [1.5])


def test_block_gram_and_integral_weights():
    basis = build_basis((0.0, 1.0), K=5, order=3)
    bg = block_gram(basis, 3)
    assert bg.shape == (15, 15)
    assert np.allclose(bg[5:10, 5:10], basis.gram)
    assert np.all(bg[0:5, 5:10] == 0)
    assert np.isclose(integral_weights(basis).sum(), 1.0)  # integral of 1 over [0,1]


@settings(deadline=None, max_examples=25)
@given(
    K=st.integers(min_value=4, max_value=15),
    alpha=st.floats(min_value=-5, max_value=5),
    beta=st.floats(min_value=-5, max_value=5),
)
def test_line_in_penalty_nullspace_property(K, alpha, beta):
    basis = build_basis((0.0, 1.0), K=K, order=4)
    grid = np.linspace(0, 1, 120)
    c = project_values(basis, grid, alpha + beta * grid)
    tol = 1e-12 * max(1.0, np.abs(basis.penalty2).max())
    assert abs(c @ basis.penalty2 @ c) < tol * (1.0 + c @ c)
