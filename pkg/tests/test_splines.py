import numpy as np
import pytest
from scipy.integrate import quad

from dietdecon.splines import (
    SplineError,
    basis_matrix,
    basis_matrix_clamped,
    eval_basis,
    integrated_basis_matrix,
    make_basis,
    make_penalty,
)


def test_knot_layout_and_areas_paper_case():
    basis = make_basis(0.0, 10.0, 12)
    assert basis.spacing == pytest.approx(1.0)
    assert len(basis.knots) == 15
    assert np.all(basis.knots[:3] == 0.0)
    assert np.all(basis.knots[-3:] == 10.0)
    assert np.all(np.diff(basis.knots) >= 0)
    expected = np.array([1 / 6, 5 / 6] + [1.0] * 8 + [5 / 6, 1 / 6])
    np.testing.assert_allclose(basis.areas, expected, rtol=0, atol=1e-15)
    assert basis.areas.sum() == pytest.approx(10.0)


def test_partition_of_unity_midpoint():
    basis = make_basis(0.0, 10.0, 12)
    assert eval_basis(basis, 5.0).sum() == pytest.approx(1.0, abs=1e-12)


def test_interior_middle_piece_value():
    # interior basis j=4 on [0,6] with J=8 has its middle interval on [2,3];
    # -u^2 + u + 1/2 at u = 1/2 gives 3/4
    basis = make_basis(0.0, 6.0, 8)
    vals = eval_basis(basis, 2.5)
    assert vals[3] == pytest.approx(0.75, abs=1e-14)


def test_boundary_values():
    basis = make_basis(0.0, 10.0, 12)
    left = eval_basis(basis, 0.0)
    assert left[0] == pytest.approx(0.5)
    assert left[1] == pytest.approx(0.5)
    assert np.all(left[2:] == 0.0)
    right = eval_basis(basis, 10.0)
    np.testing.assert_allclose(right, left[::-1], atol=1e-15)


def test_partition_of_unity_grid():
    basis = make_basis(0.0, 10.0, 12)
    grid = np.linspace(0.0, 10.0, 1000)
    sums = basis_matrix(basis, grid).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)


def test_local_support_and_nonnegativity():
    basis = make_basis(0.0, 6.0, 9)
    rng = np.random.default_rng(5)
    for x in rng.uniform(0.0, 6.0, size=50):
        vals = eval_basis(basis, x)
        assert np.all(vals >= 0.0)
        assert np.count_nonzero(vals) <= 3


def test_areas_match_quadrature():
    basis = make_basis(0.0, 10.0, 12)
    for j in range(basis.num_bases):
        val, _ = quad(lambda x: eval_basis(basis, x)[j], 0.0, 10.0,
                      points=np.unique(basis.knots), limit=200)
        assert val == pytest.approx(basis.areas[j], abs=1e-10)


def test_integrated_basis_matches_quadrature():
    basis = make_basis(0.0, 6.0, 8)
    for x in (0.3, 1.7, 4.2, 6.0):
        exact = integrated_basis_matrix(basis, x)
        for j in range(basis.num_bases):
            val, _ = quad(lambda t: eval_basis(basis, t)[j], 0.0, x,
                          points=np.unique(basis.knots), limit=200)
            assert exact[j] == pytest.approx(val, abs=1e-10)


def test_clamped_evaluation_extends_constantly():
    basis = make_basis(0.0, 10.0, 12)
    np.testing.assert_allclose(basis_matrix_clamped(basis, 12.5),
                               basis_matrix(basis, 10.0))
    with pytest.raises(SplineError):
        basis_matrix(basis, 10.5)


def test_construction_errors():
    with pytest.raises(SplineError):
        make_basis(1.0, 1.0, 12)
    with pytest.raises(SplineError):
        make_basis(0.0, 10.0, 4)
    with pytest.raises(SplineError):
        make_penalty(2)


def test_penalty_annihilates_affine():
    pen = make_penalty(12)
    const = np.ones(12)
    lin = np.arange(12.0)
    assert const @ pen.matrix @ const == pytest.approx(0.0, abs=1e-12)
    assert lin @ pen.matrix @ lin == pytest.approx(0.0, abs=1e-10)


def test_penalty_quadratic_form_spike():
    # second differences of (0,0,1,0) are (1,-2): quadratic form 5
    pen = make_penalty(4)
    x = np.array([0.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(pen.diff_operator @ x, [1.0, -2.0])
    assert x @ pen.matrix @ x == pytest.approx(5.0)


def test_penalty_psd_and_rank():
    pen = make_penalty(12)
    np.testing.assert_allclose(pen.matrix, pen.matrix.T)
    eigvals = np.linalg.eigvalsh(pen.matrix)
    assert eigvals.min() >= -1e-10
    assert pen.rank == 10
    assert np.linalg.matrix_rank(pen.matrix) == 10


def test_penalty_equals_sum_of_squared_second_differences():
    pen = make_penalty(9)
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=9)
        direct = np.sum((x[:-2] - 2 * x[1:-1] + x[2:]) ** 2)
        assert x @ pen.matrix @ x == pytest.approx(direct, rel=1e-12)
