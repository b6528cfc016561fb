"""Quadratic B-spline bases on a closed interval with equidistant interior knots.

The basis is the translate family of the cardinal quadratic B-spline bump,
truncated at the interval ends, so the two boundary bases keep only their
inner pieces.  Mixtures of these bases normalize in closed form because every
basis has a known area (delta/6, 5*delta/6 or delta).
"""

from dataclasses import dataclass

import numpy as np


class SplineError(ValueError):
    """Invalid spline construction or evaluation request."""


@dataclass(frozen=True)
class SplineBasis:
    """Quadratic B-spline basis with ``num_bases`` functions on [a, b].

    Attributes
    ----------
    a, b : float
        Support interval.
    num_bases : int
        Number of basis functions J.  The interval is split into J - 2
        equal subintervals of width ``spacing``.
    knots : ndarray, shape (J + 3,)
        Nondecreasing knot vector with both end knots repeated 3 times.
    areas : ndarray, shape (J,)
        Integral of each basis over [a, b]; sums to b - a.
    """

    a: float
    b: float
    num_bases: int
    knots: np.ndarray
    spacing: float
    areas: np.ndarray
    degree: int = 2


@dataclass(frozen=True)
class PenaltyMatrix:
    """Second-order difference penalty P = D'D with D of shape (J-2, J)."""

    matrix: np.ndarray
    diff_operator: np.ndarray
    rank: int


def make_basis(a, b, num_bases):
    """Build the quadratic basis with ``num_bases`` functions on [a, b].

    Requires b > a and num_bases >= 5 so that the boundary-modified and the
    interior piecewise formulas both occur.
    """
    if not np.isfinite(a) or not np.isfinite(b) or b <= a:
        raise SplineError(f"invalid interval [{a}, {b}]")
    if num_bases < 5:
        raise SplineError(f"need at least 5 bases, got {num_bases}")
    j = int(num_bases)
    intervals = j - 2
    delta = (b - a) / intervals
    interior = a + delta * np.arange(intervals + 1)
    interior[-1] = b
    knots = np.concatenate(([a, a], interior, [b, b]))
    areas = np.full(j, delta)
    areas[[0, -1]] = delta / 6.0
    areas[[1, -2]] = 5.0 * delta / 6.0
    return SplineBasis(a=float(a), b=float(b), num_bases=j, knots=knots,
                       spacing=delta, areas=areas)


def _bump(v):
    """Cardinal quadratic B-spline on [0, 3], vectorized."""
    v = np.asarray(v, dtype=float)
    out = np.zeros_like(v)
    m = (v >= 0.0) & (v < 1.0)
    out[m] = 0.5 * v[m] ** 2
    m = (v >= 1.0) & (v < 2.0)
    out[m] = -v[m] ** 2 + 3.0 * v[m] - 1.5
    m = (v >= 2.0) & (v <= 3.0)
    out[m] = 0.5 * (3.0 - v[m]) ** 2
    return out


def _bump_integral(v):
    """Antiderivative of ``_bump`` from 0, clamped to [0, 3]."""
    v = np.clip(np.asarray(v, dtype=float), 0.0, 3.0)
    out = np.empty_like(v)
    m = v < 1.0
    out[m] = v[m] ** 3 / 6.0
    m = (v >= 1.0) & (v < 2.0)
    out[m] = -v[m] ** 3 / 3.0 + 1.5 * v[m] ** 2 - 1.5 * v[m] + 0.5
    m = v >= 2.0
    out[m] = 1.0 - (3.0 - v[m]) ** 3 / 6.0
    return out


def _offsets(basis, x):
    x = np.asarray(x, dtype=float)
    s = (x - basis.a) / basis.spacing
    # basis j (0-based) is the cardinal bump shifted so its argument is s - j + 2
    return s[..., None] - np.arange(basis.num_bases) + 2.0


def basis_matrix(basis, x):
    """Evaluate all bases at points ``x``; returns shape (*x.shape, J).

    Raises for x outside [a, b].
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < basis.a) or np.any(x > basis.b):
        raise SplineError(f"evaluation point outside [{basis.a}, {basis.b}]")
    return _bump(_offsets(basis, x))


def basis_matrix_clamped(basis, x):
    """Like :func:`basis_matrix` but x is clamped to [a, b] first.

    Constant extension used by the sampler, where consumption-day intakes
    can transiently leave the modeled support.
    """
    x = np.clip(np.asarray(x, dtype=float), basis.a, basis.b)
    return _bump(_offsets(basis, x))


def integrated_basis_matrix(basis, x):
    """Integral of each basis from a to x; returns shape (*x.shape, J)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < basis.a) or np.any(x > basis.b):
        raise SplineError(f"evaluation point outside [{basis.a}, {basis.b}]")
    v = _offsets(basis, x)
    v0 = 2.0 - np.arange(basis.num_bases)
    return basis.spacing * (_bump_integral(v) - _bump_integral(v0))


def eval_basis(basis, x):
    """Basis values at a scalar x as a length-J vector."""
    return basis_matrix(basis, float(x))


def make_penalty(num_bases):
    """Second-difference penalty for a length-``num_bases`` coefficient vector."""
    j = int(num_bases)
    if j < 3:
        raise SplineError(f"penalty needs at least 3 coefficients, got {j}")
    d = np.zeros((j - 2, j))
    for r in range(j - 2):
        d[r, r: r + 3] = (1.0, -2.0, 1.0)
    return PenaltyMatrix(matrix=d.T @ d, diff_operator=d, rank=j - 2)
