"""Correlation matrices in spherical-Cholesky coordinates and Gaussian copulas.

The Cholesky factor V of a correlation matrix has unit-norm rows; row l is
written as b_{l-1} times a point on the unit sphere (angles theta) with
V[l, l] = sqrt(1 - b_{l-1}^2).  Any correlation matrix can be recovered in
this form by inverting the trigonometric ladder row by row, so the family
is exhaustive.  det(R) = prod_t (1 - b_t^2).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.special import ndtr, ndtri


class CopulaError(ValueError):
    """Invalid correlation parameters or copula evaluation request."""


class BoundaryScoreError(CopulaError):
    """A marginal CDF hit 0 or 1, so the normal score is infinite."""


def theta_count(dim):
    """Number of angle parameters for a ``dim``-dimensional correlation."""
    return (dim - 1) * (dim - 2) // 2


def first_theta_index(row):
    """1-based index map i1(l) of the first angle feeding row ``row`` >= 3."""
    return (row * row - 5 * row + 8) // 2


def last_theta_index(row):
    """1-based index map i2(l) of the last angle feeding row ``row`` >= 3."""
    return (row * row - 3 * row + 2) // 2


@dataclass(frozen=True)
class SphericalCorrelation:
    """Correlation matrix R = V V' with its spherical parameters cached."""

    dim: int
    b: np.ndarray
    theta: np.ndarray
    cholesky_factor: np.ndarray
    matrix: np.ndarray

    @property
    def log_det(self):
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log1p(-self.b ** 2)))

    def det(self):
        return float(np.prod(1.0 - self.b ** 2))

    def is_singular(self):
        return bool(np.any(np.abs(self.b) >= 1.0))


def _sphere_point(angles, length):
    """Unit vector of ``length`` coords from ``length - 1`` angles."""
    u = np.empty(length)
    run = 1.0
    for k, a in enumerate(angles):
        u[k] = run * math.sin(a)
        run *= math.cos(a)
    u[length - 1] = run
    return u


def build_corr(b, theta):
    """Assemble the correlation matrix from (b, theta).

    Requires |b_t| <= 1 and |theta_s| <= pi with len(theta) matching
    ``theta_count(len(b) + 1)``.
    """
    b = np.atleast_1d(np.asarray(b, dtype=float))
    theta = np.asarray(theta, dtype=float).reshape(-1)
    dim = len(b) + 1
    if len(theta) != theta_count(dim):
        raise CopulaError(
            f"need {theta_count(dim)} angles for dimension {dim}, got {len(theta)}")
    if np.any(np.abs(b) > 1.0):
        raise CopulaError("|b_t| must not exceed 1")
    if np.any(np.abs(theta) > math.pi + 1e-12):
        raise CopulaError("|theta_s| must not exceed pi")
    v = np.zeros((dim, dim))
    v[0, 0] = 1.0
    pos = 0
    for row in range(1, dim):
        n_angles = row - 1
        u = _sphere_point(theta[pos: pos + n_angles], row)
        pos += n_angles
        v[row, :row] = b[row - 1] * u
        v[row, row] = math.sqrt(max(0.0, 1.0 - b[row - 1] ** 2))
        # renormalize against trig rounding drift
        norm = math.sqrt(float(v[row, : row + 1] @ v[row, : row + 1]))
        v[row, : row + 1] /= norm
    r = v @ v.T
    np.fill_diagonal(r, 1.0)
    r = 0.5 * (r + r.T)
    return SphericalCorrelation(dim=dim, b=b.copy(), theta=theta.copy(),
                                cholesky_factor=v, matrix=r)


def _recover_angles(u):
    """Angles reproducing unit vector ``u`` through ``_sphere_point``."""
    length = len(u)
    angles = np.zeros(length - 1)
    run = 1.0
    for k in range(length - 2):
        s = u[k] / run if run > 1e-300 else 0.0
        angles[k] = math.asin(min(1.0, max(-1.0, s)))
        run *= math.cos(angles[k])
        if run < 1e-300:
            return angles
    if run > 1e-300:
        angles[length - 2] = math.atan2(u[length - 2] / run, u[length - 1] / run)
    return angles


def recover_params(r):
    """Invert :func:`build_corr`: correlation matrix -> (b, theta).

    The matrix must be symmetric with unit diagonal and strictly positive
    definite.  Returns parameters with b_t >= 0 for rows >= 3 (the sign is
    carried by the angles); build_corr(b, theta) reproduces ``r``.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise CopulaError("correlation matrix must be square")
    if np.max(np.abs(np.diag(r) - 1.0)) > 1e-10:
        raise CopulaError("correlation matrix must have unit diagonal")
    if np.max(np.abs(r - r.T)) > 1e-10:
        raise CopulaError("correlation matrix must be symmetric")
    dim = r.shape[0]
    try:
        v = cholesky(0.5 * (r + r.T), lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise CopulaError("correlation matrix is not positive definite") from exc
    b = np.zeros(dim - 1)
    theta = np.zeros(theta_count(dim))
    pos = 0
    for row in range(1, dim):
        head = v[row, :row]
        if row == 1:
            b[0] = head[0]
            continue
        norm = math.sqrt(float(head @ head))
        b[row - 1] = norm
        n_angles = row - 1
        if norm > 1e-300:
            theta[pos: pos + n_angles] = _recover_angles(head / norm)
        pos += n_angles
    return b, theta


def normal_scores(marginals, x):
    """Gaussian scores Phi^{-1}(F_l(x_l)) for a point or an (n, D) array."""
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    u = np.column_stack([np.asarray(m.cdf(pts[:, j]), dtype=float)
                         for j, m in enumerate(marginals)])
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise BoundaryScoreError("marginal CDF reached 0 or 1")
    scores = ndtri(u)
    return scores[0] if x.ndim == 1 else scores


@dataclass(frozen=True)
class GaussianCopula:
    """Gaussian copula with held marginal distributions."""

    correlation: SphericalCorrelation
    marginals: tuple

    def __post_init__(self):
        if len(self.marginals) != self.correlation.dim:
            raise CopulaError("one marginal per coordinate is required")


def copula_log_density(cop, x):
    """Log joint density: copula factor plus the marginal log densities."""
    corr = cop.correlation
    if corr.is_singular():
        raise CopulaError("singular correlation (some |b_t| = 1)")
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    scores = np.atleast_2d(normal_scores(cop.marginals, pts))
    factor = gaussian_copula_log_factor(scores, corr)
    marg = np.zeros(pts.shape[0])
    for j, m in enumerate(cop.marginals):
        with np.errstate(divide="ignore"):
            marg += np.log(np.asarray(m.density(pts[:, j]), dtype=float))
    out = factor + marg
    return float(out[0]) if x.ndim == 1 else out


def gaussian_copula_log_factor(scores, corr):
    """log{|R|^{-1/2} exp(-0.5 y'(R^{-1}-I)y)} for score rows ``scores``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    chol = cho_factor(corr.matrix, lower=True)
    solved = cho_solve(chol, scores.T).T
    quad = np.einsum("ij,ij->i", scores, solved) - np.einsum("ij,ij->i",
                                                             scores, scores)
    return -0.5 * corr.log_det - 0.5 * quad


def sample_joint(cop, n, rng):
    """Draw ``n`` joint observations with the copula's dependence."""
    corr = cop.correlation
    if corr.is_singular():
        raise CopulaError("singular correlation (some |b_t| = 1)")
    z = rng.standard_normal((int(n), corr.dim)) @ corr.cholesky_factor.T
    u = np.clip(ndtr(z), 1e-15, 1.0 - 1e-15)
    cols = [np.asarray(m.quantile(u[:, j]), dtype=float)
            for j, m in enumerate(cop.marginals)]
    return np.column_stack(cols)
