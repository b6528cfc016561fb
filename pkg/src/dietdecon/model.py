"""Latent-variable data model: recalls, surrogates, intakes and likelihoods.

A recall dataset holds, per subject and occasion, q episodic amounts (exact
zeros allowed) followed by p strictly positive regular amounts.  Episodic
indicators are derived as amount > 0 and never stored.  The latent surrogate
vector per occasion has 2q + p coordinates: q probit-scale surrogates whose
sign matches the indicator, q episodic amounts (latent when the indicator is
zero) and p regular amounts (always observed).
"""

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import splines
from .copula import SphericalCorrelation, gaussian_copula_log_factor
from .densities import norm_logpdf

SCALE_TARGET = 20.0
PROB_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed recall data."""


class DegenerateProbabilityError(ValueError):
    """Consumption probability underflowed the floor used by X+ = X / P."""


def _fmt(value):
    return repr(float(value))


@dataclass
class RecallDataset:
    """Observed replicate recalls for q episodic and p regular components."""

    q: int
    p: int
    names: list
    amounts: list            # per subject: array of shape (m_i, q + p)
    scale_factors: np.ndarray = None   # None while in raw units

    def __post_init__(self):
        self.amounts = [np.asarray(a, dtype=float) for a in self.amounts]
        if self.scale_factors is not None:
            self.scale_factors = np.asarray(self.scale_factors, dtype=float)
        self.validate()

    @property
    def n_components(self):
        return self.q + self.p

    @property
    def n_subjects(self):
        return len(self.amounts)

    @property
    def occasions(self):
        return np.array([a.shape[0] for a in self.amounts])

    def validate(self):
        if self.q < 0 or self.p < 0 or self.q + self.p < 1:
            raise DataError("need at least one dietary component")
        if len(self.names) != self.n_components:
            raise DataError("one name per component is required")
        if self.n_subjects == 0:
            raise DataError("dataset has no subjects")
        for i, a in enumerate(self.amounts):
            if a.ndim != 2 or a.shape[1] != self.n_components:
                raise DataError(f"subject {i}: expected (m_i, {self.n_components}) amounts")
            if a.shape[0] < 1:
                raise DataError(f"subject {i}: no occasions")
            if not np.all(np.isfinite(a)):
                raise DataError(f"subject {i}: non-finite amount")
            if np.any(a[:, : self.q] < 0):
                raise DataError(f"subject {i}: negative episodic amount")
            if self.p and np.any(a[:, self.q:] <= 0):
                raise DataError(f"subject {i}: regular amounts must be positive")
        stacked = self.stacked_amounts()
        if np.any(stacked.max(axis=0) <= 0):
            raise DataError("every component needs at least one positive recall")
        if self.scale_factors is not None:
            if np.any(stacked > SCALE_TARGET * (1 + 1e-9)):
                raise DataError("scaled amounts must lie in (0, 20]")

    def stacked_amounts(self):
        return np.concatenate(self.amounts, axis=0)

    def subject_index(self):
        return np.repeat(np.arange(self.n_subjects), self.occasions)

    def indicators(self, i):
        """Derived episodic indicators for subject ``i``, shape (m_i, q)."""
        return (self.amounts[i][:, : self.q] > 0).astype(int)

    def full_observations(self, i):
        """Per-occasion vectors (indicators, episodic amounts, regular), 2q+p."""
        a = self.amounts[i]
        return np.concatenate([self.indicators(i), a], axis=1)

    def to_csv(self, path_or_buf):
        lines = ["subject,occasion," + ",".join(self.names)]
        for i, a in enumerate(self.amounts):
            for j in range(a.shape[0]):
                vals = ",".join(_fmt(v) for v in a[j])
                lines.append(f"{i + 1},{j + 1},{vals}")
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)

    @classmethod
    def from_csv(cls, path_or_buf, q, scale_factors=None):
        if hasattr(path_or_buf, "read"):
            text = path_or_buf.read()
        else:
            with open(path_or_buf) as fh:
                text = fh.read()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = lines[0].split(",")
        if header[:2] != ["subject", "occasion"]:
            raise DataError("recall CSV must start with subject,occasion columns")
        names = header[2:]
        rows = {}
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(header):
                raise DataError(f"malformed recall row: {ln!r}")
            rows.setdefault(int(parts[0]), []).append(
                [float(v) for v in parts[2:]])
        amounts = [np.asarray(rows[k], dtype=float) for k in sorted(rows)]
        return cls(q=q, p=len(names) - q, names=names, amounts=amounts,
                   scale_factors=scale_factors)


def scale_recalls(raw: RecallDataset) -> RecallDataset:
    """Rescale every component so its largest recall equals 20.

    Zeros are preserved; the factors are recorded so density grids can be
    mapped back to raw units.
    """
    stacked = raw.stacked_amounts()
    maxima = stacked.max(axis=0)
    if np.any(maxima <= 0):
        raise DataError("cannot scale a component whose recalls are all zero")
    factors = SCALE_TARGET / maxima
    amounts = [a * factors for a in raw.amounts]
    prior = raw.scale_factors if raw.scale_factors is not None else 1.0
    return RecallDataset(q=raw.q, p=raw.p, names=list(raw.names),
                         amounts=amounts, scale_factors=prior * factors)


@dataclass
class VarianceFunction:
    """Conditional error variance s^2(x) = B(x) exp(theta) on the basis interval."""

    basis: splines.SplineBasis
    log_coefs: np.ndarray

    def __post_init__(self):
        self.log_coefs = np.asarray(self.log_coefs, dtype=float)

    def variance(self, x):
        return splines.basis_matrix_clamped(self.basis, x) @ np.exp(self.log_coefs)

    def sd(self, x):
        return np.sqrt(self.variance(x))


@dataclass
class ConsumptionCurve:
    """Probit-scale shift h(x) = B(x) beta and probability P(x) = Phi(h(x))."""

    basis: splines.SplineBasis
    coefs: np.ndarray

    def __post_init__(self):
        self.coefs = np.asarray(self.coefs, dtype=float)

    def shift(self, x):
        return splines.basis_matrix_clamped(self.basis, x) @ self.coefs

    def prob(self, x):
        return ndtr(self.shift(x))


def consumption_prob(curve: ConsumptionCurve, x):
    """P(x) = Phi(h(x)) for x inside the curve's basis interval."""
    x = np.asarray(x, dtype=float)
    if np.any(x < curve.basis.a) or np.any(x > curve.basis.b):
        raise DataError("intake outside the modeled support")
    return curve.prob(x)


@dataclass
class IntakeState:
    """Latent intakes X with the derived X+, P(X) and Xtilde vectors."""

    q: int
    p: int
    x: np.ndarray                     # (q+p,)
    curves: list = field(default_factory=list)   # q consumption curves
    prob_floor: float = PROB_FLOOR

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (self.q + self.p,):
            raise DataError("intake vector has wrong length")
        if np.any(self.x <= 0):
            raise DataError("intakes must be strictly positive")
        if len(self.curves) != self.q:
            raise DataError("one consumption curve per episodic component")

    @property
    def probs(self):
        out = np.array([float(c.prob(self.x[l])) for l, c in enumerate(self.curves)])
        if np.any(out < self.prob_floor):
            raise DegenerateProbabilityError(
                "consumption probability fell below the floor")
        return out

    @property
    def x_plus(self):
        x_plus = self.x.copy()
        if self.q:
            x_plus[: self.q] = self.x[: self.q] / self.probs
        return x_plus

    @property
    def x_tilde(self):
        shifts = np.array([float(c.shift(self.x[l]))
                           for l, c in enumerate(self.curves)])
        return np.concatenate([shifts, self.x_plus])


def surrogate_mean(state: IntakeState, coord):
    """Mean of W_coord given the latent intakes; equals Xtilde_coord."""
    x_tilde = state.x_tilde
    if not 0 <= coord < len(x_tilde):
        raise DataError("surrogate coordinate out of range")
    return float(x_tilde[coord])


@dataclass
class SurrogateState:
    """Per-occasion surrogate vectors with the observability mask."""

    q: int
    p: int
    w: np.ndarray          # (n_occasions, 2q + p)
    observed: np.ndarray   # bool mask, same shape

    def validate_signs(self, indicators):
        """Probit surrogates must match the indicators: W < 0 iff Y = 0."""
        ind = np.asarray(indicators)
        probit = self.w[:, : self.q]
        ok = np.where(ind > 0, probit >= 0, probit < 0)
        if not np.all(ok):
            raise DataError("probit surrogate sign disagrees with indicator")


@dataclass
class ErrorLaw:
    """Scaled-error law: standard-normal pseudo-errors, mixture errors,
    variance functions and the error copula over the q+p amount coordinates."""

    q: int
    p: int
    mixtures: list                 # q+p scaled-error marginals
    variance_fns: list             # q+p variance functions
    correlation: SphericalCorrelation

    def __post_init__(self):
        d = self.q + self.p
        if len(self.mixtures) != d or len(self.variance_fns) != d:
            raise DataError("one error marginal and variance function per "
                            "amount coordinate")
        if self.correlation.dim != d:
            raise DataError("error copula dimension must be q + p")

    def scales(self, x_tilde):
        amount = np.asarray(x_tilde)[self.q:]
        return np.array([float(self.variance_fns[e].sd(amount[e]))
                         for e in range(self.q + self.p)])


def log_lik_occasion(w, x_tilde, law: ErrorLaw):
    """Log density of one occasion's surrogate vector given Xtilde.

    Standard-normal pseudo-errors for the first q coordinates, then the
    Gaussian-copula error law over the scaled amount errors, including the
    -log s Jacobian terms.
    """
    w = np.asarray(w, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    d = 2 * law.q + law.p
    if w.shape != (d,) or x_tilde.shape != (d,):
        raise DataError("occasion vectors must have length 2q + p")
    total = float(np.sum(norm_logpdf(w[: law.q] - x_tilde[: law.q])))
    scales = law.scales(x_tilde)
    eps = (w[law.q:] - x_tilde[law.q:]) / scales
    u = np.array([float(law.mixtures[e].cdf(eps[e]))
                  for e in range(law.q + law.p)])
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise DataError("scaled error on the support boundary")
    scores = ndtri(u)
    total += float(gaussian_copula_log_factor(scores, law.correlation)[0])
    for e in range(law.q + law.p):
        total += math.log(float(law.mixtures[e].density(eps[e])))
        total -= math.log(scales[e])
    return total
