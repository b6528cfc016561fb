"""Univariate density families used by the deconvolution model.

All distributions expose ``density``, ``cdf``, ``quantile`` and
``sample(rng, size)``.  Quantiles of mixtures are found by bracketed
bisection on the CDF (tolerance 1e-10 in CDF space); truncated-normal
draws use inverse-CDF sampling with tail-stable branches.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .splines import SplineBasis, basis_matrix, integrated_basis_matrix

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DensityError(ValueError):
    """Invalid distribution parameters or evaluation request."""


def _as_simplex(weights, k=None):
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or (k is not None and len(w) != k):
        raise DensityError("weight vector has wrong shape")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
        raise DensityError("weights must be nonnegative and sum to 1")
    return w


def norm_logpdf(x, mean=0.0, var=1.0):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * np.log(var) - _LOG_SQRT_2PI


def truncnorm_log_mass(mean, sd, lo, hi):
    """log of Phi((hi-mean)/sd) - Phi((lo-mean)/sd), tail-stable."""
    alpha = (np.asarray(lo, float) - mean) / sd
    beta = (np.asarray(hi, float) - mean) / sd
    alpha, beta = np.broadcast_arrays(alpha, beta)
    mass = np.where(alpha >= 0.0,
                    ndtr(-alpha) - ndtr(-beta),
                    ndtr(beta) - ndtr(alpha))
    with np.errstate(divide="ignore"):
        return np.log(mass)


def truncnorm_logpdf(x, mean, sd, lo, hi):
    x = np.asarray(x, dtype=float)
    out = norm_logpdf((x - mean) / sd) - np.log(sd)
    out = out - truncnorm_log_mass(mean, sd, lo, hi)
    return np.where((x < lo) | (x > hi), -np.inf, out)


def truncnorm_sample(rng, mean, sd, lo, hi, size=None):
    """Inverse-CDF truncated normal draws, stable for far-tail windows."""
    mean, sd, lo, hi = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mean, sd, lo, hi)))
    shape = mean.shape if size is None else size
    mean, sd, lo, hi = (np.broadcast_to(v, shape) for v in (mean, sd, lo, hi))
    alpha = (lo - mean) / sd
    beta = (hi - mean) / sd
    u = rng.random(shape)
    z = np.empty(shape, dtype=float)
    upper = alpha >= 0.0  # window in the upper tail: work with survival values
    lower = beta <= 0.0
    mid = ~(upper | lower)
    if np.any(upper):
        a, b = alpha[upper], beta[upper]
        sf = ndtr(-a) + u[upper] * (ndtr(-b) - ndtr(-a))
        z[upper] = -ndtri(np.clip(sf, 1e-320, 1.0))
    if np.any(lower):
        a, b = alpha[lower], beta[lower]
        cdf = ndtr(a) + u[lower] * (ndtr(b) - ndtr(a))
        z[lower] = ndtri(np.clip(cdf, 1e-320, 1.0))
    if np.any(mid):
        a, b = alpha[mid], beta[mid]
        cdf = ndtr(a) + u[mid] * (ndtr(b) - ndtr(a))
        z[mid] = ndtri(cdf)
    return np.clip(mean + sd * z, lo, hi)


def _bisect_quantile(cdf_fn, u, lo, hi, tol=1e-10, max_iter=200):
    u = np.asarray(u, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), u.shape).astype(float).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), u.shape).astype(float).copy()
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = cdf_fn(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < 1e-14 * max(1.0, np.max(np.abs(hi))):
            break
    x = 0.5 * (lo + hi)
    if np.max(np.abs(cdf_fn(x) - u)) > max(tol, 1e-9):
        raise DensityError("quantile bisection failed to converge")
    return x


def _check_u(u):
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise DensityError("quantile argument must lie in (0, 1)")
    return u


def _expand_bracket(cdf_fn, u, center, width):
    lo = center - width
    hi = center + width
    for _ in range(200):
        bad_lo = cdf_fn(np.asarray(lo)) > np.min(u)
        bad_hi = cdf_fn(np.asarray(hi)) < np.max(u)
        if not bad_lo and not bad_hi:
            return lo, hi
        if bad_lo:
            lo -= width
        if bad_hi:
            hi += width
        width *= 1.5
    raise DensityError("could not bracket quantile")


class Normal:
    """Plain normal distribution with the shared 4-method interface."""

    def __init__(self, mean=0.0, var=1.0):
        if var <= 0:
            raise DensityError("variance must be positive")
        self.mean_ = float(mean)
        self.var = float(var)
        self.sd = math.sqrt(var)
        self.support = (-np.inf, np.inf)

    def density(self, x):
        return np.exp(norm_logpdf(np.asarray(x, float), self.mean_, self.var))

    def cdf(self, x):
        return ndtr((np.asarray(x, float) - self.mean_) / self.sd)

    def quantile(self, u):
        return self.mean_ + self.sd * ndtri(_check_u(u))

    def sample(self, rng, size=None):
        return rng.normal(self.mean_, self.sd, size=size)

    def mean(self):
        return self.mean_

    def variance(self):
        return self.var


class TruncNormMixture:
    """Mixture of truncated normal kernels sharing one support [a, b]."""

    def __init__(self, weights, means, variances, a, b):
        self.weights = _as_simplex(weights)
        self.means = np.asarray(means, dtype=float)
        self.variances = np.asarray(variances, dtype=float)
        if not (len(self.means) == len(self.variances) == len(self.weights)):
            raise DensityError("component arrays must share one length")
        if np.any(self.variances <= 0):
            raise DensityError("component variances must be positive")
        if b <= a:
            raise DensityError("invalid truncation interval")
        self.a = float(a)
        self.b = float(b)
        self.sds = np.sqrt(self.variances)
        self.support = (self.a, self.b)
        self._log_mass = truncnorm_log_mass(self.means, self.sds, self.a, self.b)
        if np.any(~np.isfinite(self._log_mass)):
            raise DensityError("truncation window has vanishing mass")

    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.a) or np.any(x > self.b):
            raise DensityError("point outside truncation support")
        return x

    def density(self, x):
        x = self._check_x(x)
        z = (x[..., None] - self.means) / self.sds
        comp = np.exp(norm_logpdf(z) - np.log(self.sds) - self._log_mass)
        return comp @ self.weights

    def cdf(self, x):
        x = self._check_x(x)
        lo_cdf = ndtr((self.a - self.means) / self.sds)
        comp = (ndtr((x[..., None] - self.means) / self.sds) - lo_cdf)
        comp /= np.exp(self._log_mass)
        return np.clip(comp @ self.weights, 0.0, 1.0)

    def quantile(self, u):
        u = _check_u(u)
        return _bisect_quantile(self.cdf, u, self.a, self.b)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(np.prod(size))
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        draws = truncnorm_sample(rng, self.means[labels], self.sds[labels],
                                 self.a, self.b)
        return draws[0] if size is None else draws.reshape(size)


class BsplineDensity:
    """Normalized exponential B-spline mixture density on the basis interval."""

    def __init__(self, basis: SplineBasis, log_coefs):
        self.basis = basis
        self.log_coefs = np.asarray(log_coefs, dtype=float)
        if self.log_coefs.shape != (basis.num_bases,):
            raise DensityError("coefficient length must match basis size")
        self._exp_coefs = np.exp(self.log_coefs - self.log_coefs.max())
        self.normalizer = float(basis.areas @ self._exp_coefs)
        self.support = (basis.a, basis.b)

    def density(self, x):
        return basis_matrix(self.basis, x) @ self._exp_coefs / self.normalizer

    def cdf(self, x):
        vals = integrated_basis_matrix(self.basis, x) @ self._exp_coefs
        return np.clip(vals / self.normalizer, 0.0, 1.0)

    def quantile(self, u):
        u = _check_u(u)
        return _bisect_quantile(self.cdf, u, self.basis.a, self.basis.b)

    def sample(self, rng, size=None):
        u = rng.random(1 if size is None else size)
        out = self.quantile(np.clip(u, 1e-15, 1 - 1e-15))
        return out[0] if size is None else out


class RestrictedErrorKernel:
    """Two-piece normal kernel whose mean is zero by construction.

    mu1 = c1*mu_tilde and mu2 = c2*mu_tilde with
    c1 = (1-p)/sqrt(p^2+(1-p)^2), c2 = -p/sqrt(p^2+(1-p)^2), so
    p*mu1 + (1-p)*mu2 = 0 for every (p, mu_tilde).
    """

    def __init__(self, p, mu_tilde, var1, var2):
        if not 0.0 <= p <= 1.0:
            raise DensityError("p must lie in [0, 1]")
        if var1 <= 0 or var2 <= 0:
            raise DensityError("kernel variances must be positive")
        self.p = float(p)
        self.mu_tilde = float(mu_tilde)
        self.var1 = float(var1)
        self.var2 = float(var2)
        r = math.sqrt(p ** 2 + (1.0 - p) ** 2)
        self.c1 = (1.0 - p) / r
        self.c2 = -p / r
        self.mu1 = self.c1 * self.mu_tilde
        self.mu2 = self.c2 * self.mu_tilde
        self.support = (-np.inf, np.inf)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return (self.p * np.exp(norm_logpdf(x, self.mu1, self.var1))
                + (1.0 - self.p) * np.exp(norm_logpdf(x, self.mu2, self.var2)))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return (self.p * ndtr((x - self.mu1) / math.sqrt(self.var1))
                + (1.0 - self.p) * ndtr((x - self.mu2) / math.sqrt(self.var2)))

    def quantile(self, u):
        u = _check_u(u)
        width = 1.0 + 8.0 * math.sqrt(max(self.var1, self.var2))
        lo, hi = _expand_bracket(self.cdf, u, 0.0, width + abs(self.mu_tilde))
        return _bisect_quantile(self.cdf, u, lo, hi)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(np.prod(size))
        first = rng.random(n) < self.p
        mu = np.where(first, self.mu1, self.mu2)
        sd = np.where(first, math.sqrt(self.var1), math.sqrt(self.var2))
        draws = rng.normal(mu, sd)
        return draws[0] if size is None else draws.reshape(size)

    def mean(self):
        return self.p * self.mu1 + (1.0 - self.p) * self.mu2

    def variance(self):
        return (self.p * (self.var1 + self.mu1 ** 2)
                + (1.0 - self.p) * (self.var2 + self.mu2 ** 2))


class ErrorMixture:
    """Mixture of mean-restricted kernels; mixture mean is exactly zero."""

    def __init__(self, weights, kernels):
        self.weights = _as_simplex(weights, len(kernels))
        self.kernels = list(kernels)
        self.support = (-np.inf, np.inf)

    def density(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x, dtype=float)
        for w, k in zip(self.weights, self.kernels):
            out += w * k.density(x)
        return out

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x, dtype=float)
        for w, k in zip(self.weights, self.kernels):
            out += w * k.cdf(x)
        return out

    def quantile(self, u):
        u = _check_u(u)
        spread = max(math.sqrt(k.variance()) + abs(k.mu_tilde) for k in self.kernels)
        lo, hi = _expand_bracket(self.cdf, u, 0.0, 1.0 + 8.0 * spread)
        return _bisect_quantile(self.cdf, u, lo, hi)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(np.prod(size))
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        draws = np.empty(n)
        for k, kernel in enumerate(self.kernels):
            m = labels == k
            if np.any(m):
                draws[m] = kernel.sample(rng, size=int(m.sum()))
        return draws[0] if size is None else draws.reshape(size)

    def mean(self):
        return float(sum(w * k.mean() for w, k in zip(self.weights, self.kernels)))

    def variance(self):
        return float(sum(w * k.variance() for w, k in zip(self.weights, self.kernels)))


def mixture_mean(mixture):
    """Mean of an :class:`ErrorMixture`; zero up to rounding by construction."""
    return mixture.mean()


class ScaledLaplaceMixture:
    """Laplace mixture standardized affinely to mean zero, variance one."""

    def __init__(self, weights, locations, scales):
        self.weights = _as_simplex(weights)
        self.locations = np.asarray(locations, dtype=float)
        self.scales = np.asarray(scales, dtype=float)
        if not (len(self.locations) == len(self.scales) == len(self.weights)):
            raise DensityError("component arrays must share one length")
        if np.any(self.scales <= 0):
            raise DensityError("Laplace scales must be positive")
        raw_mean = float(self.weights @ self.locations)
        raw_second = float(self.weights @ (2.0 * self.scales ** 2 + self.locations ** 2))
        raw_var = raw_second - raw_mean ** 2
        if raw_var <= 0:
            raise DensityError("degenerate mixture variance")
        self.shift = raw_mean
        self.scale = math.sqrt(raw_var)
        self.support = (-np.inf, np.inf)

    def _raw_density(self, t):
        z = np.abs(t[..., None] - self.locations) / self.scales
        return (np.exp(-z) / (2.0 * self.scales)) @ self.weights

    def _raw_cdf(self, t):
        z = (t[..., None] - self.locations) / self.scales
        comp = np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z))
        return comp @ self.weights

    def density(self, x):
        x = np.asarray(x, dtype=float)
        return self.scale * self._raw_density(self.shift + self.scale * x)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return self._raw_cdf(self.shift + self.scale * x)

    def quantile(self, u):
        u = _check_u(u)
        lo, hi = _expand_bracket(self.cdf, u, 0.0,
                                 1.0 + 10.0 * float(self.scales.max()) / self.scale)
        return _bisect_quantile(self.cdf, u, lo, hi)

    def sample(self, rng, size=None):
        n = 1 if size is None else int(np.prod(size))
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        raw = rng.laplace(self.locations[labels], self.scales[labels])
        draws = (raw - self.shift) / self.scale
        return draws[0] if size is None else draws.reshape(size)

    def mean(self):
        return 0.0

    def variance(self):
        return 1.0


class UnitVarianceScaled:
    """Zero-mean distribution rescaled to unit variance (x -> x/sd)."""

    def __init__(self, base):
        sd = math.sqrt(base.variance())
        if sd <= 0:
            raise DensityError("base distribution has no positive variance")
        self.base = base
        self.sd = sd
        self.support = (-np.inf, np.inf)

    def density(self, x):
        return self.sd * self.base.density(self.sd * np.asarray(x, float))

    def cdf(self, x):
        return self.base.cdf(self.sd * np.asarray(x, float))

    def quantile(self, u):
        return self.base.quantile(u) / self.sd

    def sample(self, rng, size=None):
        return self.base.sample(rng, size=size) / self.sd

    def mean(self):
        return self.base.mean() / self.sd

    def variance(self):
        return 1.0
