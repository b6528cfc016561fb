"""MCMC for the copula deconvolution model.

The sweep follows a fixed seven-step scan: (1) marginal intake densities
(spline coefficients for episodic components, shared truncated-normal atoms
for regular ones), (2) shared scaled-error atoms, (3) variance-function
coefficients, (4) latent surrogates, (5) probit-spline coefficients,
(6) latent intakes, (7) copula parameters on discrete grids.  Steps 1-5 use
a pseudo-likelihood without the copula factors; steps 6-7 use the full
likelihood conditionally on the marginals (two-stage scheme).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr, ndtri
from scipy.stats import gaussian_kde

from . import splines
from .copula import build_corr
from .densities import (
    BsplineDensity,
    ErrorMixture,
    RestrictedErrorKernel,
    TruncNormMixture,
    norm_logpdf,
    truncnorm_log_mass,
    truncnorm_logpdf,
    truncnorm_sample,
)
from .model import ConsumptionCurve, RecallDataset, VarianceFunction

_SCORE_CLIP = 1e-13          # keeps Phi^{-1} finite; beyond this the
                             # marginal log density already dominates


class SamplerError(RuntimeError):
    """Numerical failure inside the chain."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Hyperparameters:
    """Priors, proposal scales and the chain schedule.

    Defaults follow the benchmark configuration: 12 spline bases on [0, 10],
    shared-atom counts max{5(q+p), 20}, Dirichlet concentration 1,
    IG(10, 1) smoothness hyperpriors, 41-point copula grids and a
    5000/3000/5 iteration schedule.
    """

    num_bases: int = 12
    support: tuple = (0.0, 10.0)
    k_x: int = None
    k_eps: int = None
    alpha_x: float = 1.0
    alpha_eps: float = 1.0
    a_xi: float = 10.0
    b_xi: float = 1.0
    a_beta: float = 10.0
    b_beta: float = 1.0
    a_theta: float = 10.0
    b_theta: float = 1.0
    mu_x0: float = 5.0
    var_x0: float = 25.0
    a_var_x0: float = 2.0
    b_var_x0: float = 1.0
    var_eps_mu: float = 4.0
    a_eps: float = 2.0
    b_eps: float = 1.0
    beta_prior_var: float = 100.0
    rw_scale_xi: float = 0.05
    rw_scale_theta: float = 0.05
    atom_scale_mu: float = 0.4
    atom_scale_var: float = 0.4
    eps_scale_p: float = 0.1
    eps_scale_mu: float = 0.3
    eps_scale_var: float = 0.4
    x_prop_scale: float = 0.25
    grid_size: int = 41
    iterations: int = 5000
    burn_in: int = 3000
    thin: int = 5
    adapt_interval: int = 100
    adapt_low: float = 0.15
    adapt_high: float = 0.40
    prob_floor: float = 1e-8
    init_smooth_var: float = 0.1
    warm_sweeps: int = 100

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn-in must be shorter than the chain")
        if self.thin < 1 or self.grid_size < 3:
            raise ValueError("invalid schedule or grid size")
        self.support = tuple(self.support)

    def atom_count(self, n_components):
        return self.k_x if self.k_x is not None else max(5 * n_components, 20)

    def eps_atom_count(self, n_components):
        return self.k_eps if self.k_eps is not None else max(5 * n_components, 20)

    @classmethod
    def from_dict(cls, payload):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(payload) - known
        if bad:
            raise ValueError(f"unknown hyperparameter fields: {sorted(bad)}")
        return cls(**payload)


@dataclass
class _Prepared:
    """Immutable view of a scaled dataset in occasion-major layout."""

    q: int
    p: int
    n: int
    names: list
    m_per_subject: np.ndarray       # (n,)
    subj: np.ndarray                # (N,) subject index per occasion
    amounts: np.ndarray             # (N, q+p)
    y_ind: np.ndarray               # (N, q) derived indicators
    scale_factors: np.ndarray
    basis: splines.SplineBasis
    penalty: np.ndarray
    b_grid: np.ndarray
    t_grid: np.ndarray

    @property
    def n_occ(self):
        return self.amounts.shape[0]

    @property
    def d(self):
        return self.q + self.p


def _prepare(data: RecallDataset, hp: Hyperparameters) -> _Prepared:
    if data.occasions.max() < 3:
        raise SamplerError("need at least one subject with 3+ recalls")
    basis = splines.make_basis(hp.support[0], hp.support[1], hp.num_bases)
    penalty = splines.make_penalty(hp.num_bases).matrix
    m = hp.grid_size
    b_grid = -0.99 + 2 * 0.99 * np.arange(m) / (m - 1)
    t_grid = -3.14 + 2 * 3.14 * np.arange(m) / (m - 1)
    scale = (data.scale_factors if data.scale_factors is not None
             else np.ones(data.n_components))
    amounts = data.stacked_amounts()
    return _Prepared(q=data.q, p=data.p, n=data.n_subjects,
                     names=list(data.names),
                     m_per_subject=data.occasions.astype(int),
                     subj=data.subject_index(),
                     amounts=amounts,
                     y_ind=(amounts[:, : data.q] > 0),
                     scale_factors=np.asarray(scale, dtype=float),
                     basis=basis, penalty=penalty,
                     b_grid=b_grid, t_grid=t_grid)


@dataclass
class SamplerState:
    """Everything the sweep mutates, plus the prepared data and RNG."""

    prep: _Prepared
    hp: Hyperparameters
    rng: np.random.Generator
    w: np.ndarray                   # (N, 2q+p)
    x: np.ndarray                   # (n, q+p)
    labels_x: np.ndarray            # (n, q+p), regular columns used
    atoms_x_mean: np.ndarray        # (K,)
    atoms_x_var: np.ndarray
    weights_x: np.ndarray           # (q+p, K)
    labels_eps: np.ndarray          # (N, q+p)
    labels_eps2: np.ndarray         # (N, q+p) in {0, 1}; refreshed in step 4b
    eps_p: np.ndarray               # (K_e,)
    eps_mu: np.ndarray
    eps_v1: np.ndarray
    eps_v2: np.ndarray
    weights_eps: np.ndarray         # (q+p, K_e)
    xi: np.ndarray                  # (q, J)
    vartheta: np.ndarray            # (q+p, J)
    beta: np.ndarray                # (q, J)
    sig2_xi: np.ndarray
    sig2_theta: np.ndarray
    sig2_beta: np.ndarray
    b_idx_x: np.ndarray             # grid indices
    t_idx_x: np.ndarray
    b_idx_eps: np.ndarray
    t_idx_eps: np.ndarray
    iteration: int = 0
    scales: dict = field(default_factory=dict)
    accepts: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)

    def _count(self, block, accepted, proposed=1):
        acc, prop = self.accepts.setdefault(block, [0, 0])
        self.accepts[block] = [acc + accepted, prop + proposed]
        acc, prop = self.window.setdefault(block, [0, 0])
        self.window[block] = [acc + accepted, prop + proposed]

    def acceptance_rates(self):
        return {k: (a / p if p else 0.0) for k, (a, p) in
                sorted(self.accepts.items())}


def _corr_from_idx(prep, b_idx, t_idx):
    return build_corr(prep.b_grid[b_idx], prep.t_grid[t_idx])


# ---------------------------------------------------------------------------
# vectorized kernel math


def _tn_mix_logpdf_matrix(x, means, variances, a, b):
    """(n, K) log TN densities for shared atoms on [a, b]."""
    sd = np.sqrt(variances)
    z = (x[:, None] - means[None, :]) / sd[None, :]
    return (norm_logpdf(z) - np.log(sd)[None, :]
            - truncnorm_log_mass(means, sd, a, b)[None, :])


def _tn_mix_cdf(x, weights, means, variances, a, b):
    sd = np.sqrt(variances)
    lo = ndtr((a - means) / sd)
    mass = np.exp(truncnorm_log_mass(means, sd, a, b))
    comp = (ndtr((x[:, None] - means[None, :]) / sd[None, :]) - lo[None, :])
    return np.clip(comp / mass[None, :] @ weights, 0.0, 1.0)


def _kernel_means(p, mu_t):
    r = np.sqrt(p ** 2 + (1.0 - p) ** 2)
    return (1.0 - p) / r * mu_t, -p / r * mu_t


def _eps_kernel_logpdf(eps, p, mu_t, v1, v2):
    """log{p N(mu1,v1) + (1-p) N(mu2,v2)}; eps (..., ) vs atom scalars/arrays."""
    mu1, mu2 = _kernel_means(p, mu_t)
    la = norm_logpdf(eps, mu1, v1) + np.log(np.maximum(p, 1e-300))
    lb = norm_logpdf(eps, mu2, v2) + np.log(np.maximum(1.0 - p, 1e-300))
    hi = np.maximum(la, lb)
    return hi + np.log(np.exp(la - hi) + np.exp(lb - hi))


def _eps_mix_logpdf(eps, weights, p, mu_t, v1, v2):
    """(n,) log mixture density over K shared atoms; weights (K,)."""
    comp = _eps_kernel_logpdf(eps[:, None], p[None, :], mu_t[None, :],
                              v1[None, :], v2[None, :])
    comp = comp + np.log(np.maximum(weights, 1e-300))[None, :]
    hi = comp.max(axis=1)
    return hi + np.log(np.exp(comp - hi[:, None]).sum(axis=1))


def _eps_mix_cdf(eps, weights, p, mu_t, v1, v2):
    mu1, mu2 = _kernel_means(p, mu_t)
    c = (p[None, :] * ndtr((eps[:, None] - mu1[None, :]) / np.sqrt(v1)[None, :])
         + (1 - p)[None, :] * ndtr((eps[:, None] - mu2[None, :])
                                   / np.sqrt(v2)[None, :]))
    return c @ weights


def _spline_logpdf(values, basis, xi_row):
    shifted = np.exp(xi_row - xi_row.max())
    dens = splines.basis_matrix_clamped(basis, values) @ shifted
    norm = basis.areas @ shifted
    with np.errstate(divide="ignore"):
        return np.log(dens) - np.log(norm)


def _spline_cdf(values, basis, xi_row):
    shifted = np.exp(xi_row - xi_row.max())
    vals = splines.integrated_basis_matrix(
        basis, np.clip(values, basis.a, basis.b)) @ shifted
    return np.clip(vals / (basis.areas @ shifted), 0.0, 1.0)


def _scores_from_u(u):
    return ndtri(np.clip(u, _SCORE_CLIP, 1.0 - _SCORE_CLIP))


# ---------------------------------------------------------------------------
# derived per-state quantities


def _h_and_probs(state):
    prep = state.prep
    if prep.q == 0:
        empty = np.zeros((prep.n, 0))
        return empty, empty
    h = np.column_stack([
        splines.basis_matrix_clamped(prep.basis, state.x[:, l]) @ state.beta[l]
        for l in range(prep.q)])
    return h, ndtr(h)


def _x_tilde(state, h=None, probs=None):
    prep = state.prep
    if h is None:
        h, probs = _h_and_probs(state)
    x_plus = state.x.copy()
    if prep.q:
        x_plus[:, : prep.q] = state.x[:, : prep.q] / np.maximum(
            probs, state.hp.prob_floor)
    return np.concatenate([h, x_plus], axis=1)


def _subject_scales(state, x_tilde):
    """(n, q+p) error scales s_e(Xtilde_{q+e})."""
    prep = state.prep
    cols = []
    for e in range(prep.d):
        basis_vals = splines.basis_matrix_clamped(prep.basis,
                                                  x_tilde[:, prep.q + e])
        cols.append(np.sqrt(basis_vals @ np.exp(state.vartheta[e])))
    return np.column_stack(cols)


def _occ_residuals(state, x_tilde, scales):
    """Scaled errors eps (N, q+p) for the amount coordinates."""
    prep = state.prep
    xt_occ = x_tilde[prep.subj][:, prep.q:]
    s_occ = scales[prep.subj]
    return (state.w[:, prep.q:] - xt_occ) / s_occ


def _marginal_x_logpdf(state, comp, values):
    prep = state.prep
    if comp < prep.q:
        return _spline_logpdf(values, prep.basis, state.xi[comp])
    comp_log = _tn_mix_logpdf_matrix(values, state.atoms_x_mean,
                                     state.atoms_x_var,
                                     prep.basis.a, prep.basis.b)
    comp_log = comp_log + np.log(np.maximum(state.weights_x[comp], 1e-300))
    hi = comp_log.max(axis=1)
    return hi + np.log(np.exp(comp_log - hi[:, None]).sum(axis=1))


def _marginal_x_cdf(state, comp, values):
    prep = state.prep
    if comp < prep.q:
        return _spline_cdf(values, prep.basis, state.xi[comp])
    return _tn_mix_cdf(values, state.weights_x[comp], state.atoms_x_mean,
                       state.atoms_x_var, prep.basis.a, prep.basis.b)


def _x_scores(state):
    prep = state.prep
    return np.column_stack([
        _scores_from_u(_marginal_x_cdf(state, l, state.x[:, l]))
        for l in range(prep.d)])


def _eps_scores(state, eps):
    prep = state.prep
    return np.column_stack([
        _scores_from_u(_eps_mix_cdf(eps[:, e], state.weights_eps[e],
                                    state.eps_p, state.eps_mu,
                                    state.eps_v1, state.eps_v2))
        for e in range(prep.d)])


def _log_factor(scores, corr, chol=None):
    """Per-row copula log factor -0.5 log|R| - 0.5 y'(R^{-1} - I)y."""
    if chol is None:
        chol = cho_factor(corr.matrix, lower=True)
    solved = cho_solve(chol, scores.T).T
    quad = np.einsum("ij,ij->i", scores, solved) \
        - np.einsum("ij,ij->i", scores, scores)
    return -0.5 * corr.log_det - 0.5 * quad


# ---------------------------------------------------------------------------
# reusable conditional draws (also exercised by the goodness-of-fit tests)


def draw_dirichlet_weights(rng, alpha, counts):
    """Conjugate Dirichlet(alpha + counts) draw."""
    return rng.dirichlet(alpha + np.asarray(counts, dtype=float))


def draw_labels(rng, log_weights):
    """Categorical rows from unnormalized log weights (n, K)."""
    lw = log_weights - log_weights.max(axis=1, keepdims=True)
    probs = np.exp(lw)
    probs /= probs.sum(axis=1, keepdims=True)
    u = rng.random(probs.shape[0])
    labels = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(labels, probs.shape[1] - 1)


def _mh_accept(rng, log_ratio):
    """Metropolis-Hastings coin: accept with probability min{1, e^ratio}."""
    if not np.isfinite(log_ratio):
        return bool(log_ratio > 0)
    return math.log(rng.random()) < log_ratio


def draw_smoothing_variance(rng, a, b, num_bases, quad_form):
    """IG{a + (J+2)/2, b + quad/2} draw for a smoothing variance."""
    shape = a + (num_bases + 2) / 2.0
    rate = b + 0.5 * quad_form
    return rate / rng.gamma(shape)


def draw_mvn(rng, mean, cov):
    chol = cholesky(cov, lower=True)
    return mean + chol @ rng.standard_normal(len(mean))


def draw_probit_surrogates(rng, means, indicators):
    """Sign-constrained unit-variance truncated normal draws."""
    ind = np.asarray(indicators, dtype=bool)
    lo = np.where(ind, 0.0, -np.inf)
    hi = np.where(ind, np.inf, 0.0)
    return truncnorm_sample(rng, means, 1.0, lo, hi)


# ---------------------------------------------------------------------------
# sweep steps


def _step1a_xi(state):
    prep, hp = state.prep, state.hp
    pen = prep.penalty
    for l in range(prep.q):
        xi = state.xi[l]
        cur = (-0.5 * xi @ pen @ xi / state.sig2_xi[l]
               + _spline_logpdf(state.x[:, l], prep.basis, xi).sum())
        prop = xi + state.scales[f"xi_{l}"] * state.rng.standard_normal(len(xi))
        new = (-0.5 * prop @ pen @ prop / state.sig2_xi[l]
               + _spline_logpdf(state.x[:, l], prep.basis, prop).sum())
        accept = _mh_accept(state.rng, new - cur)
        if accept:
            state.xi[l] = prop - prop.mean()   # gauge: level is unidentified
        state._count(f"xi_{l}", int(accept))
        quad = state.xi[l] @ pen @ state.xi[l]
        state.sig2_xi[l] = draw_smoothing_variance(state.rng, hp.a_xi, hp.b_xi,
                                                   hp.num_bases, quad)


def _step1b_regular(state):
    prep, hp = state.prep, state.hp
    if prep.p == 0:
        return
    k = len(state.atoms_x_mean)
    a, b = prep.basis.a, prep.basis.b
    for l in range(prep.q, prep.d):
        counts = np.bincount(state.labels_x[:, l], minlength=k)
        state.weights_x[l] = draw_dirichlet_weights(
            state.rng, np.full(k, hp.alpha_x), counts)
        log_w = _tn_mix_logpdf_matrix(state.x[:, l], state.atoms_x_mean,
                                      state.atoms_x_var, a, b) \
            + np.log(np.maximum(state.weights_x[l], 1e-300))
        state.labels_x[:, l] = draw_labels(state.rng, log_w)

    # atom moves: normal proposal for the mean, sliding truncated-normal
    # window for the variance
    for kk in range(k):
        vals = np.concatenate([state.x[state.labels_x[:, l] == kk, l]
                               for l in range(prep.q, prep.d)])
        mu, var = state.atoms_x_mean[kk], state.atoms_x_var[kk]
        mu_new = mu + state.scales["atom_x_mu"] * state.rng.standard_normal()
        # the kernel needs positive mass on [a, b]; empty atoms would
        # otherwise drift out of the support on the prior alone
        if truncnorm_log_mass(mu_new, math.sqrt(var), a, b) < -600.0:
            state._count("atom_x_mu", 0)
        else:
            cur = (norm_logpdf(mu, hp.mu_x0, hp.var_x0)
                   + truncnorm_logpdf(vals, mu, math.sqrt(var), a, b).sum())
            new = (norm_logpdf(mu_new, hp.mu_x0, hp.var_x0)
                   + truncnorm_logpdf(vals, mu_new, math.sqrt(var), a, b).sum())
            accept = _mh_accept(state.rng, new - cur)
            if accept:
                state.atoms_x_mean[kk] = mu = mu_new
            state._count("atom_x_mu", int(accept))

        var_new = float(truncnorm_sample(
            state.rng, var, state.scales["atom_x_var"],
            max(0.0, var - 1.0), var + 1.0))
        if var_new > 1e-8 and truncnorm_log_mass(
                mu, math.sqrt(var_new), a, b) > -600.0:
            def ig_logpdf(v):
                return -(hp.a_var_x0 + 1.0) * math.log(v) - hp.b_var_x0 / v
            cur = (ig_logpdf(var)
                   + truncnorm_logpdf(vals, mu, math.sqrt(var), a, b).sum())
            new = (ig_logpdf(var_new)
                   + truncnorm_logpdf(vals, mu, math.sqrt(var_new), a, b).sum())
            fwd = truncnorm_logpdf(var_new, var, state.scales["atom_x_var"],
                                   max(0.0, var - 1.0), var + 1.0)
            rev = truncnorm_logpdf(var, var_new, state.scales["atom_x_var"],
                                   max(0.0, var_new - 1.0), var_new + 1.0)
            accept = _mh_accept(state.rng, new - cur + float(rev - fwd))
            if accept:
                state.atoms_x_var[kk] = var_new
            state._count("atom_x_var", int(accept))


def _step2_errors(state, x_tilde=None, scales=None):
    prep, hp = state.prep, state.hp
    if x_tilde is None:
        x_tilde = _x_tilde(state)
        scales = _subject_scales(state, x_tilde)
    eps = _occ_residuals(state, x_tilde, scales)
    k = len(state.eps_p)
    for e in range(prep.d):
        counts = np.bincount(state.labels_eps[:, e], minlength=k)
        state.weights_eps[e] = draw_dirichlet_weights(
            state.rng, np.full(k, hp.alpha_eps), counts)
        log_w = _eps_kernel_logpdf(eps[:, e][:, None], state.eps_p[None, :],
                                   state.eps_mu[None, :],
                                   state.eps_v1[None, :],
                                   state.eps_v2[None, :]) \
            + np.log(np.maximum(state.weights_eps[e], 1e-300))[None, :]
        state.labels_eps[:, e] = draw_labels(state.rng, log_w)

    for kk in range(k):
        vals = eps[state.labels_eps == kk]
        p0, mu0 = state.eps_p[kk], state.eps_mu[kk]
        v10, v20 = state.eps_v1[kk], state.eps_v2[kk]
        p1 = float(truncnorm_sample(state.rng, p0, state.scales["eps_atom_p"],
                                    0.0, 1.0))
        mu1 = mu0 + state.scales["eps_atom_mu"] * state.rng.standard_normal()
        v11 = float(truncnorm_sample(state.rng, v10,
                                     state.scales["eps_atom_var"],
                                     max(0.0, v10 - 1.0), v10 + 1.0))
        v21 = float(truncnorm_sample(state.rng, v20,
                                     state.scales["eps_atom_var"],
                                     max(0.0, v20 - 1.0), v20 + 1.0))
        if min(v11, v21) <= 1e-8:
            state._count("eps_atoms", 0)
            continue

        def prior(p, mu, v1, v2):
            return (norm_logpdf(mu, 0.0, hp.var_eps_mu)
                    - (hp.a_eps + 1) * (math.log(v1) + math.log(v2))
                    - hp.b_eps / v1 - hp.b_eps / v2)

        cur = prior(p0, mu0, v10, v20) + _eps_kernel_logpdf(
            vals, p0, mu0, v10, v20).sum()
        new = prior(p1, mu1, v11, v21) + _eps_kernel_logpdf(
            vals, p1, mu1, v11, v21).sum()
        fwd = (truncnorm_logpdf(p1, p0, state.scales["eps_atom_p"], 0.0, 1.0)
               + truncnorm_logpdf(v11, v10, state.scales["eps_atom_var"],
                                  max(0.0, v10 - 1.0), v10 + 1.0)
               + truncnorm_logpdf(v21, v20, state.scales["eps_atom_var"],
                                  max(0.0, v20 - 1.0), v20 + 1.0))
        rev = (truncnorm_logpdf(p0, p1, state.scales["eps_atom_p"], 0.0, 1.0)
               + truncnorm_logpdf(v10, v11, state.scales["eps_atom_var"],
                                  max(0.0, v11 - 1.0), v11 + 1.0)
               + truncnorm_logpdf(v20, v21, state.scales["eps_atom_var"],
                                  max(0.0, v21 - 1.0), v21 + 1.0))
        accept = _mh_accept(state.rng, new - cur + float(rev - fwd))
        if accept:
            state.eps_p[kk], state.eps_mu[kk] = p1, mu1
            state.eps_v1[kk], state.eps_v2[kk] = v11, v21
        state._count("eps_atoms", int(accept))


def _labelled_eps_loglik(state, eps_col, labels_col, log_s):
    """Sum of label-conditioned kernel log densities minus the Jacobian."""
    return float(np.sum(_eps_kernel_logpdf(
        eps_col, state.eps_p[labels_col], state.eps_mu[labels_col],
        state.eps_v1[labels_col], state.eps_v2[labels_col]) - log_s))


def _step3_vartheta(state, x_tilde=None):
    prep, hp = state.prep, state.hp
    if x_tilde is None:
        x_tilde = _x_tilde(state)
    pen = prep.penalty
    for e in range(prep.d):
        xt = x_tilde[:, prep.q + e]
        basis_vals = splines.basis_matrix_clamped(prep.basis, xt)[prep.subj]
        resid = state.w[:, prep.q + e] - xt[prep.subj]
        labels = state.labels_eps[:, e]
        th = state.vartheta[e]

        def loglik(coefs):
            s2 = basis_vals @ np.exp(coefs)
            if np.any(s2 <= 0) or not np.all(np.isfinite(s2)):
                return -np.inf
            s = np.sqrt(s2)
            return _labelled_eps_loglik(state, resid / s, labels, np.log(s))

        cur = -0.5 * th @ pen @ th / state.sig2_theta[e] + loglik(th)
        prop = th + state.scales[f"vartheta_{e}"] \
            * state.rng.standard_normal(len(th))
        new = -0.5 * prop @ pen @ prop / state.sig2_theta[e] + loglik(prop)
        accept = _mh_accept(state.rng, new - cur)
        if accept:
            state.vartheta[e] = prop
        state._count(f"vartheta_{e}", int(accept))
        quad = state.vartheta[e] @ pen @ state.vartheta[e]
        state.sig2_theta[e] = draw_smoothing_variance(
            state.rng, hp.a_theta, hp.b_theta, hp.num_bases, quad)


def _step4_latent_w(state, x_tilde=None, scales=None):
    prep = state.prep
    if x_tilde is None:
        x_tilde = _x_tilde(state)
        scales = _subject_scales(state, x_tilde)
    # 4a: probit-scale surrogates, exact sign-constrained draws
    for l in range(prep.q):
        means = x_tilde[prep.subj, l]
        state.w[:, l] = draw_probit_surrogates(state.rng, means,
                                               prep.y_ind[:, l])
    # 4b: episodic amounts on zero-recall occasions, given refreshed C2
    for e in range(prep.q):
        rows = ~prep.y_ind[:, e]
        if not np.any(rows):
            continue
        labels = state.labels_eps[rows, e]
        p = state.eps_p[labels]
        second = state.rng.random(rows.sum()) >= p
        state.labels_eps2[rows, e] = second
        mu1, mu2 = _kernel_means(state.eps_p[labels], state.eps_mu[labels])
        mu = np.where(second, mu2, mu1)
        var = np.where(second, state.eps_v2[labels], state.eps_v1[labels])
        s = scales[prep.subj[rows], e]
        center = x_tilde[prep.subj[rows], prep.q + e]
        state.w[rows, prep.q + e] = center + s * (
            mu + np.sqrt(var) * state.rng.standard_normal(rows.sum()))


def _step5_beta(state):
    prep, hp = state.prep, state.hp
    pen = prep.penalty
    j = hp.num_bases
    prior_prec = np.eye(j) / hp.beta_prior_var
    for l in range(prep.q):
        design = splines.basis_matrix_clamped(prep.basis, state.x[:, l])
        w_sums = np.bincount(prep.subj, weights=state.w[:, l],
                             minlength=prep.n)
        precision = (pen / state.sig2_beta[l] + prior_prec
                     + (design * prep.m_per_subject[:, None]).T @ design)
        mean_vec = design.T @ w_sums
        chol = cho_factor(precision, lower=True)
        mean = cho_solve(chol, mean_vec)
        noise = solve_triangular(chol[0], state.rng.standard_normal(j),
                                 lower=True, trans="T")
        state.beta[l] = mean + noise
        quad = state.beta[l] @ pen @ state.beta[l]
        state.sig2_beta[l] = draw_smoothing_variance(
            state.rng, hp.a_beta, hp.b_beta, hp.num_bases, quad)


def _subject_log_target(state, x, corr_x, chol_x, corr_e, chol_e):
    """Full per-subject log target for the latent-intake update.

    Marginal f_X terms and copula factor (once per subject) plus the
    occasion-level likelihood: probit-surrogate normals, error-copula
    factor and mixture error densities with Jacobians.
    """
    prep = state.prep
    saved = state.x
    state.x = x
    try:
        total = np.zeros(prep.n)
        for l in range(prep.d):
            total += _marginal_x_logpdf(state, l, x[:, l])
        total += _log_factor(_x_scores(state), corr_x, chol_x)
        h, probs = _h_and_probs(state)
        if prep.q and np.any(probs < state.hp.prob_floor):
            bad = np.any(probs < state.hp.prob_floor, axis=1)
            total[bad] = -np.inf
            probs = np.maximum(probs, state.hp.prob_floor)
        x_tilde = _x_tilde(state, h, probs)
        scales = _subject_scales(state, x_tilde)
        eps = _occ_residuals(state, x_tilde, scales)
        occ = np.zeros(prep.n_occ)
        for l in range(prep.q):
            occ += norm_logpdf(state.w[:, l] - x_tilde[prep.subj, l])
        occ += _log_factor(_eps_scores(state, eps), corr_e, chol_e)
        for e in range(prep.d):
            occ += _eps_mix_logpdf(eps[:, e], state.weights_eps[e],
                                   state.eps_p, state.eps_mu,
                                   state.eps_v1, state.eps_v2)
            occ -= np.log(scales[prep.subj, e])
        total += np.bincount(prep.subj, weights=occ, minlength=prep.n)
        return np.where(np.isfinite(total), total, -np.inf)
    finally:
        state.x = saved


def _step6_x(state):
    prep, hp = state.prep, state.hp
    a, b = prep.basis.a, prep.basis.b
    corr_x = _corr_from_idx(prep, state.b_idx_x, state.t_idx_x)
    chol_x = cho_factor(corr_x.matrix, lower=True)
    corr_e = _corr_from_idx(prep, state.b_idx_eps, state.t_idx_eps)
    chol_e = cho_factor(corr_e.matrix, lower=True)
    current = _subject_log_target(state, state.x, corr_x, chol_x,
                                  corr_e, chol_e)
    for l in range(prep.d):
        scale = state.scales[f"x_{l}"]
        prop = state.x.copy()
        prop[:, l] = truncnorm_sample(state.rng, state.x[:, l], scale, a, b)
        new = _subject_log_target(state, prop, corr_x, chol_x, corr_e, chol_e)
        fwd = truncnorm_logpdf(prop[:, l], state.x[:, l], scale, a, b)
        rev = truncnorm_logpdf(state.x[:, l], prop[:, l], scale, a, b)
        log_acc = new - current + rev - fwd
        accept = np.log(state.rng.random(prep.n)) < log_acc
        state.x[accept, l] = prop[accept, l]
        current = np.where(accept, new, current)
        state._count(f"x_{l}", int(accept.sum()), prep.n)


def _grid_mh(state, scores, count, b_idx, t_idx, tag):
    """Neighbor-proposal MH on the discretized copula parameters."""
    prep = state.prep
    s_mat = scores.T @ scores

    def loglik(bi, ti):
        corr = _corr_from_idx(prep, bi, ti)
        chol = cho_factor(corr.matrix, lower=True)
        quad = float(np.trace(cho_solve(chol, s_mat)))
        return -0.5 * count * corr.log_det - 0.5 * quad

    cur = loglik(b_idx, t_idx)
    m = len(prep.b_grid)
    for t in range(len(b_idx)):
        step = state.rng.integers(-1, 2)
        j = min(max(b_idx[t] + step, 0), m - 1)
        if j != b_idx[t]:
            trial = b_idx.copy()
            trial[t] = j
            new = loglik(trial, t_idx)
            if _mh_accept(state.rng, new - cur):
                b_idx[t] = j
                cur = new
                state._count(f"{tag}_b", 1)
            else:
                state._count(f"{tag}_b", 0)
        else:
            state._count(f"{tag}_b", 1)
    for s in range(len(t_idx)):
        step = state.rng.integers(-1, 2)
        j = min(max(t_idx[s] + step, 0), m - 1)
        if j != t_idx[s]:
            trial = t_idx.copy()
            trial[s] = j
            new = loglik(b_idx, trial)
            if _mh_accept(state.rng, new - cur):
                t_idx[s] = j
                cur = new
                state._count(f"{tag}_theta", 1)
            else:
                state._count(f"{tag}_theta", 0)
        else:
            state._count(f"{tag}_theta", 1)


def _step7_copula(state):
    prep = state.prep
    _grid_mh(state, _x_scores(state), prep.n, state.b_idx_x, state.t_idx_x,
             "copula_x")
    x_tilde = _x_tilde(state)
    scales = _subject_scales(state, x_tilde)
    eps = _occ_residuals(state, x_tilde, scales)
    _grid_mh(state, _eps_scores(state, eps), prep.n_occ, state.b_idx_eps,
             state.t_idx_eps, "copula_eps")


def _adapt(state):
    hp = state.hp
    for block, (acc, prop) in list(state.window.items()):
        if prop < 20 or block.startswith("copula"):
            continue
        rate = acc / prop
        if block in state.scales:
            if rate < hp.adapt_low:
                state.scales[block] *= 0.7
            elif rate > hp.adapt_high:
                state.scales[block] *= 1.4
            state.scales[block] = min(max(state.scales[block], 1e-4), 10.0)
    state.window = {}


def sweep(state: SamplerState) -> SamplerState:
    """One full scan of the seven-step sampler; mutates and returns state."""
    _step1a_xi(state)
    _step1b_regular(state)
    x_tilde = _x_tilde(state)
    scales = _subject_scales(state, x_tilde)
    _step2_errors(state, x_tilde, scales)
    _step3_vartheta(state, x_tilde)
    scales = _subject_scales(state, x_tilde)
    _step4_latent_w(state, x_tilde, scales)
    _step5_beta(state)
    _step6_x(state)
    _step7_copula(state)
    state.iteration += 1
    hp = state.hp
    if state.iteration <= hp.burn_in and state.iteration % hp.adapt_interval == 0:
        _adapt(state)
    if not np.all(np.isfinite(state.x)):
        raise SamplerError(f"non-finite intake at iteration {state.iteration}")
    return state


# ---------------------------------------------------------------------------
# initialization


def _maximize(objective, start, grad=None):
    res = minimize(objective, start, jac=grad, method="L-BFGS-B",
                   options={"maxiter": 300})
    return res.x


def _init_vartheta(prep, hp, w_col, obs_mask, sig2):
    """Penalized within-subject variance fit for one amount coordinate."""
    pen = prep.penalty
    means = np.full(prep.n, np.nan)
    ss = np.zeros(prep.n)
    m_obs = np.zeros(prep.n)
    for i in range(prep.n):
        rows = (prep.subj == i) & obs_mask
        vals = w_col[rows]
        if len(vals) >= 2:
            means[i] = vals.mean()
            ss[i] = ((vals - vals.mean()) ** 2).sum()
            m_obs[i] = len(vals)
    keep = m_obs >= 2
    if not np.any(keep):
        return np.full(hp.num_bases, math.log(0.5))
    basis_vals = splines.basis_matrix_clamped(prep.basis, means[keep])
    ss = ss[keep]
    dof = m_obs[keep] - 1.0

    def negobj(th):
        c = np.exp(th)
        s2 = basis_vals @ c
        if np.any(s2 <= 1e-12):
            return 1e12
        return float(0.5 * th @ pen @ th / sig2
                     + 0.5 * np.sum(dof * np.log(s2) + ss / s2))

    def grad(th):
        c = np.exp(th)
        s2 = basis_vals @ c
        front = 0.5 * dof / s2 - 0.5 * ss / s2 ** 2
        return pen @ th / sig2 + (front @ basis_vals) * c

    start = np.full(hp.num_bases, math.log(max(np.mean(ss / np.maximum(dof, 1)),
                                               1e-3)))
    return _maximize(negobj, start, grad)


def _init_xi(prep, hp, subject_means, sig2):
    pen = prep.penalty
    pts = np.clip(subject_means, prep.basis.a, prep.basis.b)
    try:
        target = gaussian_kde(pts)(pts)
    except np.linalg.LinAlgError:
        return np.zeros(hp.num_bases)      # degenerate pilot: uniform start
    basis_vals = splines.basis_matrix_clamped(prep.basis, pts)

    def negobj(xi):
        shifted = np.exp(xi - xi.max())
        dens = basis_vals @ shifted / (prep.basis.areas @ shifted)
        return float(0.5 * xi @ pen @ xi / sig2
                     + np.sum((target - dens) ** 2))

    out = _maximize(negobj, np.zeros(hp.num_bases))
    return out - out.mean()


def _init_beta(prep, hp, subject_means, pos_fraction, sig2):
    pen = prep.penalty
    basis_vals = splines.basis_matrix_clamped(prep.basis, subject_means)
    target = np.clip(pos_fraction, 1e-3, 1 - 1e-3)

    def negobj(beta):
        fit = ndtr(basis_vals @ beta)
        return float(0.5 * beta @ pen @ beta / sig2
                     + np.sum((target - fit) ** 2))

    start = np.full(hp.num_bases, float(ndtri(target.mean())))
    return _maximize(negobj, start)


def initialize(data: RecallDataset, hp: Hyperparameters,
               rng: np.random.Generator) -> SamplerState:
    """Build the starting state: moment-based latent values, penalized
    direct fits for the spline blocks, k-means atoms warmed by conditional
    sweeps with the latent intakes held fixed, identity copulas."""
    prep = _prepare(data, hp)
    q, p, d, n = prep.q, prep.p, prep.d, prep.n
    j = hp.num_bases
    k_x = hp.atom_count(d)
    k_e = hp.eps_atom_count(d)
    lo = prep.basis.a + 0.005 * (prep.basis.b - prep.basis.a)
    hi = prep.basis.b - 0.005 * (prep.basis.b - prep.basis.a)

    subject_means = np.vstack([
        np.bincount(prep.subj, weights=prep.amounts[:, l], minlength=n)
        / prep.m_per_subject for l in range(d)]).T
    x = np.clip(subject_means, lo, hi)

    # shared truncated-normal atoms from pooled regular intakes
    atoms_mean = np.linspace(lo, hi, k_x)
    atoms_var = np.full(k_x, 1.0)
    labels_x = np.zeros((n, d), dtype=int)
    if p:
        pooled = x[:, q:].reshape(-1, 1)
        centers, assign = kmeans2(pooled, k_x, minit="++", seed=rng)
        atoms_mean = np.clip(centers.ravel(), lo, hi)
        order = np.argsort(atoms_mean)
        atoms_mean = atoms_mean[order]
        remap = np.empty(k_x, dtype=int)
        remap[order] = np.arange(k_x)
        assign = remap[assign]
        for kk in range(k_x):
            vals = pooled.ravel()[assign == kk]
            atoms_var[kk] = max(vals.var(), 0.05) if len(vals) > 1 else 0.5
        labels_x[:, q:] = assign.reshape(n, p)
    weights_x = np.full((d, k_x), 1.0 / k_x)

    # scaled-error atoms start at the standard-normal special case
    eps_p = np.full(k_e, 0.5)
    eps_mu = np.zeros(k_e)
    eps_v1 = np.ones(k_e)
    eps_v2 = np.ones(k_e)
    weights_eps = np.full((d, k_e), 1.0 / k_e)
    labels_eps = np.zeros((prep.n_occ, d), dtype=int)
    labels_eps2 = np.zeros((prep.n_occ, d), dtype=int)

    sig2_xi = np.full(max(q, 1), hp.init_smooth_var)[:q]
    sig2_theta = np.full(d, hp.init_smooth_var)
    sig2_beta = np.full(max(q, 1), hp.init_smooth_var)[:q]

    beta = np.zeros((q, j))
    xi = np.zeros((q, j))
    for l in range(q):
        pos_frac = np.array([
            prep.y_ind[prep.subj == i, l].mean() for i in range(n)])
        beta[l] = _init_beta(prep, hp, x[:, l], pos_frac, hp.init_smooth_var)
        xi[l] = _init_xi(prep, hp, x[:, l], hp.init_smooth_var)

    vartheta = np.zeros((d, j))
    w = np.zeros((prep.n_occ, 2 * q + p))
    w[:, q:] = prep.amounts
    obs_amounts = np.ones((prep.n_occ, d), dtype=bool)
    obs_amounts[:, :q] = prep.y_ind
    for e in range(d):
        vartheta[e] = _init_vartheta(prep, hp, prep.amounts[:, e],
                                     obs_amounts[:, e], hp.init_smooth_var)

    state = SamplerState(
        prep=prep, hp=hp, rng=rng, w=w, x=x, labels_x=labels_x,
        atoms_x_mean=atoms_mean, atoms_x_var=atoms_var, weights_x=weights_x,
        labels_eps=labels_eps, labels_eps2=labels_eps2, eps_p=eps_p,
        eps_mu=eps_mu, eps_v1=eps_v1, eps_v2=eps_v2, weights_eps=weights_eps,
        xi=xi, vartheta=vartheta, beta=beta, sig2_xi=sig2_xi,
        sig2_theta=sig2_theta, sig2_beta=sig2_beta,
        b_idx_x=np.full(d - 1, (hp.grid_size - 1) // 2, dtype=int),
        t_idx_x=np.full((d - 1) * (d - 2) // 2, (hp.grid_size - 1) // 2,
                        dtype=int),
        b_idx_eps=np.full(d - 1, (hp.grid_size - 1) // 2, dtype=int),
        t_idx_eps=np.full((d - 1) * (d - 2) // 2, (hp.grid_size - 1) // 2,
                          dtype=int))
    state.scales = {"atom_x_mu": hp.atom_scale_mu,
                    "atom_x_var": hp.atom_scale_var,
                    "eps_atom_p": hp.eps_scale_p,
                    "eps_atom_mu": hp.eps_scale_mu,
                    "eps_atom_var": hp.eps_scale_var}
    for l in range(q):
        state.scales[f"xi_{l}"] = hp.rw_scale_xi
    for e in range(d):
        state.scales[f"vartheta_{e}"] = hp.rw_scale_theta
    for l in range(d):
        state.scales[f"x_{l}"] = hp.x_prop_scale

    # impute latent surrogates once so residuals exist
    x_tilde = _x_tilde(state)
    scales = _subject_scales(state, x_tilde)
    for l in range(q):
        means = x_tilde[prep.subj, l]
        state.w[:, l] = draw_probit_surrogates(rng, means, prep.y_ind[:, l])
    for e in range(q):
        rows = ~prep.y_ind[:, e]
        center = x_tilde[prep.subj[rows], q + e]
        s = scales[prep.subj[rows], e]
        state.w[rows, q + e] = center + s * rng.standard_normal(rows.sum())

    # warm the shared atoms with conditional sweeps, X and W held fixed
    for _ in range(hp.warm_sweeps):
        _step1b_regular(state)
        _step2_errors(state, x_tilde, scales)
    state.accepts = {}
    state.window = {}
    return state


# ---------------------------------------------------------------------------
# chain driver and draws


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in snapshots of the density-relevant parameters."""

    meta: dict
    snapshots: list
    acceptance: dict
    final_x: np.ndarray

    _FIELDS = ("xi", "weights_x", "atoms_x_mean", "atoms_x_var",
               "weights_eps", "eps_p", "eps_mu", "eps_v1", "eps_v2",
               "vartheta", "beta", "b_x", "theta_x", "b_eps", "theta_eps")

    def __len__(self):
        return len(self.snapshots)

    def save_csv(self, path):
        cols = []
        shapes = {}
        for fld in self._FIELDS:
            arr = np.asarray(self.snapshots[0][fld])
            shapes[fld] = list(arr.shape)
            if arr.size == 0:
                continue
            for pos in range(arr.size):
                cols.append((fld, pos))
        header_meta = dict(self.meta)
        header_meta["shapes"] = shapes
        header_meta["acceptance"] = self.acceptance
        header_meta["final_x"] = np.asarray(self.final_x).tolist()
        lines = ["# dietdecon-draws v1",
                 "# meta: " + json.dumps(header_meta, sort_keys=True),
                 ",".join(f"{fld}[{pos}]" for fld, pos in cols)]
        for snap in self.snapshots:
            flat = [repr(float(np.asarray(snap[fld]).ravel()[pos]))
                    for fld, pos in cols]
            lines.append(",".join(flat))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        meta_line = next(ln for ln in lines if ln.startswith("# meta:"))
        meta = json.loads(meta_line[len("# meta:"):])
        shapes = {k: tuple(v) for k, v in meta.pop("shapes").items()}
        acceptance = meta.pop("acceptance")
        final_x = np.asarray(meta.pop("final_x"))
        body = [ln for ln in lines if ln and not ln.startswith("#")]
        snapshots = []
        for row in body[1:]:
            vals = np.asarray([float(v) for v in row.split(",")])
            snap = {}
            offset = 0
            for fld in cls._FIELDS:
                size = int(np.prod(shapes[fld])) if shapes[fld] else 1
                if np.prod(shapes[fld]) == 0:
                    snap[fld] = np.zeros(shapes[fld])
                    continue
                snap[fld] = vals[offset: offset + size].reshape(shapes[fld])
                offset += size
            snapshots.append(snap)
        return cls(meta=meta, snapshots=snapshots, acceptance=acceptance,
                   final_x=final_x)

    def save_npz(self, path):
        stacked = {fld: np.stack([np.asarray(s[fld]) for s in self.snapshots])
                   for fld in self._FIELDS}
        np.savez(path,
                 meta=json.dumps({**self.meta, "acceptance": self.acceptance},
                                 sort_keys=True),
                 final_x=self.final_x, **stacked)

    @classmethod
    def load_npz(cls, path):
        blob = np.load(path, allow_pickle=False)
        meta = json.loads(str(blob["meta"]))
        acceptance = meta.pop("acceptance")
        count = blob[cls._FIELDS[0]].shape[0]
        snapshots = [{fld: blob[fld][i] for fld in cls._FIELDS}
                     for i in range(count)]
        return cls(meta=meta, snapshots=snapshots, acceptance=acceptance,
                   final_x=blob["final_x"])


def _snapshot(state: SamplerState) -> dict:
    prep = state.prep
    return {
        "xi": state.xi.copy(),
        "weights_x": state.weights_x.copy(),
        "atoms_x_mean": state.atoms_x_mean.copy(),
        "atoms_x_var": state.atoms_x_var.copy(),
        "weights_eps": state.weights_eps.copy(),
        "eps_p": state.eps_p.copy(),
        "eps_mu": state.eps_mu.copy(),
        "eps_v1": state.eps_v1.copy(),
        "eps_v2": state.eps_v2.copy(),
        "vartheta": state.vartheta.copy(),
        "beta": state.beta.copy(),
        "b_x": prep.b_grid[state.b_idx_x].copy(),
        "theta_x": prep.t_grid[state.t_idx_x].copy(),
        "b_eps": prep.b_grid[state.b_idx_eps].copy(),
        "theta_eps": prep.t_grid[state.t_idx_eps].copy(),
    }


def run_chain(data: RecallDataset, hp: Hyperparameters, seed,
              progress=None) -> PosteriorDraws:
    """Initialize and run one chain on an already-scaled dataset."""
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    state = initialize(data, hp, rng)
    snapshots = []
    for it in range(1, hp.iterations + 1):
        try:
            sweep(state)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            raise SamplerError(f"numerical failure at iteration {it}: {exc}")
        if it > hp.burn_in and (it - hp.burn_in) % hp.thin == 0:
            snapshots.append(_snapshot(state))
        if progress and it % progress == 0:
            print(f"iteration {it}/{hp.iterations}", flush=True)
    meta = {
        "q": state.prep.q, "p": state.prep.p, "n": state.prep.n,
        "num_bases": hp.num_bases, "support": list(hp.support),
        "names": state.prep.names,
        "scale_factors": state.prep.scale_factors.tolist(),
        "iterations": hp.iterations, "burn_in": hp.burn_in, "thin": hp.thin,
    }
    return PosteriorDraws(meta=meta, snapshots=snapshots,
                          acceptance=state.acceptance_rates(),
                          final_x=state.x.copy())


# ---------------------------------------------------------------------------
# posterior density reconstruction


def _draw_basis(meta):
    return splines.make_basis(meta["support"][0], meta["support"][1],
                              meta["num_bases"])


def snapshot_marginal_x(snap, meta, comp):
    q = meta["q"]
    basis = _draw_basis(meta)
    if comp < q:
        return BsplineDensity(basis, snap["xi"][comp])
    return TruncNormMixture(snap["weights_x"][comp] /
                            snap["weights_x"][comp].sum(),
                            snap["atoms_x_mean"], snap["atoms_x_var"],
                            basis.a, basis.b)


def snapshot_error_mixture(snap, meta, coord):
    kernels = [RestrictedErrorKernel(p, mu, v1, v2)
               for p, mu, v1, v2 in zip(snap["eps_p"], snap["eps_mu"],
                                        snap["eps_v1"], snap["eps_v2"])]
    w = snap["weights_eps"][coord]
    return ErrorMixture(w / w.sum(), kernels)


def snapshot_variance_fn(snap, meta, coord):
    return VarianceFunction(_draw_basis(meta), snap["vartheta"][coord])


def snapshot_consumption_curve(snap, meta, comp):
    return ConsumptionCurve(_draw_basis(meta), snap["beta"][comp])


def posterior_mean_marginal(draws: PosteriorDraws, comp, grid):
    grid = np.asarray(grid, dtype=float)
    acc = np.zeros_like(grid)
    for snap in draws.snapshots:
        acc += snapshot_marginal_x(snap, draws.meta, comp).density(grid)
    return acc / len(draws.snapshots)


def posterior_mean_prob_curve(draws: PosteriorDraws, comp, grid):
    grid = np.asarray(grid, dtype=float)
    acc = np.zeros_like(grid)
    for snap in draws.snapshots:
        acc += snapshot_consumption_curve(snap, draws.meta, comp).prob(grid)
    return acc / len(draws.snapshots)


def posterior_mean_variance_fn(draws: PosteriorDraws, coord, grid):
    grid = np.asarray(grid, dtype=float)
    acc = np.zeros_like(grid)
    for snap in draws.snapshots:
        acc += snapshot_variance_fn(snap, draws.meta, coord).variance(grid)
    return acc / len(draws.snapshots)


def posterior_mean_error_density(draws: PosteriorDraws, coord, grid):
    grid = np.asarray(grid, dtype=float)
    acc = np.zeros_like(grid)
    for snap in draws.snapshots:
        acc += snapshot_error_mixture(snap, draws.meta, coord).density(grid)
    return acc / len(draws.snapshots)


def estimate_densities(draws: PosteriorDraws, grid_points=101,
                       error_range=(-5.0, 5.0), pairs=()):
    """Posterior-mean density, variance and probability grids (scaled units).

    Univariate intake densities are renormalized on their grid so the
    trapezoid integral is 1 to within 1e-6.  ``pairs`` requests bivariate
    intake marginals as (comp_i, comp_j) tuples.
    """
    from .evaluate import DensityGrid, EvaluationError

    if not draws.snapshots:
        raise EvaluationError("no posterior draws to average")
    meta = draws.meta
    q, p = meta["q"], meta["p"]
    names = meta["names"]
    lo, hi = meta["support"]
    grid = np.linspace(lo, hi, grid_points)
    egrid = np.linspace(error_range[0], error_range[1], grid_points)
    prov = {"draws": len(draws.snapshots),
            "scale_factors": meta["scale_factors"]}
    out = {}
    for comp in range(q + p):
        vals = posterior_mean_marginal(draws, comp, grid)
        vals = vals / np.trapezoid(vals, grid)
        out[f"marginal_x_{names[comp]}"] = DensityGrid(
            axes=[(names[comp], grid)], values=vals, kind="marginal_x",
            provenance=prov)
        evals = posterior_mean_error_density(draws, comp, egrid)
        evals = evals / np.trapezoid(evals, egrid)
        out[f"error_{names[comp]}"] = DensityGrid(
            axes=[(names[comp], egrid)], values=evals, kind="error",
            provenance=prov)
        out[f"variance_{names[comp]}"] = DensityGrid(
            axes=[(names[comp], grid)],
            values=posterior_mean_variance_fn(draws, comp, grid),
            kind="variance", provenance=prov)
    for comp in range(q):
        out[f"prob_{names[comp]}"] = DensityGrid(
            axes=[(names[comp], grid)],
            values=posterior_mean_prob_curve(draws, comp, grid),
            kind="probability", provenance=prov)
    for ci, cj in pairs:
        mesh_i, mesh_j = np.meshgrid(grid, grid, indexing="ij")
        pts = np.column_stack([mesh_i.ravel(), mesh_j.ravel()])
        vals = posterior_mean_joint(draws, pts, components=[ci, cj])
        out[f"joint_{names[ci]}_{names[cj]}"] = DensityGrid(
            axes=[(names[ci], grid), (names[cj], grid)],
            values=vals.reshape(grid_points, grid_points), kind="joint_x",
            provenance=prov)
    return out


def posterior_mean_joint(draws: PosteriorDraws, points, components=None):
    """Posterior-mean joint (or lower-dimensional marginal) density of X.

    ``components`` selects a coordinate subset (default: all); the copula
    of a subset is the corresponding submatrix of R_X.
    """
    from .copula import recover_params

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    meta = draws.meta
    d = meta["q"] + meta["p"]
    components = list(range(d)) if components is None else list(components)
    acc = np.zeros(pts.shape[0])
    for snap in draws.snapshots:
        corr_full = build_corr(snap["b_x"], snap["theta_x"]).matrix
        sub = corr_full[np.ix_(components, components)]
        corr = build_corr(*recover_params(sub)) if len(components) > 1 else None
        dens = np.ones(pts.shape[0])
        scores = []
        for col, comp in enumerate(components):
            marg = snapshot_marginal_x(snap, meta, comp)
            vals = np.clip(pts[:, col], marg.support[0] + 1e-12,
                           marg.support[1] - 1e-12)
            dens *= marg.density(vals)
            scores.append(_scores_from_u(marg.cdf(vals)))
        if corr is not None:
            dens *= np.exp(_log_factor(np.column_stack(scores), corr))
        acc += dens
    return acc / len(draws.snapshots)
