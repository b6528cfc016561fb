"""Scoring and post-fit analysis: ISE, energy adjustment, diagnostics, grids."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .model import RecallDataset
from .splines import basis_matrix_clamped


class EvaluationError(ValueError):
    """Invalid evaluation request."""


@dataclass
class DensityGrid:
    """Gridded evaluation of a density, variance or probability curve.

    ``axes`` is a list of (component name, strictly increasing points);
    ``values`` has one dimension per axis.  ``kind`` is one of marginal_x,
    joint_x, error, variance, probability, normalized_x.  ``provenance``
    records draw counts, scenario ids and the scaling factors needed to
    express the grid in raw units.
    """

    axes: list
    values: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)

    _DENSITY_KINDS = ("marginal_x", "joint_x", "error", "normalized_x")

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != len(self.axes):
            raise EvaluationError("values must have one dimension per axis")
        for name, pts in self.axes:
            pts = np.asarray(pts)
            if np.any(np.diff(pts) <= 0):
                raise EvaluationError(f"axis {name} is not strictly increasing")
        if self.kind in self._DENSITY_KINDS and np.any(self.values < -1e-12):
            raise EvaluationError("density grid has negative values")
        if self.kind in ("marginal_x", "error", "normalized_x"):
            total = np.trapezoid(self.values, np.asarray(self.axes[0][1]))
            if abs(total - 1.0) > 1e-3:
                raise EvaluationError(
                    f"univariate density integrates to {total:.4f}, not 1")

    def to_raw_units(self, scale_factors):
        """Undo per-component linear scaling (scaled = c * raw).

        Grid points divide by c; density values pick up the Jacobian
        prod(c); probability and variance curves transform accordingly.
        """
        c = np.atleast_1d(np.asarray(scale_factors, dtype=float))
        if len(c) != len(self.axes):
            raise EvaluationError("one scale factor per axis is required")
        axes = [(name, np.asarray(pts) / ci)
                for (name, pts), ci in zip(self.axes, c)]
        if self.kind in self._DENSITY_KINDS:
            values = self.values * np.prod(c)
        elif self.kind == "variance":
            values = self.values / c[0] ** 2
        else:
            values = self.values.copy()
        prov = dict(self.provenance)
        prov["scale_factors"] = [float(v) for v in c]
        return DensityGrid(axes=axes, values=values, kind=self.kind,
                           provenance=prov)

    def write_csv(self, path_or_buf):
        lines = [f"# kind: {self.kind}"]
        for key in sorted(self.provenance):
            lines.append(f"# {key}: {self.provenance[key]}")
        names = [name for name, _ in self.axes]
        lines.append(",".join(names) + ",value")
        mesh = np.meshgrid(*[pts for _, pts in self.axes], indexing="ij")
        flat = [m.ravel() for m in mesh] + [self.values.ravel()]
        for row in zip(*flat):
            lines.append(",".join(repr(float(v)) for v in row))
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


@dataclass
class IseReport:
    """Monte Carlo integrated squared errors, one row per target."""

    scenario: str
    method: str
    targets: list          # e.g. ["joint", "epis1", ...]
    values: list
    n_points: int

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise EvaluationError("ISE must be nonnegative")

    def write_csv(self, path_or_buf):
        lines = ["scenario,method,target,n_points,ise"]
        for target, value in zip(self.targets, self.values):
            lines.append(f"{self.scenario},{self.method},{target},"
                         f"{self.n_points},{repr(float(value))}")
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as fh:
                fh.write(text)


def ise_estimate(truth_values, estimate_values, truth_density_at_points=None):
    """Monte Carlo ISE from evaluation points drawn from the truth density.

    With points X_m ~ p0 = truth, mean{(f - fhat)^2 / p0} estimates
    int (f - fhat)^2.  ``truth_values`` doubles as p0 when no separate
    importance density is given.
    """
    f = np.asarray(truth_values, dtype=float)
    fh = np.asarray(estimate_values, dtype=float)
    p0 = f if truth_density_at_points is None \
        else np.asarray(truth_density_at_points, dtype=float)
    if f.shape != fh.shape or f.shape != p0.shape:
        raise EvaluationError("value arrays must align")
    if np.any(p0 <= 0):
        raise EvaluationError("truth density vanishes at an evaluation point")
    return float(np.mean((f - fh) ** 2 / p0))


def energy_adjusted_marginal(joint_pdf, z_grid, energy_support,
                             component_names=("ratio", "energy"),
                             tol=1e-8):
    """Density of Z = X_comp / X_energy from a bivariate joint density.

    f_Z(z) = int t * f(z t, t) dt, one adaptive quadrature per grid point.
    """
    z_grid = np.asarray(z_grid, dtype=float)
    lo, hi = energy_support
    values = np.empty_like(z_grid)
    for i, z in enumerate(z_grid):
        val, err = quad(lambda t: t * joint_pdf(z * t, t), lo, hi,
                        limit=300, epsabs=tol, epsrel=tol)
        if not np.isfinite(val):
            raise EvaluationError(f"quadrature failed at z={z}")
        values[i] = max(val, 0.0)
    return DensityGrid(axes=[(component_names[0], z_grid)], values=values,
                       kind="normalized_x",
                       provenance={"energy_component": component_names[1]})


@dataclass
class ResidualRow:
    component: str
    occasion_pair: tuple
    correlation: float
    ci_low: float
    ci_high: float
    n_pairs: int


def _fisher_ci(r, n):
    if n < 4 or abs(r) >= 1.0:
        return -1.0, 1.0
    z = math.atanh(r)
    half = 1.959963984540054 / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


def residual_diagnostics(dataset: RecallDataset, draws):
    """Adjacent-occasion correlations of estimated scaled residuals.

    Residuals use the final retained draw's latent intakes and variance
    functions; only occasions with observed surrogates contribute (all for
    regular components, positive recalls for episodic ones).
    """
    from .sampler import (snapshot_consumption_curve, snapshot_variance_fn)

    if dataset.occasions.min() < 2:
        raise EvaluationError("residual diagnostics need 2+ occasions")
    meta = draws.meta
    q, p = meta["q"], meta["p"]
    snap = draws.snapshots[-1]
    final_x = np.asarray(draws.final_x)
    curves = [snapshot_consumption_curve(snap, meta, l) for l in range(q)]
    rows = []
    max_m = int(dataset.occasions.max())
    for e in range(q + p):
        var_fn = snapshot_variance_fn(snap, meta, e)
        if e < q:
            probs = np.maximum(
                np.array([float(curves[e].prob(v)) for v in final_x[:, e]]),
                1e-8)
            x_tilde = final_x[:, e] / probs
        else:
            x_tilde = final_x[:, e]
        s = var_fn.sd(x_tilde)
        for j in range(1, max_m):
            lhs, rhs = [], []
            for i, a in enumerate(dataset.amounts):
                if a.shape[0] <= j:
                    continue
                w_prev, w_next = a[j - 1, e], a[j, e]
                if e < q and (w_prev == 0 or w_next == 0):
                    continue
                lhs.append((w_prev - x_tilde[i]) / s[i])
                rhs.append((w_next - x_tilde[i]) / s[i])
            if len(lhs) < 4:
                continue
            lhs, rhs = np.asarray(lhs), np.asarray(rhs)
            if lhs.std() == 0 or rhs.std() == 0:
                r = 1.0 if np.allclose(lhs, rhs) else 0.0
            else:
                r = float(np.corrcoef(lhs, rhs)[0, 1])
            lo, hi = _fisher_ci(r, len(lhs))
            rows.append(ResidualRow(component=dataset.names[e],
                                    occasion_pair=(j, j + 1),
                                    correlation=r, ci_low=lo, ci_high=hi,
                                    n_pairs=len(lhs)))
    return rows


def residuals_to_csv(rows, path_or_buf):
    lines = ["component,occasion_prev,occasion_next,correlation,"
             "ci_low,ci_high,n_pairs"]
    for row in rows:
        lines.append(f"{row.component},{row.occasion_pair[0]},"
                     f"{row.occasion_pair[1]},{repr(row.correlation)},"
                     f"{repr(row.ci_low)},{repr(row.ci_high)},{row.n_pairs}")
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)
