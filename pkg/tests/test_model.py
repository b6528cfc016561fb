import io
import math

import numpy as np
import pytest
from scipy.special import ndtr

from dietdecon.copula import build_corr
from dietdecon.densities import ErrorMixture, RestrictedErrorKernel, norm_logpdf
from dietdecon.model import (
    ConsumptionCurve,
    DataError,
    DegenerateProbabilityError,
    ErrorLaw,
    IntakeState,
    RecallDataset,
    SurrogateState,
    VarianceFunction,
    consumption_prob,
    log_lik_occasion,
    scale_recalls,
    surrogate_mean,
)
from dietdecon.splines import basis_matrix, make_basis


def toy_dataset(q=1, p=1, n=4, m=3, seed=0):
    rng = np.random.default_rng(seed)
    amounts = []
    for _ in range(n):
        epis = rng.uniform(0, 5, size=(m, q)) * (rng.random((m, q)) > 0.3)
        reg = rng.uniform(0.5, 8, size=(m, p))
        amounts.append(np.column_stack([epis, reg]))
    names = [f"epis{k}" for k in range(q)] + [f"reg{k}" for k in range(p)]
    return RecallDataset(q=q, p=p, names=names, amounts=amounts)


def std_normal_mixture():
    return ErrorMixture([1.0], [RestrictedErrorKernel(0.5, 0.0, 1.0, 1.0)])


def test_dataset_validation():
    with pytest.raises(DataError):
        RecallDataset(q=0, p=1, names=["reg"], amounts=[np.array([[0.0]])])
    with pytest.raises(DataError):
        RecallDataset(q=1, p=0, names=["e"], amounts=[np.array([[-1.0]])])
    ds = toy_dataset()
    assert ds.n_subjects == 4
    ind = ds.indicators(0)
    assert set(np.unique(ind)) <= {0, 1}


def test_scale_recalls_factor():
    amounts = [np.array([[500.0, 3.0], [100.0, 1.0], [0.0, 2.0]])]
    ds = RecallDataset(q=1, p=1, names=["e", "r"], amounts=amounts)
    scaled = scale_recalls(ds)
    assert scaled.scale_factors[0] == pytest.approx(0.04)
    assert scaled.amounts[0][:, 0].max() == pytest.approx(20.0)
    assert scaled.amounts[0][2, 0] == 0.0
    # scaling an already scaled dataset is the identity on values
    again = scale_recalls(scaled)
    np.testing.assert_allclose(again.amounts[0], scaled.amounts[0])
    np.testing.assert_allclose(again.scale_factors,
                               scaled.scale_factors * (20.0 / 20.0))


def test_scale_preserves_within_component_ratios():
    ds = toy_dataset(seed=3)
    scaled = scale_recalls(ds)
    raw = ds.stacked_amounts()
    new = scaled.stacked_amounts()
    pos = raw[:, 1] > 0
    np.testing.assert_allclose(new[pos, 1] / raw[pos, 1],
                               scaled.scale_factors[1])


def test_scale_rejects_all_zero_component():
    amounts = [np.array([[0.0, 1.0], [0.0, 2.0]])]
    with pytest.raises(DataError):
        RecallDataset(q=1, p=1, names=["e", "r"], amounts=amounts)


def test_csv_roundtrip():
    ds = toy_dataset(q=2, p=1, n=5, m=4, seed=9)
    buf = io.StringIO()
    ds.to_csv(buf)
    buf.seek(0)
    back = RecallDataset.from_csv(buf, q=2)
    assert back.names == ds.names
    for a, b in zip(ds.amounts, back.amounts):
        np.testing.assert_array_equal(a, b)


def test_consumption_prob_values():
    basis = make_basis(0.0, 10.0, 12)
    curve = ConsumptionCurve(basis, np.zeros(12))
    assert consumption_prob(curve, 5.0) == pytest.approx(0.5)
    curve4 = ConsumptionCurve(basis, np.full(12, 4.0))
    assert consumption_prob(curve4, 3.3) == pytest.approx(ndtr(4.0), abs=1e-12)
    assert consumption_prob(curve4, 3.3) == pytest.approx(0.99997, abs=1e-4)
    with pytest.raises(DataError):
        consumption_prob(curve, 11.0)


def test_consumption_prob_matches_truth_anchor():
    # truth curve h(X) = 1.5 + newlog(X) has P(1) = Phi(1.5)
    from dietdecon.simulate import newlog
    assert ndtr(1.5 + newlog(1.0)) == pytest.approx(0.9332, abs=2e-4)


def test_surrogate_mean_cases():
    basis = make_basis(0.0, 10.0, 12)
    curve = ConsumptionCurve(basis, np.zeros(12))   # P = 0.5 everywhere
    state = IntakeState(q=1, p=1, x=np.array([2.0, 3.0]), curves=[curve])
    assert surrogate_mean(state, 1) == pytest.approx(4.0)   # X / P
    assert surrogate_mean(state, 2) == pytest.approx(3.0)   # regular: X itself
    assert state.x[0] == pytest.approx(state.probs[0] * state.x_plus[0])
    # P -> 1 limit: episodic amount surrogate centers on X itself
    sure = ConsumptionCurve(basis, np.full(12, 30.0))
    state1 = IntakeState(q=1, p=0, x=np.array([2.0]), curves=[sure])
    assert surrogate_mean(state1, 1) == pytest.approx(2.0, abs=1e-9)


def test_degenerate_probability():
    basis = make_basis(0.0, 10.0, 12)
    never = ConsumptionCurve(basis, np.full(12, -30.0))
    state = IntakeState(q=1, p=0, x=np.array([2.0]), curves=[never])
    with pytest.raises(DegenerateProbabilityError):
        state.x_plus


def test_surrogate_sign_validation():
    state = SurrogateState(q=1, p=0, w=np.array([[0.5, 2.0], [-0.5, 1.0]]),
                           observed=np.zeros((2, 2), dtype=bool))
    state.validate_signs(np.array([[1], [0]]))
    with pytest.raises(DataError):
        state.validate_signs(np.array([[0], [1]]))


def _flat_variance(basis, value):
    return VarianceFunction(basis, np.full(basis.num_bases, math.log(value)))


def test_log_lik_zero_error_case():
    basis = make_basis(0.0, 10.0, 12)
    q, p = 1, 1
    law = ErrorLaw(q=q, p=p,
                   mixtures=[std_normal_mixture(), std_normal_mixture()],
                   variance_fns=[_flat_variance(basis, 4.0),
                                 _flat_variance(basis, 0.25)],
                   correlation=build_corr([0.0], []))
    x_tilde = np.array([0.7, 3.0, 5.0])
    val = log_lik_occasion(x_tilde.copy(), x_tilde, law)
    expected = 3 * norm_logpdf(0.0) - 0.5 * math.log(4.0) - 0.5 * math.log(0.25)
    assert val == pytest.approx(expected, abs=1e-10)


def test_log_lik_heteroscedastic_oracle():
    # q=0, p=1 with quadratic variance s^2(x) = (x^2 + 1)/9, representable
    # exactly in the spline basis, against the hand-written normal likelihood
    basis = make_basis(0.0, 10.0, 12)
    grid = np.linspace(0, 10, 400)
    coefs, *_ = np.linalg.lstsq(basis_matrix(basis, grid),
                                (grid ** 2 + 1.0) / 9.0, rcond=None)
    var_fn = VarianceFunction(basis, np.log(coefs))
    law = ErrorLaw(q=0, p=1, mixtures=[std_normal_mixture()],
                   variance_fns=[var_fn], correlation=build_corr([], []))
    for x, w in [(2.0, 2.5), (5.0, 4.0), (8.0, 8.4)]:
        s = math.sqrt((x * x + 1.0) / 9.0)
        expected = float(norm_logpdf((w - x) / s)) - math.log(s)
        got = log_lik_occasion(np.array([w]), np.array([x]), law)
        assert got == pytest.approx(expected, abs=1e-9)


def test_log_lik_finite_difference_consistency():
    # adding delta to one W coordinate changes the log likelihood in line
    # with the numerical derivative of the density
    basis = make_basis(0.0, 10.0, 12)
    kern = RestrictedErrorKernel(0.4, 1.0, 0.8, 1.4)
    mix = ErrorMixture([1.0], [kern])
    law = ErrorLaw(q=1, p=1, mixtures=[mix, std_normal_mixture()],
                   variance_fns=[_flat_variance(basis, 1.0),
                                 _flat_variance(basis, 0.5)],
                   correlation=build_corr([0.4], []))
    x_tilde = np.array([0.2, 4.0, 5.0])
    w = np.array([0.5, 4.6, 4.8])
    delta = 1e-5
    for coord in range(3):
        wp = w.copy()
        wm = w.copy()
        wp[coord] += delta
        wm[coord] -= delta
        grad = (log_lik_occasion(wp, x_tilde, law)
                - log_lik_occasion(wm, x_tilde, law)) / (2 * delta)
        finer = 1e-6
        wp2, wm2 = w.copy(), w.copy()
        wp2[coord] += finer
        wm2[coord] -= finer
        grad2 = (log_lik_occasion(wp2, x_tilde, law)
                 - log_lik_occasion(wm2, x_tilde, law)) / (2 * finer)
        assert grad == pytest.approx(grad2, rel=1e-3, abs=1e-6)


def test_log_lik_independence_reduces_to_marginals():
    basis = make_basis(0.0, 10.0, 12)
    kern = RestrictedErrorKernel(0.3, 0.7, 0.6, 1.1)
    mix = ErrorMixture([1.0], [kern])
    law = ErrorLaw(q=0, p=2, mixtures=[mix, std_normal_mixture()],
                   variance_fns=[_flat_variance(basis, 1.0),
                                 _flat_variance(basis, 2.0)],
                   correlation=build_corr([0.0], []))
    x_tilde = np.array([3.0, 6.0])
    w = np.array([3.7, 5.1])
    s2 = math.sqrt(2.0)
    expected = (math.log(float(mix.density(0.7)))
                + float(norm_logpdf((5.1 - 6.0) / s2)) - math.log(s2))
    assert log_lik_occasion(w, x_tilde, law) == pytest.approx(expected, abs=1e-10)
