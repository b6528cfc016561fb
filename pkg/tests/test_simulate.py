import io
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtri

from dietdecon.simulate import (
    GroundTruth,
    LognormalScenario,
    MainScenario,
    SimulationError,
    generate,
    generate_lognormal,
    generate_main,
    lognormal_marginal_is,
    lognormal_regular_marginal_pdf,
    main_joint_pdf,
    newlog,
    read_sidecar,
    truth_density,
    zero_recall_rates,
)


def test_newlog_values():
    assert newlog(1.0) == 0.0
    assert newlog(2.0) == pytest.approx(7.0 / 12.0)
    assert abs(newlog(1.1) - math.log(1.1)) <= 1e-5
    # fourth-order expansion turns downward well above the expansion point
    assert newlog(4.0) < newlog(2.0)


def test_main_scenario_defaults():
    spec = MainScenario(q=2, p=1, n=10, m=3, seed=1)
    assert spec.gamma0 == (1.5, 1.75)
    assert np.allclose(np.asarray(spec.corr_x)[0],
                       [1.0, 0.7, 0.49])
    assert spec.error_table[-1]["kind"] == "laplace"
    assert spec.names == ["epis1", "epis2", "reg1"]


def test_generate_main_zero_rates_and_correlations():
    spec = MainScenario(q=3, p=0, n=10_000, m=3, seed=7)
    truth = generate_main(spec)
    rates = zero_recall_rates(truth.dataset)
    np.testing.assert_allclose(rates, [0.20, 0.35, 0.17], atol=0.03)
    u = np.column_stack([spec.marginal(l).cdf(truth.x[:, l])
                         for l in range(3)])
    scores = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    np.testing.assert_allclose(np.corrcoef(scores.T),
                               np.asarray(spec.corr_x), atol=0.02)


def test_generate_main_independent_components():
    spec = MainScenario(q=0, p=3, n=20_000, m=2, seed=3,
                        corr_x=np.eye(3).tolist())
    truth = generate_main(spec)
    corr = np.corrcoef(truth.x.T)
    off = corr[np.triu_indices(3, k=1)]
    assert np.all(np.abs(off) <= 4.0 / math.sqrt(20_000))


def test_generate_main_error_variance_one():
    # last amount coordinate carries the Laplace block with unit variance
    spec = MainScenario(q=0, p=3, n=40_000, m=2, seed=11)
    dist = spec.error_dist(2)
    draws = dist.sample(np.random.default_rng(0), size=100_000)
    assert draws.var() == pytest.approx(1.0, abs=0.02)
    assert abs(draws.mean()) < 0.02


def test_generate_main_surrogates_unbiased_for_x_plus():
    # positive recalls center on the consumption-day intake X+ = X / P
    spec = MainScenario(q=1, p=0, n=4000, m=25, seed=5)
    truth = generate_main(spec)
    mid = (truth.x_plus[:, 0] > 1.0) & (truth.x_plus[:, 0] < 4.0)
    ratios = []
    for i in np.flatnonzero(mid):
        amounts = truth.dataset.amounts[i][:, 0]
        pos = amounts > 0
        if pos.sum() >= 5:
            ratios.append(amounts[pos].mean() / truth.x_plus[i, 0])
    ratios = np.asarray(ratios)
    se = ratios.std() / math.sqrt(len(ratios))
    assert abs(ratios.mean() - 1.0) < 4 * se + 0.01


def test_generate_main_dataset_valid_and_deterministic():
    spec = MainScenario(q=2, p=1, n=200, m=3, seed=42)
    t1 = generate_main(spec)
    t2 = generate_main(MainScenario(q=2, p=1, n=200, m=3, seed=42))
    for a, b in zip(t1.dataset.amounts, t2.dataset.amounts):
        np.testing.assert_array_equal(a, b)
    buf1, buf2 = io.StringIO(), io.StringIO()
    t1.dataset.to_csv(buf1)
    t2.dataset.to_csv(buf2)
    assert buf1.getvalue() == buf2.getvalue()


def test_main_joint_pdf_matches_independence_product():
    spec = MainScenario(q=0, p=2, n=10, m=2, seed=1,
                        corr_x=np.eye(2).tolist(),
                        atom_means=[[1.0, 2.0, 3.0], [2.0, 2.5, 3.0]])
    pts = np.array([[1.0, 2.0], [2.5, 3.0]])
    vals = main_joint_pdf(spec, pts)
    expected = (spec.marginal(0).density(pts[:, 0])
                * spec.marginal(1).density(pts[:, 1]))
    np.testing.assert_allclose(vals, expected, rtol=1e-10)


def test_main_truth_marginal_integrates():
    spec = MainScenario(q=2, p=1, n=10, m=3, seed=1)
    truth = generate_main(spec)
    est = truth_density(truth, ("marginal", 0), np.linspace(0, 6, 5))
    assert est.se is None
    val, _ = quad(lambda x: truth_density(truth, ("marginal", 0),
                                          np.array([x])).values[0], 0, 6,
                  limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_lognormal_scenario_covariances():
    spec = LognormalScenario(q=2, p=1, n=10, m=3, seed=1)
    assert spec.sigma_tr[0, 0] == pytest.approx(0.25)
    # off-diagonals are correlation-scaled, not raw 0.7^{|l-l'|}
    assert spec.sigma_tr[0, 1] == pytest.approx(
        0.7 * math.sqrt(0.25 * 0.15))
    np.linalg.cholesky(spec.sigma_tr)
    np.linalg.cholesky(spec.sigma_u)


def test_generate_lognormal_zero_rates():
    spec = LognormalScenario(q=2, p=1, n=10_000, m=3, seed=9)
    truth = generate_lognormal(spec)
    rates = zero_recall_rates(truth.dataset)
    np.testing.assert_allclose(rates, [0.25, 0.18], atol=0.03)


def test_generate_lognormal_regular_marginal_exact():
    spec = LognormalScenario(q=2, p=1, n=50_000, m=2, seed=10)
    truth = generate_lognormal(spec)
    # closed form: X_reg = exp(Xtr_5) ~ LN(1.0, 0.05)
    logx = np.log(truth.x[:, 2])
    assert logx.mean() == pytest.approx(1.0, abs=4 * math.sqrt(0.05 / 50_000))
    assert logx.var() == pytest.approx(0.05, rel=0.05)


def test_lognormal_multiplicative_error_mean_one():
    spec = LognormalScenario(q=2, p=1, n=3000, m=30, seed=12)
    truth = generate_lognormal(spec)
    # E(exp(U - sigma^2/2)) = 1: recalls are unbiased for exp(Xtr)
    big = np.concatenate([a[:, 2] for a in truth.dataset.amounts])
    per_subject = np.array([a[:, 2].mean() for a in truth.dataset.amounts])
    ratio = per_subject / truth.x[:, 2]
    se = ratio.std() / math.sqrt(len(ratio))
    assert abs(ratio.mean() - 1.0) < 4 * se + 1e-3
    assert big.min() > 0


def test_lognormal_is_matches_closed_form_regular():
    spec = LognormalScenario(q=2, p=1, n=10, m=3, seed=1)
    grid = np.linspace(1.2, 6.0, 50)
    est = lognormal_marginal_is(spec, comp=2, x=grid, num_samples=50_000,
                                seed=77)
    exact = lognormal_regular_marginal_pdf(spec, 2, grid)
    assert np.all(np.abs(est.values - exact) <= 3 * est.se + 1e-12)
    assert not est.degenerate


def test_lognormal_is_episodic_marginal_integrates():
    spec = LognormalScenario(q=2, p=1, n=10, m=3, seed=1)
    truth = generate_lognormal(spec)
    grid = np.linspace(1e-3, 12.0, 400)
    with pytest.warns(RuntimeWarning):
        # far-tail grid points make the per-point ESS collapse by design
        est = truth_density(truth, ("marginal", 0), grid, num_samples=30_000)
    total = np.trapezoid(est.values, grid)
    assert total == pytest.approx(1.0, abs=1e-2)
    bulk = truth_density(truth, ("marginal", 0), np.linspace(0.3, 6.0, 40),
                         num_samples=30_000)
    assert bulk.ess >= 100
    assert not bulk.degenerate


def test_lognormal_joint_is_consistent_with_marginal():
    spec = LognormalScenario(q=2, p=1, n=10, m=3, seed=1)
    truth = generate_lognormal(spec)
    pts = truth.x[:5]
    est = truth_density(truth, "joint", pts, num_samples=40_000)
    assert np.all(est.values > 0)
    assert est.se is not None


def test_sidecar_roundtrip():
    spec = MainScenario(q=2, p=1, n=25, m=3, seed=13)
    truth = generate_main(spec)
    buf = io.StringIO()
    truth.write_sidecar(buf)
    buf.seek(0)
    spec2, x2 = read_sidecar(buf)
    np.testing.assert_array_equal(truth.x, x2)
    assert spec2.gamma0 == tuple(spec.gamma0)
    assert spec2.n == spec.n

    spec_ln = LognormalScenario(q=2, p=1, n=8, m=3, seed=2)
    truth_ln = generate_lognormal(spec_ln)
    buf = io.StringIO()
    truth_ln.write_sidecar(buf)
    buf.seek(0)
    spec3, x3 = read_sidecar(buf)
    assert isinstance(spec3, LognormalScenario)
    np.testing.assert_array_equal(truth_ln.x, x3)


def test_generate_dispatch_and_errors():
    with pytest.raises(SimulationError):
        generate("not a scenario")
    with pytest.raises(SimulationError):
        LognormalScenario(q=2, p=1, n=5, m=3, seed=0, mu_tr=(1.0, 2.0))
