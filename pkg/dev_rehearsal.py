import time

import numpy as np

from dietdecon.model import scale_recalls
from dietdecon.sampler import (Hyperparameters, posterior_mean_marginal,
                               posterior_mean_prob_curve, run_chain)
from dietdecon.simulate import MainScenario, generate_main, truth_density, zero_recall_rates

spec = MainScenario(q=2, p=1, n=500, m=3, seed=4242)
truth = generate_main(spec)
print("zero rates:", zero_recall_rates(truth.dataset))
data = scale_recalls(truth.dataset)
print("scale factors:", data.scale_factors)

hp = Hyperparameters()
t0 = time.time()
draws = run_chain(data, hp, seed=99, progress=500)
print(f"chain: {(time.time()-t0)/60:.1f} min, {len(draws)} draws")
print("acceptance:", {k: round(v, 2) for k, v in draws.acceptance.items()})

c = data.scale_factors
bounds = [0.00915, 0.0353, 0.0023]
for comp in range(3):
    pts = truth.x[:, comp]
    p0 = truth_density(truth, ("marginal", comp), pts).values
    est_scaled = posterior_mean_marginal(draws, comp, np.clip(c[comp] * pts, 0, 10))
    est = c[comp] * est_scaled
    ise = float(np.mean((p0 - est) ** 2 / p0))
    print(f"comp {comp}: ISE={ise:.5f} bound={bounds[comp]} {'PASS' if ise <= bounds[comp] else 'FAIL'}")

from scipy.special import ndtr
from dietdecon.simulate import newlog
grid = np.linspace(0.5, 5.0, 40)
for comp in range(2):
    true_p = ndtr(spec.gamma0[comp] + spec.gamma1[comp] * newlog(grid))
    est_p = posterior_mean_prob_curve(draws, comp, np.clip(c[comp] * grid, 0, 10))
    err = np.max(np.abs(true_p - est_p))
    print(f"P curve comp {comp}: sup err={err:.3f} {'PASS' if err <= 0.15 else 'FAIL'}")
