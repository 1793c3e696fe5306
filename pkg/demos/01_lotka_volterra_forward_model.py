"""Forward model tour: parameters -> trajectories -> censored noisy data.

Run with ``python demos/01_lotka_volterra_forward_model.py``.
"""

import numpy as np

from selfisbi import GROUND_TRUTH, LotkaVolterraBHM, ObserverConfig, ParamPrior, stream

cfg = ObserverConfig()
print(f"{cfg.n_steps} steps of dt = {cfg.dt}, S = {cfg.S} latent values, P = {cfg.P} observed")

# The deterministic layer: an explicit Euler solve of the predator-prey system.
model_A = LotkaVolterraBHM(cfg, "A")
theta_gt = model_A.latent(GROUND_TRUTH)
x, y = theta_gt[: cfg.n_steps], theta_gt[cfg.n_steps :]
print("prey     ", np.round(x[::5], 2))
print("predators", np.round(y[::5], 2))

# Prior-predictive spread of the trajectories.
prior = ParamPrior.benchmark()
draws = model_A.latent_batch(prior.sample(stream(0, "demo-prior"), 300))
print("prior-predictive prey std at every 10th step", np.round(draws[:, : cfg.n_steps : 10].std(0), 3))

# The stochastic layer. Model A perturbs, delays, adds two kinds of noise and
# clips at the detection thresholds; model B sees the populations directly.
phi_A = model_A.simulate(theta_gt, stream(0, "demo-A"))
phi_B = LotkaVolterraBHM(cfg, "B").simulate(theta_gt, stream(0, "demo-B"))
keep = cfg.keep
print(f"model A: {np.mean(phi_A[: int(cfg.mask_x.sum())] >= cfg.M_x):.0%} of prey entries hit M_x = {cfg.M_x}")
print("mean |A - truth| =", round(float(np.abs(phi_A - theta_gt[keep]).mean()), 3))
print("mean |B - truth| =", round(float(np.abs(phi_B - theta_gt[keep]).mean()), 3))
