"""On a linear-Gaussian model every ingredient is known exactly, so the
estimated posterior can be compared with the textbook answer.
"""

import numpy as np

from selfisbi import (
    ExpansionArtifacts,
    LatentPrior,
    LinearGaussianBHM,
    expansion_artifacts,
    run_expansion_ensembles,
    selfi_posterior,
    stream,
)

bhm = LinearGaussianBHM.random(S=20, P=20, seed=0)
prior = LatentPrior(bhm.theta0, 2.0 * np.eye(bhm.S))
phi = bhm.simulate(bhm.theta0 + 0.5, stream(0, "obs"))

exact = ExpansionArtifacts(bhm.theta0, bhm.mean_data(bhm.theta0), bhm.Sigma, bhm.A, np.ones(bhm.S), 0, 0)
ref = selfi_posterior(exact, prior, phi)

for n in (50, 500, 5000):
    arc = run_expansion_ensembles(bhm.theta0, bhm.simulate, n, n, 0.5, seed_root=1)
    for cov in ("sample", "ledoit-wolf"):
        est = selfi_posterior(expansion_artifacts(arc, covariance=cov), prior, phi)
        print(f"N0 = Ns = {n:5d}  {cov:<11}  max|gamma err| = {np.abs(est.gamma - ref.gamma).max():.4f}"
              f"  max|std ratio - 1| = {np.abs(est.std / ref.std - 1).max():.3f}")
