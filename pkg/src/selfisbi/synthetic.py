"""Linear-Gaussian hierarchical model with exactly known SELFI ingredients.

``theta = theta0 + B (omega - omega0)`` and ``Phi = A theta + b + n`` with
``n ~ N(0, Sigma)``. The mean data model is exactly linear, so the
linearised likelihood is exact and every estimator has a closed-form target.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


class LinearGaussianBHM:
    def __init__(self, omega0, theta0, B, A, b, Sigma):
        self.omega0 = np.asarray(omega0, dtype=float)
        self.theta0 = np.asarray(theta0, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.Sigma = np.asarray(Sigma, dtype=float)
        P, S = self.A.shape
        if self.B.shape != (S, self.omega0.size) or self.theta0.shape != (S,):
            raise DimensionError("latent map dimensions are inconsistent")
        if self.b.shape != (P,) or self.Sigma.shape != (P, P):
            raise DimensionError("data model dimensions are inconsistent")
        self._chol = np.linalg.cholesky(self.Sigma)

    @classmethod
    def random(cls, S: int = 20, P: int = 20, N: int = 4, seed: int = 0, noise: float = 0.5):
        """A well-conditioned random instance; same seed, same model."""
        rng = np.random.default_rng(seed)
        omega0 = rng.uniform(0.5, 1.5, N)
        theta0 = rng.normal(0.0, 1.0, S)
        B = rng.normal(0.0, 1.0, (S, N))
        A = np.eye(P, S) + 0.3 * rng.normal(0.0, 1.0, (P, S)) / np.sqrt(S)
        b = rng.normal(0.0, 0.1, P)
        L = 0.2 * rng.normal(0.0, 1.0, (P, P)) / np.sqrt(P)
        Sigma = noise**2 * (np.eye(P) + L @ L.T)
        return cls(omega0, theta0, B, A, b, Sigma)

    @property
    def S(self) -> int:
        return self.A.shape[1]

    @property
    def P(self) -> int:
        return self.A.shape[0]

    @property
    def n_params(self) -> int:
        return self.omega0.size

    def latent(self, omega) -> np.ndarray:
        return self.theta0 + self.B @ (np.asarray(omega, dtype=float) - self.omega0)

    def latent_batch(self, omegas) -> np.ndarray:
        omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
        return self.theta0 + (omegas - self.omega0) @ self.B.T

    def mean_data(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float) @ self.A.T + self.b

    def simulate(self, theta, rng: np.random.Generator) -> np.ndarray:
        return self.simulate_batch(np.asarray(theta, dtype=float)[None, :], rng)[0]

    def simulate_batch(self, thetas, rng: np.random.Generator) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        z = rng.standard_normal((thetas.shape[0], self.P))
        return self.mean_data(thetas) + z @ self._chol.T

    def data_vector(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float)
