"""Gaussian prior on the top-level parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

# fiducial point and 1-sigma widths of the benchmark prior (~3% precision)
BENCHMARK_OMEGA0 = (0.5768, 0.1963, 0.1968, 0.0484)
BENCHMARK_STD = (0.0173, 0.0059, 0.0059, 0.0015)
GROUND_TRUTH = (0.55, 0.2, 0.2, 0.05)


@dataclass
class ParamPrior:
    """Independent Gaussian prior ``N(mean, diag(variances))``.

    With ``positive=True`` draws with any negative component are redrawn
    (rates outside the solver's domain).
    """

    mean: np.ndarray
    variances: np.ndarray
    positive: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        if self.mean.shape != self.variances.shape:
            raise DimensionError("prior mean and variances differ in length")
        if np.any(self.variances <= 0):
            raise ValueError("prior variances must be positive")

    @classmethod
    def from_std(cls, mean, std, positive: bool = True) -> "ParamPrior":
        return cls(mean, np.asarray(std, dtype=float) ** 2, positive)

    @classmethod
    def benchmark(cls) -> "ParamPrior":
        return cls.from_std(BENCHMARK_OMEGA0, BENCHMARK_STD)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variances)

    @property
    def covariance(self) -> np.ndarray:
        return np.diag(self.variances)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = self.mean + self.std * rng.standard_normal((n, self.dim))
        if self.positive:
            bad = np.any(out < 0, axis=1)
            while np.any(bad):
                out[bad] = self.mean + self.std * rng.standard_normal((int(bad.sum()), self.dim))
                bad = np.any(out < 0, axis=1)
        return out
