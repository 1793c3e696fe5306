"""Lotka-Volterra hierarchical model: deterministic solver and stochastic observers.

The latent vector ``theta`` is the concatenation ``[x(t_0..t_{n-1}), y(t_0..t_{n-1})]``
of prey and predator populations. Two observers map it to data:

* model A: delayed, perturbed and seasonally modulated signal, demographic plus
  correlated observational noise, thresholding and masking;
* model B: direct observation with demographic noise only, masking but no
  thresholding.

Every public function works on a single latent vector; the ``*_batch`` helpers
work on a stack of shape ``(n, S)`` and are what the ensemble runners call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DimensionError, SolverDivergenceError

N_PARAMS = 4
PARAM_NAMES = ("alpha", "beta", "gamma", "delta")


@dataclass(frozen=True)
class ParamVector:
    """Top-level rates ``(alpha, beta, gamma, delta)`` at unit timestep."""

    alpha: float
    beta: float
    gamma: float
    delta: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")

    @classmethod
    def from_array(cls, values) -> "ParamVector":
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (N_PARAMS,):
            raise DimensionError(f"expected {N_PARAMS} parameters, got shape {values.shape}")
        return cls(*map(float, values))

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.delta])

    def __array__(self, dtype=None, copy=None):
        return self.as_array().astype(dtype or float)


@dataclass(frozen=True)
class LatentVector:
    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size % 2:
            raise DimensionError(f"latent vector must be 1-d of even length, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def n_steps(self) -> int:
        return self.values.size // 2

    @property
    def x(self) -> np.ndarray:
        return self.values[: self.n_steps]

    @property
    def y(self) -> np.ndarray:
        return self.values[self.n_steps :]

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values.astype(dtype or float)


def default_efficiency(n_steps: int, phase: float, period: float = 25.0) -> np.ndarray:
    """Seasonal detection efficiency ``0.8 + 0.2 sin(2 pi i / period + phase)``."""
    i = np.arange(n_steps)
    return 0.8 + 0.2 * np.sin(2.0 * np.pi * i / period + phase)


def default_mask(n_steps: int, masked: range) -> np.ndarray:
    mask = np.ones(n_steps, dtype=np.int8)
    mask[[i for i in masked if i < n_steps]] = 0
    return mask


@dataclass
class ObserverConfig:
    """Fixed, known settings of the solver and both observers.

    Array fields left as ``None`` are filled with the named defaults for
    ``n_steps``. ``r_B`` is the demographic noise strength assumed by model B.
    """

    n_steps: int = 50
    # at dt = 1 the benchmark rates give crash-and-recover dynamics that no
    # linear expansion survives; 0.45 keeps the cycle smooth over 50 steps
    dt: float = 0.45
    x0: float = 10.0
    y0: float = 5.0
    p: float = 0.05
    q: float = 0.01
    r: float = 0.15
    s_noise: float = 0.05
    t_noise: float = 0.2
    M_x: float = 12.0
    M_y: float = 7.0
    r_B: float = 0.105
    efficiency_x: np.ndarray | None = None
    efficiency_y: np.ndarray | None = None
    mask_x: np.ndarray | None = None
    mask_y: np.ndarray | None = None

    def __post_init__(self):
        n = self.n_steps
        if self.efficiency_x is None:
            self.efficiency_x = default_efficiency(n, 0.0)
        if self.efficiency_y is None:
            self.efficiency_y = default_efficiency(n, np.pi / 2)
        if self.mask_x is None:
            self.mask_x = default_mask(n, range(20, 25))
        if self.mask_y is None:
            self.mask_y = default_mask(n, range(35, 40))
        self.efficiency_x = np.asarray(self.efficiency_x, dtype=float)
        self.efficiency_y = np.asarray(self.efficiency_y, dtype=float)
        self.mask_x = np.asarray(self.mask_x).astype(np.int8)
        self.mask_y = np.asarray(self.mask_y).astype(np.int8)
        self.validate()

    def validate(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name in ("efficiency_x", "efficiency_y", "mask_x", "mask_y"):
            arr = getattr(self, name)
            if arr.shape != (self.n_steps,):
                raise DimensionError(f"{name} has shape {arr.shape}, expected ({self.n_steps},)")
        for arr in (self.efficiency_x, self.efficiency_y):
            if np.any((arr < 0) | (arr > 1)) or not np.all(np.isfinite(arr)):
                raise ValueError("efficiency entries must lie in [0, 1]")
        for arr in (self.mask_x, self.mask_y):
            if np.any((arr != 0) & (arr != 1)):
                raise ValueError("mask entries must be 0 or 1")
        if abs(self.t_noise) > 1:
            raise ValueError("|t_noise| must be <= 1 for a PSD observational covariance")
        if not (self.M_x > 0 and self.M_y > 0):
            raise ValueError("detection thresholds must be positive")
        if self.r < 0 or self.s_noise < 0 or self.r_B < 0:
            raise ValueError("noise strengths must be non-negative")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError("initial populations must be non-negative")

    @property
    def S(self) -> int:
        return 2 * self.n_steps

    @property
    def P(self) -> int:
        return int(self.mask_x.sum() + self.mask_y.sum())

    @property
    def keep(self) -> np.ndarray:
        """Boolean selector over the S concatenated entries that survive masking."""
        return np.concatenate([self.mask_x, self.mask_y]).astype(bool)

    def to_dict(self, compact: bool = False) -> dict:
        """Plain mapping; with ``compact`` arrays equal to the defaults become ``"default"``."""
        stock = ObserverConfig(n_steps=self.n_steps) if compact else None
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                same = stock is not None and np.array_equal(value, getattr(stock, f.name))
                out[f.name] = "default" if same else value.tolist()
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ObserverConfig":
        """Build from a mapping; array entries may be lists or the string ``"default"``."""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown observer settings: {sorted(unknown)}")
        kwargs = {k: (None if isinstance(v, str) and v == "default" else v) for k, v in data.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class DataVector:
    """Censored observations with the bookkeeping of where each entry came from.

    ``species[k]`` is 0 for prey and 1 for predators, ``step[k]`` the timestep.
    """

    values: np.ndarray
    mask_x: np.ndarray
    mask_y: np.ndarray
    species: np.ndarray = field(init=False)
    step: np.ndarray = field(init=False)

    def __post_init__(self):
        mask_x = np.asarray(self.mask_x).astype(np.int8)
        mask_y = np.asarray(self.mask_y).astype(np.int8)
        ix = np.flatnonzero(mask_x)
        iy = np.flatnonzero(mask_y)
        values = np.asarray(self.values, dtype=float)
        if values.shape != (ix.size + iy.size,):
            raise DimensionError(
                f"{values.size} values but masks keep {ix.size + iy.size} entries"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask_x", mask_x)
        object.__setattr__(self, "mask_y", mask_y)
        object.__setattr__(
            self, "species", np.concatenate([np.zeros(ix.size, int), np.ones(iy.size, int)])
        )
        object.__setattr__(self, "step", np.concatenate([ix, iy]))

    @property
    def P(self) -> int:
        return self.values.size

    def same_layout(self, other: "DataVector") -> bool:
        return np.array_equal(self.mask_x, other.mask_x) and np.array_equal(
            self.mask_y, other.mask_y
        )

    def __len__(self):
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values.astype(dtype or float)


# ---------------------------------------------------------------------------
# solver


def solve_lv_batch(omegas, x0: float, y0: float, dt: float, n_steps: int) -> np.ndarray:
    """Explicit Euler trajectories for a stack of parameter vectors.

    Returns an array of shape ``(n, 2 * n_steps)``. Populations are floored at
    zero after every step.
    """
    omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
    if omegas.shape[1] != N_PARAMS:
        raise DimensionError(f"omega must have {N_PARAMS} components, got {omegas.shape[1]}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if x0 < 0 or y0 < 0:
        raise ValueError("initial populations must be non-negative")
    if not np.all(np.isfinite(omegas)):
        raise ValueError("omega must be finite")
    alpha, beta, gamma, delta = omegas.T
    n = omegas.shape[0]
    x = np.empty((n, n_steps))
    y = np.empty((n, n_steps))
    x[:, 0] = x0
    y[:, 0] = y0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps - 1):
            xi, yi = x[:, i], y[:, i]
            # x + dt * x (alpha - beta y); identical to the bracketed form at dt = 1
            xn = xi + dt * xi * (alpha - beta * yi)
            yn = yi + dt * yi * (delta * xi - gamma)
            if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(yn))):
                bad = np.flatnonzero(~(np.isfinite(xn) & np.isfinite(yn)))[0]
                raise SolverDivergenceError(i + 1, omegas[bad])
            x[:, i + 1] = np.maximum(xn, 0.0)
            y[:, i + 1] = np.maximum(yn, 0.0)
    return np.concatenate([x, y], axis=1)


def solve_lv(omega, x0: float, y0: float, dt: float, n_steps: int) -> LatentVector:
    """Integrate the Lotka-Volterra equations with an explicit Euler scheme."""
    theta = solve_lv_batch(np.asarray(omega, dtype=float)[None, :], x0, y0, dt, n_steps)
    return LatentVector(theta[0], dt=dt)


def latent_map_T(omega, config: ObserverConfig) -> LatentVector:
    """Deterministic map from top-level parameters to the latent trajectories."""
    return solve_lv(omega, config.x0, config.y0, config.dt, config.n_steps)


# ---------------------------------------------------------------------------
# observers


def _split(thetas, config: ObserverConfig):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != config.S:
        raise DimensionError(f"latent vector has {thetas.shape[1]} entries, expected {config.S}")
    n = config.n_steps
    return thetas[:, :n], thetas[:, n:]


def observe_signal_batch(thetas, config: ObserverConfig):
    x, y = _split(thetas, config)
    x = np.maximum(x, 0.0)
    y = np.maximum(y, 0.0)
    s_x = np.empty_like(x)
    s_y = np.empty_like(y)
    s_x[:, 0] = config.x0
    s_y[:, 0] = config.y0
    xi, yi = x[:, :-1], y[:, :-1]
    s_x[:, 1:] = config.efficiency_x[:-1] * (xi - config.p * xi * yi + config.q * xi**2)
    s_y[:, 1:] = config.efficiency_y[:-1] * (yi + config.p * xi * yi - config.q * yi**2)
    return np.maximum(s_x, 0.0), np.maximum(s_y, 0.0)


def observe_signal(theta, config: ObserverConfig):
    """Delayed, perturbed and efficiency-modulated signal ``(s_x, s_y)``."""
    s_x, s_y = observe_signal_batch(np.asarray(theta, dtype=float)[None, :], config)
    return s_x[0], s_y[0]


def observational_covariance(x, y, s_noise: float, t_noise: float) -> np.ndarray:
    """Per-step 2x2 covariance ``s [[y, t sqrt(xy)], [t sqrt(xy), x]]``, shape ``(..., 2, 2)``."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    y = np.maximum(np.asarray(y, dtype=float), 0.0)
    off = t_noise * np.sqrt(x * y)
    cov = np.empty(x.shape + (2, 2))
    cov[..., 0, 0] = y
    cov[..., 0, 1] = off
    cov[..., 1, 0] = off
    cov[..., 1, 1] = x
    return s_noise * cov


def sample_noise_model_A_batch(thetas, config: ObserverConfig, rng: np.random.Generator):
    x, y = _split(thetas, config)
    x = np.maximum(x, 0.0)
    y = np.maximum(y, 0.0)
    if abs(config.t_noise) > 1:
        raise AssertionError("observational covariance is not PSD for |t_noise| > 1")
    z = rng.standard_normal((x.shape[0], 4, config.n_steps))
    n_D_x = np.sqrt(config.r * x) * z[:, 0]
    n_D_y = np.sqrt(config.r * y) * z[:, 1]
    # closed-form Cholesky factor of the 2x2 covariance; valid for y = 0 too
    s, t = config.s_noise, config.t_noise
    n_O_x = np.sqrt(s * y) * z[:, 2]
    n_O_y = t * np.sqrt(s * x) * z[:, 2] + np.sqrt(s * x * (1.0 - t * t)) * z[:, 3]
    return n_D_x, n_D_y, n_O_x, n_O_y


def sample_noise_model_A(theta, config: ObserverConfig, rng: np.random.Generator):
    """Draw demographic and observational noise for one latent vector.

    Returns ``(n_D_x, n_D_y, n_O_x, n_O_y)``, each of length ``n_steps``.
    """
    draws = sample_noise_model_A_batch(np.asarray(theta, dtype=float)[None, :], config, rng)
    return tuple(d[0] for d in draws)


def censor_batch(u_x, u_y, config: ObserverConfig, threshold: bool = True) -> np.ndarray:
    u_x = np.atleast_2d(u_x)
    u_y = np.atleast_2d(u_y)
    if u_x.shape[1] != config.n_steps or u_y.shape[1] != config.n_steps:
        raise DimensionError("signal arrays must have n_steps entries")
    if threshold:
        u_x = np.minimum(u_x, config.M_x)
        u_y = np.minimum(u_y, config.M_y)
    mx = config.mask_x.astype(bool)
    my = config.mask_y.astype(bool)
    return np.concatenate([u_x[:, mx], u_y[:, my]], axis=1)


def censor(u_x, u_y, config: ObserverConfig) -> DataVector:
    """Threshold at the detection maxima and drop masked timesteps."""
    values = censor_batch(np.asarray(u_x, float)[None], np.asarray(u_y, float)[None], config)
    return DataVector(values[0], config.mask_x, config.mask_y)


def model_A_batch(thetas, config: ObserverConfig, rng: np.random.Generator) -> np.ndarray:
    s_x, s_y = observe_signal_batch(thetas, config)
    n_D_x, n_D_y, n_O_x, n_O_y = sample_noise_model_A_batch(thetas, config, rng)
    return censor_batch(s_x + n_D_x + n_O_x, s_y + n_D_y + n_O_y, config)


def model_B_batch(thetas, config: ObserverConfig, rng: np.random.Generator) -> np.ndarray:
    x, y = _split(thetas, config)
    z = rng.standard_normal((x.shape[0], 2, config.n_steps))
    u_x = x + np.sqrt(config.r_B * np.maximum(x, 0.0)) * z[:, 0]
    u_y = y + np.sqrt(config.r_B * np.maximum(y, 0.0)) * z[:, 1]
    return censor_batch(u_x, u_y, config, threshold=False)


def simulate_model_A(theta, config: ObserverConfig, rng: np.random.Generator) -> DataVector:
    """Full observational process: signal, noise, thresholds, masks."""
    values = model_A_batch(np.asarray(theta, dtype=float)[None, :], config, rng)
    return DataVector(values[0], config.mask_x, config.mask_y)


def simulate_model_B(theta, config: ObserverConfig, rng: np.random.Generator) -> DataVector:
    """Simplified observer: direct view of the populations, demographic noise ``r_B`` only."""
    values = model_B_batch(np.asarray(theta, dtype=float)[None, :], config, rng)
    return DataVector(values[0], config.mask_x, config.mask_y)


class LotkaVolterraBHM:
    """Bundle of the latent map and one observer, as consumed by the inference engine.

    ``simulate(theta, rng)`` returns a bare length-P array; ``simulate_batch``
    does the same for a stack of latent vectors with one stream.
    """

    def __init__(self, config: ObserverConfig | None = None, model: str = "A"):
        if model not in ("A", "B"):
            raise ValueError(f"unknown observer model {model!r}")
        self.config = config or ObserverConfig()
        self.model = model
        self._batch = model_A_batch if model == "A" else model_B_batch

    @property
    def S(self) -> int:
        return self.config.S

    @property
    def P(self) -> int:
        return self.config.P

    @property
    def n_params(self) -> int:
        return N_PARAMS

    def latent(self, omega) -> np.ndarray:
        return latent_map_T(omega, self.config).values

    def latent_batch(self, omegas) -> np.ndarray:
        c = self.config
        return solve_lv_batch(omegas, c.x0, c.y0, c.dt, c.n_steps)

    def simulate(self, theta, rng: np.random.Generator) -> np.ndarray:
        return self._batch(np.asarray(theta, dtype=float)[None, :], self.config, rng)[0]

    def simulate_batch(self, thetas, rng: np.random.Generator) -> np.ndarray:
        return self._batch(thetas, self.config, rng)

    def data_vector(self, values) -> DataVector:
        return DataVector(values, self.config.mask_x, self.config.mask_y)
