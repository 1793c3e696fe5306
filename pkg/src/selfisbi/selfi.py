"""Latent-function inference by simulator expansion, and the misspecification check.

The expected data are linearised around an expansion point ``theta0``::

    E[Phi | theta] ~= f0 + grad_f0 (theta - theta0)

with a Gaussian effective likelihood of covariance ``C0``. All three pieces are
estimated from ``N0`` simulations at ``theta0`` and ``Ns`` simulations along
each of the ``S`` coordinate directions. With a Gaussian prior centred on
``theta0`` the posterior is Gaussian and available in closed form.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.covariance import ledoit_wolf

from .errors import (
    DimensionError,
    EnsembleFailure,
    IncompatibleDataError,
    InsufficientDataError,
    SingularMatrixError,
)
from .lotka_volterra import DataVector
from .priors import ParamPrior
from .seeding import stream

C0_JITTER = 1e-6
PRIOR_JITTER = 1e-4
JITTER_FLOOR = 1e-12


class CountingSimulator:
    """Thread-safe call counter around a ``simulate(theta, rng)`` callable."""

    def __init__(self, simulate):
        self._simulate = simulate
        self._lock = threading.Lock()
        self.calls = 0

    def __call__(self, theta, rng):
        with self._lock:
            self.calls += 1
        return self._simulate(theta, rng)


def selfi_fd_steps(theta0) -> np.ndarray:
    """Forward-difference steps ``0.05 * max(|theta0_i|, 1)``."""
    return 0.05 * np.maximum(np.abs(np.asarray(theta0, dtype=float)), 1.0)


@dataclass
class SimulationArchive:
    """Raw ensemble output.

    ``phi0`` has shape ``(N0, P)``; ``phi_dirs[i]`` has shape ``(Ns, P)`` and
    holds the runs at ``theta0 + steps[i] e_i`` (``None`` if that group is
    missing).
    """

    theta0: np.ndarray
    steps: np.ndarray
    phi0: np.ndarray
    phi_dirs: list
    seed_root: int = 0
    tag: str = "selfi"
    common_random_numbers: bool = False

    @property
    def N0(self) -> int:
        return self.phi0.shape[0]

    @property
    def Ns(self) -> int:
        sizes = {d.shape[0] for d in self.phi_dirs if d is not None}
        return sizes.pop() if len(sizes) == 1 else 0

    @property
    def n_simulations(self) -> int:
        return self.N0 + sum(d.shape[0] for d in self.phi_dirs if d is not None)

    def stacked_dirs(self) -> np.ndarray:
        return np.stack(self.phi_dirs)


def _run_group(simulator, theta, n, seed_root, tag, group, crn):
    runs, failures = [], []
    for k in range(n):
        rng = stream(seed_root, tag, k) if crn else stream(seed_root, tag, group, k)
        try:
            phi = np.asarray(simulator(theta, rng), dtype=float)
            if not np.all(np.isfinite(phi)):
                raise FloatingPointError("non-finite data vector")
        except (ArithmeticError, ValueError) as exc:
            failures.append((group, k, exc))
            continue
        runs.append(phi)
    return runs, failures


def run_expansion_ensembles(
    theta0,
    simulator,
    N0: int,
    Ns: int,
    h=None,
    seed_root: int = 0,
    tag: str = "selfi",
    threads: int = 1,
    common_random_numbers: bool = True,
) -> SimulationArchive:
    """Run ``N0`` simulations at ``theta0`` and ``Ns`` per coordinate direction.

    ``simulator(theta, rng)`` must return a length-P array. Run ``k`` of group
    ``g`` (``g = 0`` is the expansion point, ``g = i + 1`` direction ``i``)
    draws from ``stream(seed_root, tag, k)`` with common random numbers, or
    from ``stream(seed_root, tag, g, k)`` without. Either way the archive does
    not depend on ``threads``. Any failed run aborts the whole ensemble.

    With common random numbers, run ``k`` in every direction replays the noise
    of run ``k`` at the expansion point, which removes most Monte-Carlo noise
    from the paired finite differences (see ``estimate_grad_f0``).
    """
    theta0 = np.asarray(theta0, dtype=float)
    if N0 < 2 or Ns < 2:
        raise ValueError("N0 and Ns must both be >= 2")
    S = theta0.size
    steps = selfi_fd_steps(theta0) if h is None else np.broadcast_to(
        np.asarray(h, dtype=float), (S,)
    ).copy()
    if not np.all(steps > 0):
        raise ValueError("finite-difference steps must be strictly positive")

    jobs = [(theta0, N0, 0)]
    for i in range(S):
        theta = theta0.copy()
        theta[i] += steps[i]
        jobs.append((theta, Ns, i + 1))

    def work(job):
        theta, n, group = job
        return _run_group(simulator, theta, n, seed_root, tag, group, common_random_numbers)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    failures = [f for _, fs in results for f in fs]
    if failures:
        raise EnsembleFailure(failures)
    phi0 = np.array(results[0][0])
    phi_dirs = [np.array(runs) for runs, _ in results[1:]]
    return SimulationArchive(theta0, steps, phi0, phi_dirs, seed_root, tag, common_random_numbers)


def covariance_jitter(C_raw, rel: float) -> float:
    """Diagonal loading ``rel * trace / dim``, floored so the result stays PD."""
    C_raw = np.atleast_2d(C_raw)
    return max(rel * float(np.trace(C_raw)) / C_raw.shape[0], JITTER_FLOOR)


def estimate_f0_C0(archive: SimulationArchive, jitter: float = C0_JITTER, method: str = "ledoit-wolf"):
    """Sample mean and regularised covariance of the runs at the expansion point.

    ``method="sample"`` is the unbiased sample covariance (divisor ``N0 - 1``).
    ``"ledoit-wolf"`` shrinks it towards a scaled identity with the
    Ledoit-Wolf optimal intensity, rescaled to the same ``N0 - 1`` footing;
    with ``N0`` close to ``P`` the raw sample covariance makes ``C0^-1`` far
    too confident. Both add ``jitter * trace / P`` on the diagonal.
    """
    phi0 = np.asarray(archive.phi0, dtype=float)
    if phi0.ndim != 2 or phi0.shape[0] < 2:
        raise InsufficientDataError("at least two simulations at the expansion point are needed")
    n = phi0.shape[0]
    f0 = phi0.mean(axis=0)
    if method == "sample":
        resid = phi0 - f0
        C_raw = resid.T @ resid / (n - 1)
    elif method == "ledoit-wolf":
        C_raw = ledoit_wolf(phi0)[0] * (n / (n - 1))
    else:
        raise ValueError(f"unknown covariance method {method!r}")
    C_raw = 0.5 * (C_raw + C_raw.T)
    C0 = C_raw + covariance_jitter(C_raw, jitter) * np.eye(C_raw.shape[0])
    return f0, C0


def estimate_grad_f0(archive: SimulationArchive, f0, h=None, reference: str = "paired") -> np.ndarray:
    """First-order forward differences; column ``i`` is ``(mean_i - ref) / h_i``.

    With ``reference="f0"`` the baseline is ``f0`` itself. With ``"paired"``
    it is the mean of the first ``Ns`` expansion-point runs, i.e. the runs
    that share their random streams with each direction under common random
    numbers. The two coincide when ``Ns == N0``.
    """
    f0 = np.asarray(f0, dtype=float)
    steps = archive.steps if h is None else np.broadcast_to(h, (len(archive.phi_dirs),))
    grad = np.empty((f0.size, len(archive.phi_dirs)))
    for i, runs in enumerate(archive.phi_dirs):
        if runs is None or len(runs) == 0:
            raise InsufficientDataError(f"no simulations for direction {i}")
        if reference == "f0":
            base = f0
        elif reference == "paired":
            if len(runs) > archive.N0:
                raise InsufficientDataError(
                    f"direction {i} has {len(runs)} runs but only {archive.N0} are paired"
                )
            base = np.mean(archive.phi0[: len(runs)], axis=0)
        else:
            raise ValueError(f"unknown gradient reference {reference!r}")
        grad[:, i] = (np.mean(runs, axis=0) - base) / steps[i]
    return grad


@dataclass
class ExpansionArtifacts:
    """Everything the linearised likelihood needs, reusable for compression.

    ``layout`` is the concatenated keep-mask of the data vector (``None`` for
    models without masking); it guards against mixing data layouts.
    """

    theta0: np.ndarray
    f0: np.ndarray
    C0: np.ndarray
    grad_f0: np.ndarray
    steps: np.ndarray
    N0: int
    Ns: int
    seed_root: int = 0
    layout: np.ndarray | None = None

    def __post_init__(self):
        P, S = self.grad_f0.shape
        if self.theta0.shape != (S,) or self.f0.shape != (P,) or self.C0.shape != (P, P):
            raise DimensionError("expansion artifacts have inconsistent shapes")
        if not np.all(np.isfinite(self.grad_f0)):
            raise ValueError("grad_f0 has non-finite entries")

    @property
    def S(self) -> int:
        return self.theta0.size

    @property
    def P(self) -> int:
        return self.f0.size


def expansion_artifacts(
    archive: SimulationArchive,
    jitter: float = C0_JITTER,
    layout=None,
    covariance: str = "ledoit-wolf",
    gradient_reference: str = "paired",
):
    f0, C0 = estimate_f0_C0(archive, jitter, covariance)
    grad = estimate_grad_f0(archive, f0, reference=gradient_reference)
    return ExpansionArtifacts(
        theta0=np.asarray(archive.theta0, dtype=float),
        f0=f0,
        C0=C0,
        grad_f0=grad,
        steps=np.asarray(archive.steps),
        N0=archive.N0,
        Ns=archive.Ns,
        seed_root=archive.seed_root,
        layout=None if layout is None else np.asarray(layout),
    )


def cho_factor_checked(M, what: str):
    """Cholesky factor of ``M``; raises SingularMatrixError with the smallest eigenvalue."""
    try:
        return linalg.cho_factor(M, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularMatrixError(what, np.linalg.eigvalsh(0.5 * (M + M.T)).min()) from None


@dataclass
class LatentPrior:
    mean: np.ndarray
    prior_cov: np.ndarray
    lambda_S: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        S = self.mean.size
        if self.prior_cov.shape != (S, S):
            raise DimensionError("prior covariance does not match the latent dimension")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.prior_cov))


def build_latent_prior(
    prior_omega: ParamPrior,
    latent_map_batch,
    theta0,
    n_draws: int = 300,
    lambda_S: float | None = None,
    seed: int = 0,
    tag: str = "latent-prior",
) -> LatentPrior:
    """Gaussian latent prior from prior-predictive trajectories.

    The covariance is the sample covariance of ``T(omega_n)``, ``omega_n ~
    P(omega)``, plus ``lambda_S I``; by default ``lambda_S = 1e-4 trace / S``.
    The mean is pinned to the expansion point ``theta0``.
    """
    if n_draws < 2:
        raise InsufficientDataError("need at least two prior draws")
    omegas = prior_omega.sample(stream(seed, tag), n_draws)
    thetas = np.asarray(latent_map_batch(omegas), dtype=float)
    resid = thetas - thetas.mean(axis=0)
    C_raw = resid.T @ resid / (n_draws - 1)
    C_raw = 0.5 * (C_raw + C_raw.T)
    if lambda_S is None:
        lambda_S = covariance_jitter(C_raw, PRIOR_JITTER)
    elif not lambda_S > 0:
        raise ValueError("lambda_S must be positive")
    return LatentPrior(np.asarray(theta0, dtype=float), C_raw + lambda_S * np.eye(C_raw.shape[0]), lambda_S)


@dataclass
class SelfiPosterior:
    gamma: np.ndarray
    Gamma: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.Gamma))


def _data_values(phi, layout):
    if isinstance(phi, DataVector):
        if layout is not None and not np.array_equal(
            np.concatenate([phi.mask_x, phi.mask_y]), layout
        ):
            raise IncompatibleDataError("data vector mask differs from the one used for f0/C0")
        return phi.values
    return np.asarray(phi, dtype=float)


def selfi_posterior(artifacts: ExpansionArtifacts, prior: LatentPrior, phi_obs) -> SelfiPosterior:
    """Closed-form Gaussian posterior on the latent function.

    ``Gamma = (G^T C0^-1 G + S^-1)^-1`` and
    ``gamma = theta0 + Gamma G^T C0^-1 (phi_obs - f0)``; the mean is obtained
    by a solve against the posterior precision factor, not via ``Gamma``.
    """
    phi = _data_values(phi_obs, artifacts.layout)
    G = artifacts.grad_f0
    if phi.shape != artifacts.f0.shape:
        raise DimensionError(f"data vector has {phi.size} entries, expected {artifacts.P}")
    if prior.prior_cov.shape != (artifacts.S, artifacts.S):
        raise DimensionError("prior covariance does not match grad_f0")
    c_fac = cho_factor_checked(artifacts.C0, "C0")
    s_fac = cho_factor_checked(prior.prior_cov, "prior covariance")
    CinvG = linalg.cho_solve(c_fac, G)
    precision = G.T @ CinvG + linalg.cho_solve(s_fac, np.eye(artifacts.S))
    precision = 0.5 * (precision + precision.T)
    p_fac = cho_factor_checked(precision, "posterior precision")
    Gamma = linalg.cho_solve(p_fac, np.eye(artifacts.S))
    Gamma = 0.5 * (Gamma + Gamma.T)
    gamma = artifacts.theta0 + linalg.cho_solve(p_fac, CinvG.T @ (phi - artifacts.f0))
    return SelfiPosterior(gamma, Gamma)


def mahalanobis(theta, theta0, prior_cov):
    """Distance ``sqrt((theta - theta0)^T S^-1 (theta - theta0))``.

    ``theta`` may be a single vector or a stack of shape ``(n, S)``.
    """
    theta = np.asarray(theta, dtype=float)
    d = theta - np.asarray(theta0, dtype=float)
    L, _ = cho_factor_checked(np.asarray(prior_cov, dtype=float), "prior covariance")
    z = linalg.solve_triangular(L, d.T, lower=True)
    return np.sqrt(np.sum(z * z, axis=0))


@dataclass
class MisspecReport:
    d_M_posterior: float
    reference: np.ndarray = field(repr=False)
    reference_mean: float
    reference_sem: float
    quantile: float
    threshold: float
    verdict: str
    threshold_level: float = 0.95

    def as_dict(self) -> dict:
        return {
            "d_M_posterior": self.d_M_posterior,
            "reference_mean": self.reference_mean,
            "reference_sem": self.reference_sem,
            "reference_size": int(self.reference.size),
            "quantile": self.quantile,
            "threshold": self.threshold,
            "threshold_level": self.threshold_level,
            "verdict": self.verdict,
        }


def quantile_of(value: float, reference) -> float:
    """Fraction of the reference strictly below ``value``."""
    return float(np.mean(np.asarray(reference) < value))


def misspec_report(
    gamma,
    theta0,
    prior_cov,
    prior_omega: ParamPrior,
    latent_map_batch,
    n_ref: int = 300,
    seed: int = 0,
    level: float = 0.95,
    tag: str = "misspec-reference",
) -> MisspecReport:
    """Compare ``d_M(gamma, theta0)`` with distances of prior-predictive trajectories.

    The verdict is ``"suspect"`` when the posterior-mean distance exceeds the
    ``level`` quantile of the reference distances, ``"consistent"`` otherwise.
    """
    if n_ref < 100:
        raise ValueError("n_ref must be at least 100")
    omegas = prior_omega.sample(stream(seed, tag), n_ref)
    reference = mahalanobis(latent_map_batch(omegas), theta0, prior_cov)
    d = float(mahalanobis(gamma, theta0, prior_cov))
    threshold = float(np.quantile(reference, level))
    return MisspecReport(
        d_M_posterior=d,
        reference=reference,
        reference_mean=float(reference.mean()),
        reference_sem=float(reference.std(ddof=1) / np.sqrt(n_ref)),
        quantile=quantile_of(d, reference),
        threshold=threshold,
        verdict="suspect" if d > threshold else "consistent",
        threshold_level=level,
    )
