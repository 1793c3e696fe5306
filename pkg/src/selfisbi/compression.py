"""Score compression, Fisher-Rao distance and likelihood-free rejection sampling.

Compression maps a data vector to a quasi maximum-likelihood estimate of the
top-level parameters::

    omega_tilde = omega0 + F0^-1 (grad_omega f0)^T C0^-1 (Phi - f0)

with ``grad_omega f0 = grad_f0 . grad_T0`` and ``F0 = (grad_omega f0)^T C0^-1
grad_omega f0``. ``C0`` and ``grad_f0`` come straight from the SELFI
ensembles; only the cheap latent map is differentiated here.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    BudgetExhausted,
    DimensionError,
    IncompatibleDataError,
    InsufficientDataError,
    SingularMatrixError,
    SolverDivergenceError,
)
from .lotka_volterra import PARAM_NAMES, DataVector
from .priors import ParamPrior
from .seeding import stream
from .selfi import ExpansionArtifacts, cho_factor_checked

# 7-point sixth-order central stencil, offsets -3..3
STENCIL6 = np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60])
STENCIL_OFFSETS = np.arange(-3, 4)


def latent_fd_steps(omega0) -> np.ndarray:
    return 1e-3 * np.maximum(np.abs(np.asarray(omega0, dtype=float)), 1e-3)


def grad_T(latent_map, omega0, fd_step=None) -> np.ndarray:
    """Jacobian of the latent map at ``omega0`` by sixth-order central differences.

    Returns an ``(S, N)`` matrix. Only ``latent_map`` is evaluated (6 calls per
    parameter); the stochastic simulator is never touched.
    """
    omega0 = np.asarray(omega0, dtype=float)
    N = omega0.size
    steps = latent_fd_steps(omega0) if fd_step is None else np.broadcast_to(
        np.asarray(fd_step, dtype=float), (N,)
    )
    if not np.all(steps > 0):
        raise ValueError("fd_step must be strictly positive")
    columns = []
    for j in range(N):
        acc = 0.0
        for k, c in zip(STENCIL_OFFSETS, STENCIL6):
            if c == 0.0:
                continue
            omega = omega0.copy()
            omega[j] += k * steps[j]
            try:
                theta = np.asarray(latent_map(omega), dtype=float)
            except SolverDivergenceError as exc:
                raise SolverDivergenceError(
                    exc.step, omega, f"stencil component {j}, offset {k:+d}"
                ) from exc
            acc = acc + c * theta
        columns.append(acc / steps[j])
    return np.stack(columns, axis=1)


def grad_f_omega(grad_f0, grad_T0) -> np.ndarray:
    """Chain rule ``grad_f0 @ grad_T0``: ``(P, S) x (S, N) -> (P, N)``."""
    grad_f0 = np.asarray(grad_f0, dtype=float)
    grad_T0 = np.asarray(grad_T0, dtype=float)
    if grad_f0.ndim != 2 or grad_T0.ndim != 2 or grad_f0.shape[1] != grad_T0.shape[0]:
        raise DimensionError(f"cannot chain {grad_f0.shape} with {grad_T0.shape}")
    return grad_f0 @ grad_T0


def fisher_matrix(grad_f_om, C0, rtol: float = 1e-12):
    """Fisher matrix ``G^T C0^-1 G`` and its inverse.

    Raises SingularMatrixError when the parameters are not identifiable, i.e.
    when the smallest eigenvalue is not positive relative to the largest.
    """
    G = np.asarray(grad_f_om, dtype=float)
    c_fac = cho_factor_checked(np.asarray(C0, dtype=float), "C0")
    F = G.T @ linalg.cho_solve(c_fac, G)
    F = 0.5 * (F + F.T)
    eig = np.linalg.eigvalsh(F)
    if eig[0] <= rtol * max(abs(eig[-1]), np.finfo(float).tiny):
        raise SingularMatrixError("Fisher matrix", eig[0])
    F_inv = linalg.cho_solve(cho_factor_checked(F, "Fisher matrix"), np.eye(F.shape[0]))
    return F, 0.5 * (F_inv + F_inv.T)


@dataclass
class CompressionArtifacts:
    omega0: np.ndarray
    grad_T0: np.ndarray
    grad_f_omega: np.ndarray
    fisher: np.ndarray
    fisher_inverse: np.ndarray
    layout: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.omega0.size


def build_compression_artifacts(
    expansion: ExpansionArtifacts, latent_map, omega0, fd_step=None
) -> CompressionArtifacts:
    """Recycle the SELFI products; evaluates only the deterministic latent map."""
    omega0 = np.asarray(omega0, dtype=float)
    gT = grad_T(latent_map, omega0, fd_step)
    if gT.shape[0] != expansion.S:
        raise DimensionError("latent map output does not match the expansion point")
    gw = grad_f_omega(expansion.grad_f0, gT)
    F, F_inv = fisher_matrix(gw, expansion.C0)
    return CompressionArtifacts(omega0, gT, gw, F, F_inv, expansion.layout)


def _values(phi, layout):
    if isinstance(phi, DataVector):
        if layout is not None and not np.array_equal(
            np.concatenate([phi.mask_x, phi.mask_y]), layout
        ):
            raise IncompatibleDataError("data vector mask differs from the compression layout")
        return phi.values
    return np.asarray(phi, dtype=float)


class Compressor:
    """Precomputed affine map ``Phi -> omega0 + W (Phi - f0)``.

    Works on one data vector or a stack of shape ``(n, P)``.
    """

    def __init__(self, artifacts: CompressionArtifacts, f0, C0):
        self.artifacts = artifacts
        self.f0 = np.asarray(f0, dtype=float)
        G = artifacts.grad_f_omega
        if G.shape[0] != self.f0.size:
            raise DimensionError("f0 does not match grad_f_omega")
        CinvG = linalg.cho_solve(cho_factor_checked(np.asarray(C0, dtype=float), "C0"), G)
        # W = F^-1 G^T C0^-1, shape (N, P)
        self.W = artifacts.fisher_inverse @ CinvG.T

    def __call__(self, phi) -> np.ndarray:
        values = _values(phi, self.artifacts.layout)
        if values.shape[-1] != self.f0.size:
            raise IncompatibleDataError(
                f"data vector has {values.shape[-1]} entries, compression expects {self.f0.size}"
            )
        return self.artifacts.omega0 + (values - self.f0) @ self.W.T


def compress(phi, artifacts: CompressionArtifacts, f0, C0) -> np.ndarray:
    """Quasi maximum-likelihood summary of ``phi`` (length N)."""
    return Compressor(artifacts, f0, C0)(phi)


def fisher_rao_distance(a, b, F0):
    """``sqrt((a - b)^T F0 (a - b))``; broadcasts over leading axes."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    q = np.einsum("...i,ij,...j->...", d, np.asarray(F0, dtype=float), d)
    return np.sqrt(np.maximum(q, 0.0))


class SummarySimulator:
    """Full forward chain ``omega -> T -> observer -> compress`` on a batch of draws.

    Draws whose latent solve diverges get NaN summaries (never accepted).
    """

    def __init__(self, bhm, compressor: Compressor):
        self.bhm = bhm
        self.compressor = compressor
        self.calls = 0

    def __call__(self, omegas, rng: np.random.Generator) -> np.ndarray:
        omegas = np.atleast_2d(omegas)
        self.calls += omegas.shape[0]
        try:
            thetas = self.bhm.latent_batch(omegas)
        except SolverDivergenceError:
            out = np.full(omegas.shape, np.nan)
            for n, omega in enumerate(omegas):
                try:
                    theta = self.bhm.latent_batch(omega[None])
                except SolverDivergenceError:
                    continue
                out[n] = self.compressor(self.bhm.simulate_batch(theta, rng))[0]
            return out
        return self.compressor(self.bhm.simulate_batch(thetas, rng))


@dataclass
class RejectionResult:
    """All evaluated draws in index order plus the accepted subset.

    ``accepted`` flags at most ``target`` draws: the first ones, by index,
    that fell inside the tolerance.
    """

    omegas: np.ndarray
    summaries: np.ndarray
    distances: np.ndarray
    accepted: np.ndarray
    epsilon: float
    target: int
    names: tuple = field(default=PARAM_NAMES)

    @property
    def n_draws(self) -> int:
        return self.omegas.shape[0]

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.sum())

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_draws if self.n_draws else 0.0

    @property
    def samples(self) -> np.ndarray:
        return self.omegas[self.accepted]

    def stats(self) -> dict:
        return {
            "n_draws": self.n_draws,
            "n_accepted": self.n_accepted,
            "acceptance_rate": self.acceptance_rate,
            "epsilon": self.epsilon,
            "target": self.target,
        }

    def csv_text(self, accepted_only: bool = False) -> str:
        """Rows ``alpha,beta,gamma,delta,d_FR,accepted`` with repr-exact floats."""
        rows = np.flatnonzero(self.accepted) if accepted_only else range(self.n_draws)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*self.names, "d_FR", "accepted"])
        for n in rows:
            writer.writerow(
                [repr(float(v)) for v in self.omegas[n]]
                + [repr(float(self.distances[n])), int(self.accepted[n])]
            )
        return buf.getvalue()

    def write_csv(self, path, accepted_only: bool = False):
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text(accepted_only))


def rejection_sample(
    prior: ParamPrior,
    simulate_summaries,
    omega_tilde_obs,
    F0,
    epsilon: float = 2.0,
    n_accept_target: int = 2000,
    max_draws: int = 1_000_000,
    seed: int = 0,
    block_size: int = 1000,
    wave_blocks: int = 8,
    threads: int = 1,
    tag: str = "abc",
    names=PARAM_NAMES,
) -> RejectionResult:
    """Likelihood-free rejection sampling with the Fisher-Rao distance.

    Draws are processed in fixed blocks; block ``b`` draws its parameters and
    simulator noise from ``stream(seed, tag, b)``. Blocks are evaluated in
    waves of ``wave_blocks`` (concurrently when ``threads > 1``) and sampling
    stops after the first wave that reaches the target, so the result does
    not depend on the thread count. Raises BudgetExhausted, carrying the
    partial result, if ``max_draws`` is reached first.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if n_accept_target < 1 or max_draws < 1 or block_size < 1:
        raise ValueError("targets and budgets must be positive")
    obs = np.asarray(omega_tilde_obs, dtype=float)
    F0 = np.asarray(F0, dtype=float)
    n_blocks = -(-max_draws // block_size)

    def run_block(b):
        size = min(block_size, max_draws - b * block_size)
        rng = stream(seed, tag, b)
        omegas = prior.sample(rng, size)
        summaries = np.asarray(simulate_summaries(omegas, rng), dtype=float)
        d = fisher_rao_distance(summaries, obs, F0)
        d = np.where(np.isfinite(d), d, np.inf)
        return omegas, summaries, d

    parts = []
    n_hit = 0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for start in range(0, n_blocks, wave_blocks):
            wave = range(start, min(start + wave_blocks, n_blocks))
            results = list(pool.map(run_block, wave)) if pool else [run_block(b) for b in wave]
            parts.extend(results)
            n_hit += sum(int(np.sum(d < epsilon)) for _, _, d in results)
            if n_hit >= n_accept_target:
                break
    finally:
        if pool:
            pool.shutdown()

    omegas = np.concatenate([p[0] for p in parts])
    summaries = np.concatenate([p[1] for p in parts])
    distances = np.concatenate([p[2] for p in parts])
    hit = distances < epsilon
    accepted = hit & (np.cumsum(hit) <= n_accept_target)
    result = RejectionResult(omegas, summaries, distances, accepted, float(epsilon),
                             n_accept_target, tuple(names))
    if result.n_accepted < n_accept_target:
        raise BudgetExhausted(result, n_accept_target)
    return result


SIGMA_LEVELS = {"1sigma": 0.682689492137086, "2sigma": 0.954499736103642, "3sigma": 0.997300203936740}


@dataclass
class PosteriorSummary:
    names: tuple
    mean: np.ndarray
    covariance: np.ndarray
    intervals: dict
    histograms: dict
    n_samples: int

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def correlation(self) -> np.ndarray:
        std = self.std
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.covariance / np.outer(std, std)

    def contains(self, omega, level: str = "2sigma") -> np.ndarray:
        lo, hi = self.intervals[level].T
        omega = np.asarray(omega, dtype=float)
        return (omega >= lo) & (omega <= hi)

    def table(self) -> list[dict]:
        rows = []
        for k, name in enumerate(self.names):
            row = {"parameter": name, "mean": float(self.mean[k]), "std": float(self.std[k])}
            for level, iv in self.intervals.items():
                row[f"{level}_lo"] = float(iv[k, 0])
                row[f"{level}_hi"] = float(iv[k, 1])
            rows.append(row)
        return rows

    def table_csv(self) -> str:
        rows = self.table()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def histograms_json(self) -> str:
        """Corner-plot grids: bin edges and counts per parameter pair."""
        payload = {
            "names": list(self.names),
            "n_samples": self.n_samples,
            "pairs": [
                {
                    "x": self.names[i],
                    "y": self.names[j],
                    "x_edges": h["x_edges"].tolist(),
                    "y_edges": h["y_edges"].tolist(),
                    "counts": h["counts"].tolist(),
                }
                for (i, j), h in sorted(self.histograms.items())
            ],
        }
        return json.dumps(payload, indent=1) + "\n"

    def write_table(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.table_csv())

    def write_histograms(self, path):
        with open(path, "w") as fh:
            fh.write(self.histograms_json())


def posterior_summaries(samples, names=PARAM_NAMES, bins: int = 30) -> PosteriorSummary:
    """Moments, equal-tailed 1/2/3-sigma intervals and pairwise 2D histograms."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise InsufficientDataError("need at least two samples")
    n, N = samples.shape
    names = tuple(names)[:N] if len(names) >= N else tuple(f"p{k}" for k in range(N))
    mean = samples.mean(axis=0)
    resid = samples - mean
    cov = resid.T @ resid / (n - 1)
    intervals = {}
    for label, mass in SIGMA_LEVELS.items():
        tail = 0.5 * (1.0 - mass)
        intervals[label] = np.quantile(samples, [tail, 1.0 - tail], axis=0).T
    histograms = {}
    for i in range(N):
        for j in range(i + 1, N):
            counts, xe, ye = np.histogram2d(samples[:, i], samples[:, j], bins=bins)
            histograms[(i, j)] = {"x_edges": xe, "y_edges": ye, "counts": counts.astype(int)}
    return PosteriorSummary(names, mean, 0.5 * (cov + cov.T), intervals, histograms, n)
