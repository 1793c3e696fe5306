"""Stage orchestration: mock data, SELFI, misspecification check, compression + ABC, report.

Each ``cmd_*`` function reads its inputs from verified stage directories under
``config.out`` and seals its own outputs with a manifest (see ``storage``).
Everything persisted except timestamps is a pure function of the config and
``seed_root``, whatever the thread count.
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .compression import (
    Compressor,
    SummarySimulator,
    build_compression_artifacts,
    posterior_summaries,
    rejection_sample,
)
from .config import PipelineConfig
from .errors import ArtifactError, BudgetExhausted
from .lotka_volterra import PARAM_NAMES, LotkaVolterraBHM
from .priors import ParamPrior
from .seeding import stream
from .selfi import (
    CountingSimulator,
    ExpansionArtifacts,
    LatentPrior,
    build_latent_prior,
    expansion_artifacts,
    misspec_report,
    run_expansion_ensembles,
    selfi_posterior,
)
from .storage import Stage, StageWriter, stage_exists
from .synthetic import LinearGaussianBHM

MOCK_DIR = "mock"
MISSPEC_DIR = "misspec"
LV_FAMILY = "lotka-volterra"
SYNTHETIC_FAMILY = "synthetic-linear"


@dataclass
class Setup:
    """The model family resolved from a config: simulators, prior, truth."""

    family: str
    models: dict
    prior: ParamPrior
    ground_truth: np.ndarray
    layout: np.ndarray | None
    names: tuple

    def bhm(self, model: str):
        if model not in self.models:
            raise ArtifactError(f"model {model!r} is not available for the {self.family} family")
        return self.models[model]

    @property
    def reference(self):
        """The model that generates the mock data and defines the latent map."""
        return next(iter(self.models.values()))


def setup(cfg: PipelineConfig) -> Setup:
    if cfg.model == "synthetic-linear":
        s = cfg.synthetic
        bhm = LinearGaussianBHM.random(s.S, s.P, s.N, s.model_seed, s.noise)
        std = s.prior_rel_std * np.maximum(np.abs(bhm.omega0), 1e-3)
        prior = ParamPrior.from_std(bhm.omega0, std, positive=False)
        signs = np.where(np.arange(s.N) % 2 == 0, 1.0, -1.0)
        truth = bhm.omega0 + 0.5 * std * signs
        names = tuple(f"omega{k}" for k in range(s.N))
        return Setup(SYNTHETIC_FAMILY, {"synthetic-linear": bhm}, prior, truth, None, names)
    obs = cfg.observer
    models = {m: LotkaVolterraBHM(obs, m) for m in ("A", "B")}
    prior = ParamPrior.from_std(cfg.prior.mean, cfg.prior.std)
    return Setup(LV_FAMILY, models, prior, np.asarray(cfg.ground_truth, float), obs.keep, PARAM_NAMES)


def _out(cfg) -> Path:
    return Path(cfg.out)


def selfi_dir(cfg, model=None) -> Path:
    return _out(cfg) / f"selfi-{model or cfg.model}"


def sbi_dir(cfg, model=None) -> Path:
    return _out(cfg) / f"sbi-{model or cfg.model}"


def _load_mock(cfg, su: Setup) -> Stage:
    mock = Stage(_out(cfg) / MOCK_DIR, "generate-mock")
    if mock["family"] != su.family:
        raise ArtifactError(f"mock data were generated for {mock['family']}, config selects {su.family}")
    return mock


def _phi_obs(mock: Stage, su: Setup, model):
    values = mock.vector("phi_obs")
    return su.bhm(model).data_vector(values)


# ---------------------------------------------------------------------------
# generate-mock


def cmd_generate_mock(cfg: PipelineConfig) -> dict:
    """Mock observation from the reference model at the ground truth."""
    su = setup(cfg)
    w = StageWriter(_out(cfg) / MOCK_DIR, "generate-mock", cfg.to_dict())
    bhm = su.reference
    sim = CountingSimulator(bhm.simulate)
    theta_gt = np.asarray(bhm.latent(su.ground_truth), dtype=float)
    phi = sim(theta_gt, stream(cfg.seed_root, "mock"))
    w.matrix("omega_gt", su.ground_truth)
    w.matrix("theta_gt", theta_gt)
    w.matrix("phi_obs", phi)
    if su.layout is not None:
        w.matrix("layout", su.layout.astype(float))
    return w.finish(family=su.family, simulator_calls=sim.calls, S=int(theta_gt.size), P=int(phi.size))


# ---------------------------------------------------------------------------
# selfi


def _band_csv(su: Setup, prior: LatentPrior, post, theta_gt) -> str:
    S = prior.mean.size
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["timestep", "species", "prior_mean", "prior_2sigma", "gamma", "posterior_2sigma", "ground_truth"]
    )
    half = S // 2
    for k in range(S):
        if su.family == LV_FAMILY:
            step, species = k % half, ("prey" if k < half else "predator")
        else:
            step, species = k, "latent"
        writer.writerow([
            step,
            species,
            repr(float(prior.mean[k])),
            repr(float(2 * prior.std[k])),
            repr(float(post.gamma[k])),
            repr(float(2 * post.std[k])),
            repr(float(theta_gt[k])),
        ])
    return buf.getvalue()


def cmd_selfi(cfg: PipelineConfig) -> dict:
    """Expansion ensembles, effective-likelihood artifacts and the latent posterior."""
    su = setup(cfg)
    mock = _load_mock(cfg, su)
    bhm = su.bhm(cfg.model)
    phi_obs = _phi_obs(mock, su, cfg.model)
    theta0 = np.asarray(su.reference.latent(su.prior.mean), dtype=float)
    s = cfg.selfi
    w = StageWriter(selfi_dir(cfg), "selfi", cfg.to_dict())

    sim = CountingSimulator(bhm.simulate)
    h = s.fd_rel * np.maximum(np.abs(theta0), 1.0)
    archive = run_expansion_ensembles(
        theta0, sim, s.N0, s.Ns, h,
        seed_root=cfg.seed_root,
        tag=f"selfi-{cfg.model}",
        threads=cfg.threads,
        common_random_numbers=s.common_random_numbers,
    )
    art = expansion_artifacts(archive, s.c0_jitter, su.layout, s.covariance, s.gradient_reference)
    lp = build_latent_prior(
        su.prior, su.reference.latent_batch, theta0,
        cfg.latent_prior.n_draws, cfg.latent_prior.lambda_S, seed=cfg.seed_root,
    )
    post = selfi_posterior(art, lp, phi_obs)

    w.matrix("theta0", theta0)
    w.matrix("steps", art.steps)
    w.matrix("phi0", archive.phi0)
    w.matrix("phi_dirs", archive.stacked_dirs().reshape(-1, art.P))
    w.matrix("f0", art.f0)
    w.matrix("C0", art.C0)
    w.matrix("grad_f0", art.grad_f0)
    w.matrix("prior_cov", lp.prior_cov)
    w.matrix("gamma", post.gamma)
    w.matrix("Gamma", post.Gamma)
    w.text("band.csv", _band_csv(su, lp, post, mock.vector("theta_gt")))
    return w.finish(
        model=cfg.model,
        family=su.family,
        simulator_calls=sim.calls,
        expected_simulations=s.N0 + s.Ns * art.S,
        N0=s.N0,
        Ns=s.Ns,
        S=art.S,
        P=art.P,
        lambda_S=lp.lambda_S,
        seed_root=cfg.seed_root,
    )


def load_expansion(cfg, model=None) -> tuple[ExpansionArtifacts, Stage]:
    """Recycle the persisted SELFI products without rerunning any simulation."""
    st = Stage(selfi_dir(cfg, model), "selfi")
    layout = None
    if stage_exists(_out(cfg) / MOCK_DIR):
        mock = Stage(_out(cfg) / MOCK_DIR, "generate-mock")
        if "layout.bin" in mock["files"]:
            layout = mock.vector("layout").astype(np.int8)
    art = ExpansionArtifacts(
        theta0=st.vector("theta0"),
        f0=st.vector("f0"),
        C0=st.matrix("C0"),
        grad_f0=st.matrix("grad_f0"),
        steps=st.vector("steps"),
        N0=st["N0"],
        Ns=st["Ns"],
        seed_root=st["seed_root"],
        layout=layout,
    )
    return art, st


# ---------------------------------------------------------------------------
# check-misspec


def _available_models(cfg) -> list[str]:
    return [m for m in ("A", "B", "synthetic-linear") if stage_exists(selfi_dir(cfg, m))]


def cmd_check_misspec(cfg: PipelineConfig) -> dict:
    """Mahalanobis check for every model with a SELFI posterior on disk."""
    su = setup(cfg)
    models = _available_models(cfg)
    if not models:
        raise ArtifactError(f"no SELFI posterior under {_out(cfg)}; run the selfi stage first")
    m = cfg.misspec
    w = StageWriter(_out(cfg) / MISSPEC_DIR, "check-misspec", cfg.to_dict())
    lines = [
        "Misspecification check",
        f"reference: {m.n_ref} prior-predictive trajectories, seed_root {cfg.seed_root}",
        f"verdict rule: 'suspect' when d_M(gamma) exceeds the {100 * m.level:g}th percentile "
        "of the reference distances (package convention)",
        "",
    ]
    results = {}
    for model in models:
        st = Stage(selfi_dir(cfg, model), "selfi")
        theta0 = st.vector("theta0")
        rep = misspec_report(
            st.vector("gamma"), theta0, st.matrix("prior_cov"), su.prior,
            su.reference.latent_batch, m.n_ref, seed=cfg.seed_root, level=m.level,
        )
        results[model] = rep.as_dict()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "d_M"])
        for k, d in enumerate(rep.reference):
            writer.writerow([k, repr(float(d))])
        w.text(f"reference-{model}.csv", buf.getvalue())
        qs = np.quantile(rep.reference, [0.05, 0.5, 0.95])
        lines += [
            f"model {model}",
            f"  d_M(gamma, theta0)  {rep.d_M_posterior:.4f}",
            f"  reference mean      {rep.reference_mean:.4f} +/- {rep.reference_sem:.4f} (s.e.)",
            f"  reference 5/50/95%  {qs[0]:.4f} / {qs[1]:.4f} / {qs[2]:.4f}",
            f"  quantile            {rep.quantile:.3f}",
            f"  verdict             {rep.verdict}",
            "",
        ]
    w.text("report.txt", "\n".join(lines))
    return w.finish(models=models, results=results, simulator_calls=0)


# ---------------------------------------------------------------------------
# compress-sbi


class CountingModel:
    """Proxy around a hierarchical model counting stochastic simulations (rows drawn)."""

    def __init__(self, bhm):
        self.bhm = bhm
        self.calls = 0
        self._lock = threading.Lock()

    def latent(self, omega):
        return self.bhm.latent(omega)

    def latent_batch(self, omegas):
        return self.bhm.latent_batch(omegas)

    def simulate(self, theta, rng):
        with self._lock:
            self.calls += 1
        return self.bhm.simulate(theta, rng)

    def simulate_batch(self, thetas, rng):
        thetas = np.atleast_2d(thetas)
        with self._lock:
            self.calls += thetas.shape[0]
        return self.bhm.simulate_batch(thetas, rng)


def cmd_compress_and_sbi(cfg: PipelineConfig) -> dict:
    """Score compression from recycled artifacts, then rejection ABC.

    On budget exhaustion the partial draws are still written (manifest status
    ``"partial"``) before BudgetExhausted is re-raised.
    """
    su = setup(cfg)
    mock = _load_mock(cfg, su)
    bhm = su.bhm(cfg.model)
    art, _ = load_expansion(cfg)
    phi_obs = _phi_obs(mock, su, cfg.model)
    w = StageWriter(sbi_dir(cfg), "compress-sbi", cfg.to_dict())

    model = CountingModel(bhm)
    comp = build_compression_artifacts(art, model.latent, su.prior.mean, cfg.compression.fd_step)
    build_calls = model.calls
    compressor = Compressor(comp, art.f0, art.C0)
    w_obs = compressor(phi_obs)

    a = cfg.abc
    chain = SummarySimulator(model, compressor)
    status, error = "complete", None
    try:
        res = rejection_sample(
            su.prior, chain, w_obs, comp.fisher, a.epsilon, a.n_accept_target, a.max_draws,
            seed=cfg.seed_root, block_size=a.block_size, threads=cfg.threads, names=su.names,
        )
    except BudgetExhausted as exc:
        res, status, error = exc.partial, "partial", exc

    w.matrix("grad_T0", comp.grad_T0)
    w.matrix("grad_f_omega", comp.grad_f_omega)
    w.matrix("fisher", comp.fisher)
    w.matrix("fisher_inverse", comp.fisher_inverse)
    w.matrix("omega_tilde_obs", w_obs)
    w.text("samples.csv", res.csv_text(accepted_only=True))
    if a.write_all_draws:
        w.text("draws.csv", res.csv_text())
    extra = {}
    if res.n_accepted >= 2:
        summ = posterior_summaries(res.samples, su.names)
        w.text("summary.csv", summ.table_csv())
        w.text("histograms.json", summ.histograms_json())
        extra = {
            "posterior_mean": summ.mean.tolist(),
            "posterior_std": summ.std.tolist(),
            "posterior_correlation": summ.correlation.tolist(),
            "ground_truth_in_2sigma": summ.contains(su.ground_truth, "2sigma").tolist(),
        }
    manifest = w.finish(
        status=status,
        model=cfg.model,
        simulator_calls=model.calls - build_calls,
        compression_simulator_calls=build_calls,
        omega_tilde_obs=w_obs.tolist(),
        prior_std=su.prior.std.tolist(),
        abc=res.stats(),
        **extra,
    )
    if error is not None:
        raise error
    return manifest


# ---------------------------------------------------------------------------
# report

SECTIONS = ("generate-mock", "selfi", "check-misspec", "compress-sbi", "accounting")


def _try_stage(path, stage):
    if not stage_exists(path):
        return None, None
    try:
        return Stage(path, stage, require_complete=False), None
    except ArtifactError as exc:
        return None, str(exc)


def _fmt(v):
    return np.array2string(np.asarray(v, dtype=float), precision=4, separator=", ")


def cmd_report(cfg: PipelineConfig) -> str:
    """Human-readable summary of whatever stages exist under ``config.out``; read-only."""
    out = _out(cfg)
    found = {}
    problems = []
    for key, path, stage in [("mock", out / MOCK_DIR, "generate-mock"), ("misspec", out / MISSPEC_DIR, "check-misspec")] + [
        (f"selfi-{m}", out / f"selfi-{m}", "selfi") for m in ("A", "B", "synthetic-linear")
    ] + [(f"sbi-{m}", out / f"sbi-{m}", "compress-sbi") for m in ("A", "B", "synthetic-linear")]:
        st, err = _try_stage(path, stage)
        if st is not None:
            found[key] = st
        if err:
            problems.append(err)

    lines = [f"Run report for {out}", ""]
    if not found:
        lines.append("no stages complete")
        lines += [f"  unreadable: {p}" for p in problems]
        return "\n".join(lines) + "\n"

    lines.append("## generate-mock")
    if "mock" in found:
        st = found["mock"]
        lines.append(f"family {st['family']}, S = {st['S']}, P = {st['P']}")
        lines.append(f"ground truth {_fmt(st.vector('omega_gt'))}")
    else:
        lines.append("not run")
    lines.append("")

    lines.append("## selfi")
    selfis = [k for k in found if k.startswith("selfi-")]
    for k in selfis:
        st = found[k]
        gamma = st.vector("gamma")
        Gamma = st.matrix("Gamma")
        line = (
            f"model {st['model']}: {st['simulator_calls']} simulations "
            f"(N0 + Ns*S = {st['expected_simulations']}), P = {st['P']}, S = {st['S']}"
        )
        lines.append(line)
        if "mock" in found:
            theta_gt = found["mock"].vector("theta_gt")
            inside = np.abs(theta_gt - gamma) <= 2 * np.sqrt(np.diag(Gamma))
            lines.append(f"  ground truth inside the 2 sigma band at {inside.mean():.1%} of latent components")
    if not selfis:
        lines.append("not run")
    lines.append("")

    lines.append("## check-misspec")
    if "misspec" in found:
        st = found["misspec"]
        for model, r in st["results"].items():
            lines.append(
                f"model {model}: d_M = {r['d_M_posterior']:.4f}, reference mean = "
                f"{r['reference_mean']:.4f} +/- {r['reference_sem']:.4f}, quantile {r['quantile']:.3f}, "
                f"verdict {r['verdict']}"
            )
    else:
        lines.append("not run")
    lines.append("")

    lines.append("## compress-sbi")
    sbis = [k for k in found if k.startswith("sbi-")]
    for k in sbis:
        st = found[k]
        abc = st["abc"]
        lines.append(
            f"model {st['model']} ({st['status']}): {abc['n_accepted']} accepted of {abc['n_draws']} draws "
            f"(rate {abc['acceptance_rate']:.4g}, epsilon {abc['epsilon']:g})"
        )
        lines.append(f"  compressed observation {_fmt(st['omega_tilde_obs'])}")
        lines.append(f"  stochastic simulations while building compression: {st['compression_simulator_calls']}")
        if "posterior_mean" in st.manifest:
            lines.append(f"  posterior mean {_fmt(st['posterior_mean'])}")
            lines.append(f"  posterior std  {_fmt(st['posterior_std'])}")
            lines.append(f"  prior std      {_fmt(st['prior_std'])}")
            lines.append(f"  ground truth within 2 sigma: {st['ground_truth_in_2sigma']}")
    if not sbis:
        lines.append("not run")
    lines.append("")

    lines.append("## accounting")
    total = 0
    for key, st in found.items():
        calls = int(st.get("simulator_calls", 0))
        total += calls
        lines.append(f"{key:<24} {calls:>9} stochastic simulations  {st['wall_seconds']:>9.2f} s")
    lines.append(f"{'total':<24} {total:>9}")
    lines += [f"unreadable: {p}" for p in problems]
    return "\n".join(lines) + "\n"


def run_all(cfg: PipelineConfig, models=None) -> str:
    """Every stage in order; SELFI for both observers when the family has two."""
    su = setup(cfg)
    models = models or list(su.models)
    cmd_generate_mock(cfg)
    for m in models:
        cmd_selfi(_with_model(cfg, m))
    cmd_check_misspec(cfg)
    cmd_compress_and_sbi(_with_model(cfg, models[0]))
    return cmd_report(cfg)



def _with_model(cfg: PipelineConfig, model: str) -> PipelineConfig:
    return replace(cfg, model=model)
