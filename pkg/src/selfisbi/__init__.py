"""Simulator-expansion inference of latent functions, a misspecification check,
and score-compressed rejection ABC, with a Lotka-Volterra reference model."""

from .compression import (
    CompressionArtifacts,
    Compressor,
    PosteriorSummary,
    RejectionResult,
    SummarySimulator,
    build_compression_artifacts,
    compress,
    fisher_matrix,
    fisher_rao_distance,
    grad_f_omega,
    grad_T,
    posterior_summaries,
    rejection_sample,
)
from .config import PipelineConfig
from .errors import (
    ArtifactError,
    BudgetExhausted,
    ConfigError,
    DimensionError,
    EnsembleFailure,
    IncompatibleDataError,
    InsufficientDataError,
    SelfiSBIError,
    SingularMatrixError,
    SolverDivergenceError,
)
from .lotka_volterra import (
    DataVector,
    LatentVector,
    LotkaVolterraBHM,
    ObserverConfig,
    ParamVector,
    censor,
    latent_map_T,
    observe_signal,
    sample_noise_model_A,
    simulate_model_A,
    simulate_model_B,
    solve_lv,
)
from .priors import GROUND_TRUTH, ParamPrior
from .seeding import stream
from .selfi import (
    ExpansionArtifacts,
    LatentPrior,
    MisspecReport,
    SelfiPosterior,
    build_latent_prior,
    estimate_f0_C0,
    estimate_grad_f0,
    expansion_artifacts,
    mahalanobis,
    misspec_report,
    run_expansion_ensembles,
    selfi_posterior,
)
from .synthetic import LinearGaussianBHM

__version__ = "0.1.0"
