"""Pipeline configuration, loaded from and dumped to YAML.

Every field has a default, so an empty file (or no file) runs the Lotka-Volterra
benchmark. Unknown keys are rejected rather than silently ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError
from .lotka_volterra import ObserverConfig
from .priors import BENCHMARK_OMEGA0, BENCHMARK_STD, GROUND_TRUTH

MODELS = ("A", "B", "synthetic-linear")


@dataclass
class PriorSettings:
    mean: list = field(default_factory=lambda: list(BENCHMARK_OMEGA0))
    std: list = field(default_factory=lambda: list(BENCHMARK_STD))


@dataclass
class SelfiSettings:
    N0: int = 150
    Ns: int = 100
    # forward-difference step is fd_rel * max(|theta0_i|, 1)
    fd_rel: float = 0.05
    c0_jitter: float = 1e-6
    covariance: str = "ledoit-wolf"
    gradient_reference: str = "paired"
    common_random_numbers: bool = True


@dataclass
class LatentPriorSettings:
    n_draws: int = 300
    # None means 1e-4 * trace / S
    lambda_S: float | None = None


@dataclass
class MisspecSettings:
    n_ref: int = 300
    level: float = 0.95


@dataclass
class CompressionSettings:
    # None means 1e-3 * max(|omega0_j|, 1e-3)
    fd_step: float | None = None


@dataclass
class AbcSettings:
    epsilon: float = 2.0
    n_accept_target: int = 2000
    max_draws: int = 1_000_000
    block_size: int = 1000
    write_all_draws: bool = True


@dataclass
class SyntheticSettings:
    """Linear-Gaussian stand-in model; prior width is relative to omega0."""

    S: int = 20
    P: int = 20
    N: int = 4
    model_seed: int = 0
    noise: float = 0.5
    prior_rel_std: float = 0.05


_SECTIONS = {
    "prior": PriorSettings,
    "selfi": SelfiSettings,
    "latent_prior": LatentPriorSettings,
    "misspec": MisspecSettings,
    "compression": CompressionSettings,
    "abc": AbcSettings,
    "synthetic": SyntheticSettings,
}


@dataclass
class PipelineConfig:
    model: str = "A"
    seed_root: int = 0
    threads: int = 1
    out: str = "run"
    ground_truth: list = field(default_factory=lambda: list(GROUND_TRUTH))
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    prior: PriorSettings = field(default_factory=PriorSettings)
    selfi: SelfiSettings = field(default_factory=SelfiSettings)
    latent_prior: LatentPriorSettings = field(default_factory=LatentPriorSettings)
    misspec: MisspecSettings = field(default_factory=MisspecSettings)
    compression: CompressionSettings = field(default_factory=CompressionSettings)
    abc: AbcSettings = field(default_factory=AbcSettings)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.selfi.N0 < 2 or self.selfi.Ns < 2:
            raise ConfigError("selfi.N0 and selfi.Ns must both be >= 2")
        if not self.selfi.fd_rel > 0:
            raise ConfigError("selfi.fd_rel must be positive")
        if self.selfi.covariance not in ("sample", "ledoit-wolf"):
            raise ConfigError("selfi.covariance must be 'sample' or 'ledoit-wolf'")
        if self.selfi.gradient_reference not in ("f0", "paired"):
            raise ConfigError("selfi.gradient_reference must be 'f0' or 'paired'")
        if self.selfi.gradient_reference == "paired" and self.selfi.Ns > self.selfi.N0:
            raise ConfigError("paired gradients need Ns <= N0")
        if len(self.prior.mean) != len(self.prior.std) or any(s <= 0 for s in self.prior.std):
            raise ConfigError("prior.mean and prior.std must have equal length, std > 0")
        if self.model != "synthetic-linear":
            if len(self.prior.mean) != 4 or len(self.ground_truth) != 4:
                raise ConfigError("Lotka-Volterra models take four parameters")
        if self.misspec.n_ref < 100:
            raise ConfigError("misspec.n_ref must be >= 100")
        if not self.abc.epsilon > 0:
            raise ConfigError("abc.epsilon must be positive")
        if self.abc.n_accept_target < 1 or self.abc.max_draws < 1 or self.abc.block_size < 1:
            raise ConfigError("abc targets and budgets must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed_root < 0:
            raise ConfigError("seed_root must be non-negative")
        if self.latent_prior.lambda_S is not None and not self.latent_prior.lambda_S > 0:
            raise ConfigError("latent_prior.lambda_S must be positive")
        return self

    def to_dict(self, compact: bool = False) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ObserverConfig):
                out[f.name] = value.to_dict(compact)
            elif f.name in _SECTIONS:
                out[f.name] = asdict(value)
            else:
                out[f.name] = list(value) if isinstance(value, (list, tuple)) else value
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(compact=True), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for name, value in data.items():
                if name == "observer":
                    kwargs[name] = ObserverConfig.from_dict(value or {})
                elif name in _SECTIONS:
                    section = _SECTIONS[name]
                    allowed = {f.name for f in fields(section)}
                    extra = set(value or {}) - allowed
                    if extra:
                        raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
                    kwargs[name] = section(**(value or {}))
                else:
                    kwargs[name] = value
            cfg = cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data)
