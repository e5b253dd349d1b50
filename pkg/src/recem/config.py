"""Flat ``key = value`` run configuration shared by the CLI, trainer and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .models import ModelConfig, Variant, format_value
from .synthdata import SyntheticSpec


EXPERIMENTS = ("baselines", "ablation", "beta_sweep", "weight_sweep", "intervention", "shift",
               "leakage", "consistency")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    variant: str = "RECEM"
    K: int = 16
    M: int = 8
    n_in: int = 64
    d: int = 16
    n_hidden: int = 64
    grl_lambda: float = 1.0
    randint_prob: float = 0.25
    alpha: float = 1.0
    lambda_m: float = 0.1
    lambda_cvd: float = 0.05
    lambda_rec: float = 1.0
    beta_max: float = 0.2
    beta_warmup: int | None = None  # None: 30% of epochs
    hsic_beta_max: float | None = None
    rec_reduction: str = "element"
    mechanisms: bool = False
    ema_mean: bool = False
    # data
    dim_r: int = 32
    dim_z: int = 16
    rho: float = 0.9
    noise_sigma: float = 0.05
    concept_noise: float = 0.5
    anchor_scale: float = 1.0
    pair_corr: float = 0.3
    incomplete: bool = False
    n_train: int = 4000
    n_val: int = 1000
    n_test: int = 2000
    data_seed: int = 0
    # optimisation
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 128
    grad_clip: float | None = 2.0  # global gradient-norm cap
    # orchestration
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"
    experiment: str = "baselines"

    def __post_init__(self):
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        try:
            self.data_spec().validate()
            self.model_config(self.seeds[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def warmup(self) -> int:
        if self.beta_warmup is not None:
            return self.beta_warmup
        return max(1, round(0.3 * self.epochs))

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(
            variant=Variant(self.variant), K=self.K, M=self.M, n_in=self.n_in, d=self.d,
            n_hidden=self.n_hidden, grl_lambda=self.grl_lambda, randint_prob=self.randint_prob,
            alpha=self.alpha, lambda_m=self.lambda_m, lambda_cvd=self.lambda_cvd,
            lambda_rec=self.lambda_rec, beta_max=self.beta_max, beta_warmup=self.warmup,
            hsic_beta_max=self.hsic_beta_max, rec_reduction=self.rec_reduction, mechanisms=self.mechanisms, ema_mean=self.ema_mean,
            seed=seed)

    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            K=self.K, M=self.M, n_in=self.n_in, dim_r=self.dim_r, dim_z=self.dim_z, rho=self.rho,
            noise_sigma=self.noise_sigma, concept_noise=self.concept_noise,
            anchor_scale=self.anchor_scale, pair_corr=self.pair_corr, incomplete=self.incomplete,
            n_train=self.n_train, n_val=self.n_val, n_test=self.n_test, seed=self.data_seed)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def items(self) -> list[tuple[str, str]]:
        return [(f.name, format_value(getattr(self, f.name))) for f in fields(self)]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    typ = types[key]
    raw = raw.strip()
    try:
        if "None" in typ and raw.lower() in ("none", ""):
            return None
        if typ.startswith("bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
        if typ.startswith("list"):
            return [int(s) for s in raw.replace(";", ",").split(",") if s.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = parse_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    unknown = set(values) - set(_field_types())
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
