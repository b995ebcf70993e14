"""
Run configuration: a flat key=value file validated into typed settings
"""
from pathlib import Path
from typing import List, Literal

from dotenv import dotenv_values
from pydantic import Field, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict
from typing_extensions import Self

from app.core.errors import ConfigError
from app.schemas.dataset import OodKind
from app.schemas.encoder import TrainConfig
from app.schemas.scores import ScoreKind
from app.schemas.vmf import PRIOR_SUM_TOLERANCE

LIST_FIELDS = ("priors", "ood_kinds", "scores", "bench_pool_sizes", "bench_scores")


class RunConfig(BaseSettings):
    """Everything a reproducible run needs; the seed is mandatory"""

    seed: int = Field(..., description="Root seed; every component derives a named sub-seed from it")
    out_dir: Path = Field(Path("runs/default"), description="Directory all artifacts are written under")

    # Task generation
    d_in: int = Field(64, ge=2)
    dim: int = Field(16, ge=2)
    num_classes: int = Field(10, ge=2)
    kappa: float = Field(30.0, gt=0.0)
    priors: List[float] | None = Field(None, description="Class priors; uniform when omitted")
    n: int = Field(10000, ge=2, description="ID samples, split 80/20 into train and test")
    sigma_lift: float = Field(0.05, ge=0.0)
    n_ood: int = Field(2000, ge=1)
    ood_kinds: List[OodKind] = Field(default_factory=lambda: list(OodKind))
    rotation_angle: float | None = Field(None, description="Near-OOD rotation in radians")

    # Training
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.03, ge=0.0)
    schedule: Literal["cosine", "step"] = "cosine"
    sgd_momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    ema_momentum: float = Field(0.5, ge=0.0, le=1.0)
    tau_train: float | None = Field(None, gt=0.0, description="Training temperature; 1/kappa when omitted")
    prototype_update: Literal["ema", "gradient"] = "ema"
    hidden_width: int = Field(128, ge=1)
    hidden_layers: int = Field(2, ge=1)
    train_ce_twin: bool = Field(True, description="Also train the cross-entropy twin for energy and msp_ce")

    # Evaluation
    scores: List[ScoreKind] = Field(default_factory=lambda: list(ScoreKind))
    tau_test: float | None = Field(None, gt=0.0, description="Test temperature; tau_train / 2 when omitted")
    energy_tau: float = Field(1.0, gt=0.0)
    target_tpr: float = Field(0.95, gt=0.0, lt=1.0)
    knn_k: int = Field(50, ge=1)
    histogram_bins: int = Field(50, ge=1)

    # Benchmark
    bench_classes: int = Field(100, ge=1)
    bench_dim: int = Field(128, ge=2)
    bench_pool_sizes: List[int] = Field(default_factory=lambda: [5000, 100000])
    bench_scores: List[ScoreKind] = Field(default_factory=lambda: [ScoreKind.INK, ScoreKind.KNN])
    bench_samples: int = Field(10000, ge=1)
    bench_repeats: int = Field(10, ge=1)

    # Sweep
    sweep_prototypes: Literal["trained", "truth"] = "trained"
    validate_tau: bool = Field(False, description="Also pick tau by speckle validation")
    speckle_sigma: float = Field(8.0, ge=0.0)

    model_config = SettingsConfigDict(case_sensitive=False, extra="forbid")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # the config file and CLI flags are the only sources
        return (init_settings,)

    @field_validator(*LIST_FIELDS, mode="before")
    @classmethod
    def split_lists(cls, value):
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    @field_validator("bench_pool_sizes")
    @classmethod
    def validate_pool_sizes(cls, value: List[int]) -> List[int]:
        if not value or any(size < 1 for size in value):
            raise ValueError("bench_pool_sizes must be positive")
        return value

    @model_validator(mode="after")
    def validate_task(self) -> Self:
        if self.priors is not None:
            if len(self.priors) != self.num_classes:
                raise ValueError(f"priors: expected {self.num_classes} entries, got {len(self.priors)}")
            if any(p < 0.0 for p in self.priors) or abs(sum(self.priors) - 1.0) > PRIOR_SUM_TOLERANCE:
                raise ValueError(f"priors: must be nonnegative and sum to 1, got sum {sum(self.priors)!r}")
        if self.d_in < self.dim:
            raise ValueError(f"d_in ({self.d_in}) must be >= dim ({self.dim})")
        if self.tau_train is None:
            self.tau_train = 1.0 / self.kappa
        if self.tau_test is None:
            self.tau_test = self.tau_train / 2.0
        return self

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            schedule=self.schedule,
            sgd_momentum=self.sgd_momentum,
            weight_decay=self.weight_decay,
            ema_momentum=self.ema_momentum,
            tau_train=self.tau_train,
            prototype_update=self.prototype_update,
            hidden_width=self.hidden_width,
            hidden_layers=self.hidden_layers,
            seed=seed,
        )

    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"

    @property
    def model_dir(self) -> Path:
        return self.out_dir / "model"

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"


def read_config_file(path) -> dict:
    """Parse key=value lines; '#' starts a comment and keys are case-insensitive"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigError(f"{path}: key '{key}' has no value")
        values[key.strip().lower()] = value
    return values


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """
    Build a RunConfig from a file plus CLI overrides.

    Raises:
        FileNotFoundError: the file does not exist
        ConfigError: a line has no value
        pydantic.ValidationError: a key is unknown or a value is invalid
    """
    values = read_config_file(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig(**values)
