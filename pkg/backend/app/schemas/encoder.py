"""
Pydantic schemas for prototypes and training configuration
"""
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator

PROTOTYPE_NORM_TOLERANCE = 1e-9


class PrototypeBank(BaseModel):
    """Learned class prototypes mu_1..mu_C with the temperature they were trained at"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mus: np.ndarray = Field(..., description="(C, d) unit-norm prototypes")
    tau: float = Field(..., gt=0.0, allow_inf_nan=False, description="Temperature, 1/kappa")

    @field_validator("mus", mode="before")
    @classmethod
    def validate_mus(cls, value) -> np.ndarray:
        mus = np.array(value, dtype=np.float64)
        if mus.ndim != 2 or mus.shape[0] < 1 or mus.shape[1] < 2:
            raise ValueError(f"mus must be a (C >= 1, d >= 2) matrix, got shape {mus.shape}")
        norms = np.linalg.norm(mus, axis=1)
        if np.any(np.abs(norms - 1.0) > PROTOTYPE_NORM_TOLERANCE):
            raise ValueError("every prototype must have unit norm")
        return mus

    @field_serializer("mus")
    def serialize_mus(self, value: np.ndarray) -> list:
        return value.tolist()

    @property
    def num_classes(self) -> int:
        return int(self.mus.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mus.shape[1])


class TrainConfig(BaseModel):
    """Optimizer and schedule settings shared by the vMF encoder and the CE twin"""
    epochs: int = Field(30, ge=1, description="Passes over the training set")
    batch_size: int = Field(128, ge=1, description="Mini-batch size")
    learning_rate: float = Field(
        0.1,
        ge=0.0,
        description="Initial learning rate; 0 freezes the network weights"
    )
    schedule: Literal["cosine", "step"] = Field(
        "cosine",
        description="cosine: anneal to 0; step: x0.1 at 50%, 75% and 90% of training"
    )
    sgd_momentum: float = Field(0.9, ge=0.0, lt=1.0, description="Heavy-ball momentum")
    weight_decay: float = Field(1e-4, ge=0.0, description="L2 penalty on affine weights")
    ema_momentum: float = Field(
        0.5,
        ge=0.0,
        le=1.0,
        description="Prototype EMA momentum m; 1 keeps prototypes frozen"
    )
    tau_train: float = Field(0.1, gt=0.0, description="Training temperature")
    prototype_update: Literal["ema", "gradient"] = Field(
        "ema",
        description="ema: moving average of class means; gradient: SGD on the loss then renormalize"
    )
    hidden_width: int = Field(128, ge=1, description="Width of each hidden layer")
    hidden_layers: int = Field(2, ge=1, description="Number of hidden affine+rectifier blocks")
    divergence_factor: float = Field(10.0, gt=1.0, description="Loss multiple of the initial loss that counts as divergence")
    divergence_patience: int = Field(3, ge=1, description="Consecutive diverged epochs before aborting")
    seed: int = Field(..., description="Seed for initialization and shuffling")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "epochs": 30,
                    "batch_size": 128,
                    "learning_rate": 0.1,
                    "schedule": "cosine",
                    "ema_momentum": 0.5,
                    "tau_train": 0.1,
                    "seed": 7
                }
            ]
        }
    }
