"""
Pydantic schemas for von Mises-Fisher components and mixtures
"""
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator
from typing_extensions import Self

from app.schemas.sphere import UnitVector

MEAN_NORM_TOLERANCE = 1e-9
PRIOR_SUM_TOLERANCE = 1e-12


class VmfComponent(BaseModel):
    """A single vMF distribution on S^(d-1)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mu: UnitVector = Field(..., description="Mean direction")
    kappa: float = Field(..., ge=0.0, allow_inf_nan=False, description="Concentration; 0 is uniform")

    @property
    def dim(self) -> int:
        return self.mu.dim


class VmfMixture(BaseModel):
    """C vMF components sharing one concentration, weighted by class priors"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    means: np.ndarray = Field(..., description="(C, d) matrix of unit mean directions")
    kappa: float = Field(..., ge=0.0, allow_inf_nan=False, description="Shared concentration")
    priors: np.ndarray = Field(..., description="(C,) class prior probabilities")

    @field_validator("means", mode="before")
    @classmethod
    def validate_means(cls, value) -> np.ndarray:
        means = np.array(value, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 2:
            raise ValueError(f"means must be a (C >= 1, d >= 2) matrix, got shape {means.shape}")
        norms = np.linalg.norm(means, axis=1)
        if np.any(np.abs(norms - 1.0) > MEAN_NORM_TOLERANCE):
            raise ValueError("every mean direction must have unit norm")
        return means

    @field_validator("priors", mode="before")
    @classmethod
    def validate_priors(cls, value) -> np.ndarray:
        priors = np.array(value, dtype=np.float64)
        if priors.ndim != 1:
            raise ValueError("priors must be a vector")
        if np.any(~np.isfinite(priors)) or np.any(priors < 0.0):
            raise ValueError("priors must be finite and nonnegative")
        if abs(float(priors.sum()) - 1.0) > PRIOR_SUM_TOLERANCE:
            raise ValueError(f"priors must sum to 1, got {float(priors.sum())!r}")
        return priors

    @model_validator(mode="after")
    def validate_shapes(self) -> Self:
        if self.priors.shape[0] != self.means.shape[0]:
            raise ValueError(
                f"priors has {self.priors.shape[0]} entries for {self.means.shape[0]} components"
            )
        return self

    @field_serializer("means", "priors")
    def serialize_array(self, value: np.ndarray) -> list:
        return value.tolist()

    @classmethod
    def uniform(cls, means, kappa: float) -> "VmfMixture":
        """Mixture with equal priors 1/C"""
        means = np.asarray(means, dtype=np.float64)
        count = means.shape[0]
        return cls(means=means, kappa=kappa, priors=np.full(count, 1.0 / count))

    @property
    def num_components(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def components(self) -> List[VmfComponent]:
        return [VmfComponent(mu=UnitVector.normalize(mu), kappa=self.kappa) for mu in self.means]

    def with_kappa(self, kappa: float) -> "VmfMixture":
        return VmfMixture(means=self.means, kappa=kappa, priors=self.priors)
