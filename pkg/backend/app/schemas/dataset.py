"""
Pydantic schemas for labeled embeddings, raw input sets and synthetic tasks
"""
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator, model_validator
from typing_extensions import Self

from app.schemas.sphere import normalize_rows
from app.schemas.vmf import VmfMixture

EMBEDDING_NORM_TOLERANCE = 1e-9


def _labels_array(value) -> np.ndarray | None:
    if value is None:
        return None
    labels = np.array(value)
    if labels.ndim != 1:
        raise ValueError("labels must be a vector")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
        raise ValueError("labels must be nonnegative integers")
    return labels.astype(np.int64)


class OodKind(str, Enum):
    """Synthetic OOD generators"""
    UNIFORM_SPHERE = "uniform_sphere"
    SHIFTED_MIXTURE = "shifted_mixture"
    LOW_KAPPA = "low_kappa"


class RawInputSet(BaseModel):
    """Unnormalized encoder inputs x with optional class labels"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str = Field(..., description="Dataset identifier")
    points: np.ndarray = Field(..., description="(n, dim_in) finite input vectors")
    labels: np.ndarray | None = Field(None, description="(n,) class indices, absent for OOD sets")

    @field_validator("points", mode="before")
    @classmethod
    def validate_points(cls, value) -> np.ndarray:
        points = np.array(value, dtype=np.float64)
        if points.ndim != 2:
            raise ValueError(f"points must be an (n, dim_in) matrix, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ValueError("input values must be finite")
        return points

    @field_validator("labels", mode="before")
    @classmethod
    def validate_labels(cls, value) -> np.ndarray | None:
        return _labels_array(value)

    @model_validator(mode="after")
    def validate_lengths(self) -> Self:
        if self.labels is not None and self.labels.shape[0] != self.points.shape[0]:
            raise ValueError("points and labels must have equal length")
        return self

    @property
    def dim_in(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return int(self.points.shape[0])


class LabeledEmbeddingSet(BaseModel):
    """Unit-norm embeddings z with class labels in [0, C)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str = Field(..., description="Dataset identifier")
    points: np.ndarray = Field(..., description="(n, d) unit-norm embeddings")
    labels: np.ndarray = Field(..., description="(n,) class indices")

    @field_validator("points", mode="before")
    @classmethod
    def validate_points(cls, value) -> np.ndarray:
        points = np.array(value, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] < 2:
            raise ValueError(f"points must be an (n, d >= 2) matrix, got shape {points.shape}")
        norms = np.linalg.norm(points, axis=1)
        if np.any(np.abs(norms - 1.0) > EMBEDDING_NORM_TOLERANCE):
            raise ValueError("every embedding must have unit norm")
        return points

    @field_validator("labels", mode="before")
    @classmethod
    def validate_labels(cls, value) -> np.ndarray:
        labels = _labels_array(value)
        if labels is None:
            raise ValueError("labels are required")
        return labels

    @model_validator(mode="after")
    def validate_lengths(self) -> Self:
        if self.labels.shape[0] != self.points.shape[0]:
            raise ValueError("points and labels must have equal length")
        return self

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return int(self.points.shape[0])


class OrthogonalLift(BaseModel):
    """Fixed isometric embedding of S^(d-1) into R^dim_in plus isotropic noise"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    basis: np.ndarray = Field(..., description="(dim_in, d) matrix with orthonormal columns")
    sigma: float = Field(0.05, ge=0.0, description="Standard deviation of the lift noise")

    @field_validator("basis", mode="before")
    @classmethod
    def validate_basis(cls, value) -> np.ndarray:
        basis = np.array(value, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] < basis.shape[1]:
            raise ValueError("basis must be a tall (dim_in, d) matrix")
        return basis

    @field_serializer("basis")
    def serialize_basis(self, value: np.ndarray) -> list:
        return value.tolist()

    @property
    def dim_in(self) -> int:
        return int(self.basis.shape[0])

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    def lift(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = z @ self.basis.T
        if self.sigma > 0.0:
            x = x + self.sigma * rng.standard_normal(x.shape)
        return x

    def project(self, x: np.ndarray) -> np.ndarray:
        """Map inputs back onto the sphere they were lifted from"""
        return normalize_rows(x @ self.basis)


class SyntheticTask(BaseModel):
    """A generated ID task together with the oracle needed to check it"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    train: RawInputSet
    test: RawInputSet
    truth: VmfMixture = Field(..., description="Ground-truth generative mixture")
    lift: OrthogonalLift = Field(..., description="Sphere-to-input embedding shared with OOD sets")
    test_sphere: np.ndarray = Field(..., description="(n_test, d) sphere points before lifting")


class TaskTruth(BaseModel):
    """Sidecar written next to generated data so oracle checks can be rerun from files"""
    mixture: VmfMixture
    lift: OrthogonalLift
    ood_kinds: list[OodKind] = Field(default_factory=list)
