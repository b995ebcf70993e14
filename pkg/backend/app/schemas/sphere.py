"""
Pydantic schema for points on the unit hypersphere
"""
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.errors import DegenerateEmbeddingError

UNIT_NORM_TOLERANCE = 1e-12


class UnitVector(BaseModel):
    """A point z on the sphere S^(d-1)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    coords: np.ndarray = Field(..., description="Coordinates, Euclidean norm 1")

    @field_validator("coords", mode="before")
    @classmethod
    def validate_coords(cls, value) -> np.ndarray:
        coords = np.array(value, dtype=np.float64)
        if coords.ndim != 1 or coords.size < 2:
            raise ValueError(f"UnitVector needs a 1-D vector with d >= 2, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("UnitVector coordinates must be finite")
        norm = float(np.linalg.norm(coords))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"UnitVector norm is {norm!r}, expected 1")
        coords.setflags(write=False)
        return coords

    @classmethod
    def normalize(cls, values) -> "UnitVector":
        """Project an arbitrary nonzero vector onto the sphere"""
        x = np.asarray(values, dtype=np.float64)
        norm = float(np.linalg.norm(x))
        if norm == 0.0:
            raise DegenerateEmbeddingError("cannot normalize the zero vector")
        return cls(coords=x / norm)

    @property
    def dim(self) -> int:
        return int(self.coords.shape[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, UnitVector) and np.array_equal(self.coords, other.coords)


def as_points(z) -> np.ndarray:
    """
    Coerce a UnitVector, a (d,) array or an (n, d) array into a float64 array.

    The returned array keeps the caller's rank so batch and single-sample
    calls share one code path.
    """
    if isinstance(z, UnitVector):
        return z.coords
    return np.asarray(z, dtype=np.float64)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise projection onto the sphere; zero rows are an error"""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("cannot normalize a zero row")
    return x / norms
