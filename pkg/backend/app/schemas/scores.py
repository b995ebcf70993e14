"""
Pydantic schemas for scoring functions
"""
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class ScoreKind(str, Enum):
    """Test-time scoring functions; every kind is oriented so higher means more ID"""
    INK = "ink"
    INK_GENERALIZED = "ink_generalized"
    ENERGY = "energy"
    MAX_POSTERIOR = "max_posterior"
    MSP_CE = "msp_ce"
    KNN = "knn"
    MAHALANOBIS = "mahalanobis"


class MisalignmentReport(BaseModel):
    """Outcome of rescaling CE logits by log phi(x)"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    tau: float = Field(..., description="Energy temperature used for both models")
    max_posterior_discrepancy: float = Field(
        ...,
        description="Largest absolute difference between the two models' posteriors"
    )
    score_differences: np.ndarray = Field(
        ...,
        description="Per-sample energy score of the rescaled model minus the original"
    )
    expected_differences: np.ndarray = Field(..., description="Per-sample tau * log phi(x)")
    original_scores: np.ndarray = Field(..., description="Energy scores of the original model")
    rescaled_scores: np.ndarray = Field(..., description="Energy scores of the rescaled model")

    @property
    def max_shift_error(self) -> float:
        return float(np.max(np.abs(self.score_differences - self.expected_differences)))
