"""
Pydantic schemas for the thresholded ID/OOD decision rule
"""
from enum import Enum

from pydantic import BaseModel, Field


class Decision(str, Enum):
    ID = "ID"
    OOD = "OOD"


class CalibratedDetector(BaseModel):
    """g_lambda(x) = 1{S(z) >= lambda} with lambda fixed on ID scores"""
    model_config = {"frozen": True}

    score_kind: str = Field("ink", description="Which score the threshold applies to")
    threshold: float = Field(..., allow_inf_nan=False, description="lambda; scores at or above are ID")
    target_tpr: float = Field(0.95, gt=0.0, lt=1.0, description="ID true positive rate the threshold guarantees")

    def to_record(self) -> str:
        """Small text record embedded in report files"""
        return (
            f"detector.{self.score_kind}.lambda={self.threshold!r}\n"
            f"detector.{self.score_kind}.target_tpr={self.target_tpr!r}\n"
        )
