"""
Pydantic schemas for detection reports
"""
from typing import Dict, List

from pydantic import BaseModel, Field

from app.schemas.detector import CalibratedDetector


class OodResult(BaseModel):
    """One (score, OOD dataset) evaluation row"""
    score: str = Field(..., description="Score kind")
    dataset: str = Field(..., description="OOD dataset name")
    auroc: float = Field(..., ge=0.0, le=1.0)
    fpr_at_95: float = Field(..., ge=0.0, le=1.0, description="FPR of OOD at the calibrated threshold")


class TimingStats(BaseModel):
    """Per-sample scoring latency, microseconds; never reproducible bit-for-bit"""
    score: str
    pool_size: int = Field(0, ge=0, description="Embedding pool size the score was built with")
    mean_us: float = Field(..., ge=0.0)
    std_us: float = Field(..., ge=0.0)
    median_us: float = Field(..., ge=0.0, description="Median over repeats of the per-sample batch mean")
    samples: int = Field(..., ge=1)
    repeats: int = Field(..., ge=1)


class SweepRow(BaseModel):
    """AUROC at one test-time temperature"""
    tau: float = Field(..., gt=0.0)
    auroc: float = Field(..., ge=0.0, le=1.0, description="Mean AUROC over OOD sets")
    per_dataset: Dict[str, float] = Field(default_factory=dict)


class ScoreHistogram(BaseModel):
    """Fixed-bin histogram of ID and OOD scores over their pooled range"""
    score: str
    dataset: str
    edges: List[float] = Field(..., description="Bin edges, one more than the counts")
    id_counts: List[int]
    ood_counts: List[int]


class DetectionReport(BaseModel):
    """Everything cmd_eval emits"""
    schema_tag: str = Field("ssreport/1", description="Versioned report schema")
    seed: int
    tau_test: float
    target_tpr: float
    id_accuracy: float = Field(..., ge=0.0, le=1.0)
    results: List[OodResult] = Field(default_factory=list)
    detectors: List[CalibratedDetector] = Field(default_factory=list)
    timing: List[TimingStats] = Field(default_factory=list)
    sweep: List[SweepRow] = Field(default_factory=list)
    histograms: List[ScoreHistogram] = Field(default_factory=list)
