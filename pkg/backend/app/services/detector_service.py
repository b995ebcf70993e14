"""
Detector Service
Threshold calibration on ID scores and the inclusive decision rule
"""
import logging
import math
from typing import List

import numpy as np

from app.core.errors import EmptyInputError
from app.schemas.detector import CalibratedDetector, Decision

logger = logging.getLogger(__name__)

# absorbs rounding in target_tpr * n when the product should be an integer
_COUNT_EPSILON = 1e-9


def calibrate(id_scores, target_tpr: float = 0.95, score_kind: str = "ink") -> CalibratedDetector:
    """
    Largest threshold lambda drawn from the ID scores with P_id(score >= lambda) >= target_tpr.

    This is the lower empirical (1 - target_tpr) quantile: with the scores sorted
    ascending, lambda is the entry at index n - ceil(target_tpr * n).
    """
    scores = np.asarray(id_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise EmptyInputError("cannot calibrate on an empty score set")
    if not 0.0 < target_tpr < 1.0:
        raise ValueError(f"target_tpr must lie in (0, 1), got {target_tpr}")

    n = scores.size
    required = max(1, math.ceil(target_tpr * n - _COUNT_EPSILON))
    threshold = float(np.sort(scores)[n - required])
    return CalibratedDetector(score_kind=score_kind, threshold=threshold, target_tpr=target_tpr)


def id_mask(detector: CalibratedDetector, scores) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64) >= detector.threshold


def decide(detector: CalibratedDetector, score: float) -> Decision:
    return Decision.ID if score >= detector.threshold else Decision.OOD


def decide_batch(detector: CalibratedDetector, scores) -> List[Decision]:
    return [Decision.ID if flag else Decision.OOD for flag in id_mask(detector, scores)]
