"""
Accuracy curves, weight trajectories and malicious-client detection scores
"""

from dataclasses import dataclass
from typing import Iterable, List, Optional, Set, Tuple

import numpy as np

from simplex import WeightVector
from utils import DomainError

DETECTION_EPSILON = 1e-4


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> 'DetectionReport':
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2.0 * precision * recall, precision + recall)
        return cls(tp, fp, fn, tn, precision, recall, f1, _ratio(tp + tn, tp + fp + fn + tn))


def detection_confusion(w, malicious: Set[int], epsilon: float = DETECTION_EPSILON) -> DetectionReport:
    """Client i is flagged malicious iff wᵢ ≤ ε"""
    values = w.values if isinstance(w, WeightVector) else np.asarray(w, dtype=np.float64)
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    n = values.size
    if any(c < 0 or c >= n for c in malicious):
        raise DomainError("malicious ids outside the client range")
    flagged = values <= epsilon
    is_malicious = np.zeros(n, dtype=bool)
    is_malicious[list(malicious)] = True
    return DetectionReport.from_counts(
        tp=int(np.sum(flagged & is_malicious)),
        fp=int(np.sum(flagged & ~is_malicious)),
        fn=int(np.sum(~flagged & is_malicious)),
        tn=int(np.sum(~flagged & ~is_malicious)),
    )


def _require_traces(traces):
    if not traces:
        raise DomainError("no traces recorded")


def accuracy_curve(traces) -> np.ndarray:
    """Test accuracy per epoch, index = epoch"""
    _require_traces(traces)
    return np.array([trace.test_accuracy for trace in traces], dtype=np.float64)


def validation_curve(traces) -> np.ndarray:
    _require_traces(traces)
    return np.array([trace.validation_accuracy for trace in traces], dtype=np.float64)


def weight_matrix(traces) -> np.ndarray:
    """(epochs, n_clients) weights after each epoch"""
    _require_traces(traces)
    return np.stack([trace.w.values for trace in traces])


def first_suppression_epoch(traces, malicious: Set[int],
                            epsilon: float = DETECTION_EPSILON) -> Optional[int]:
    """First epoch whose weights put every malicious client at or below ε"""
    ids = sorted(malicious)
    if not ids:
        return None
    for trace in traces:
        if np.all(trace.w.values[ids] <= epsilon):
            return trace.epoch
    return None


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    """Mean and population std over the finite entries; (nan, nan) if none"""
    arr = np.asarray(list(values), dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        return float('nan'), float('nan')
    return float(arr.mean()), float(arr.std())


def padded_curves(curves: List[np.ndarray], epochs: int) -> np.ndarray:
    """(epochs, runs) matrix; runs that stopped early are padded with nan"""
    out = np.full((epochs, len(curves)), np.nan)
    for r, curve in enumerate(curves):
        out[:len(curve), r] = curve[:epochs]
    return out
