"""
Routing analytics: agreement across training, teacher/student router agreement,
normalized routing entropy and expert utilization.
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import structlog

from .errors import TraceFormatError
from .trace import RoutingTrace
from .utils import safe_divide

logger = structlog.get_logger()

DEFAULT_STRIDE = 5
DEFAULT_THRESHOLD = 0.7


def token_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of positions where two assignment arrays hold the same expert."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise TraceFormatError(f"assignment shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 1.0
    return float(np.mean(a == b))


def set_overlap_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Mean |A_i & B_i| / K over tokens for two [tokens x K] top-K index arrays."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise TraceFormatError(f"top-K arrays must share a [tokens x K] shape: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return 1.0
    k = a.shape[1]
    overlap = (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)
    return float(np.mean(overlap / k))


def _layer_mean_agreement(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean([token_agreement(x[i], y[i]) for i in range(x.shape[0])]))


def agreement_with_final(trace: RoutingTrace) -> Dict[int, float]:
    """Per epoch, the layer-averaged fraction of probe tokens routed as in the final snapshot."""
    if not len(trace):
        raise TraceFormatError("trace has no snapshots")
    final = trace.assignments[-1]
    return {epoch: _layer_mean_agreement(ids, final) for epoch, ids in zip(trace.epochs, trace.assignments)}


def consecutive_agreement(trace: RoutingTrace, stride_epochs: int = DEFAULT_STRIDE) -> Dict[int, float]:
    """
    Agreement between snapshots e and e + stride for every such pair present,
    keyed by the later epoch.
    """
    if stride_epochs <= 0:
        raise ValueError(f"stride must be positive, got {stride_epochs}")
    if not len(trace):
        raise TraceFormatError("trace has no snapshots")
    by_epoch = dict(zip(trace.epochs, trace.assignments))
    series = {}
    for epoch in trace.epochs:
        later = epoch + stride_epochs
        if later in by_epoch:
            series[later] = _layer_mean_agreement(by_epoch[epoch], by_epoch[later])
    return series


def mean_consecutive_agreement(trace: RoutingTrace, stride_epochs: int = DEFAULT_STRIDE) -> float:
    series = consecutive_agreement(trace, stride_epochs)
    return float(np.mean(list(series.values()))) if series else float('nan')


def epochs_to_threshold(series: Mapping[int, float], threshold: float = DEFAULT_THRESHOLD) -> Optional[int]:
    """First epoch whose value reaches threshold, or None."""
    for epoch in sorted(series):
        if series[epoch] >= threshold:
            return epoch
    return None


def layer_agreement(a: Mapping[int, np.ndarray], b: Mapping[int, np.ndarray]) -> Dict[int, float]:
    """Per-layer top-1 agreement between two routings of the same probe tokens."""
    if set(a) != set(b):
        raise TraceFormatError(f"layer sets differ: {sorted(a)} vs {sorted(b)}")
    return {layer: token_agreement(a[layer], b[layer]) for layer in sorted(a)}


def teacher_student_agreement(student_top1: Mapping[int, np.ndarray],
                              teacher_top1: Mapping[int, np.ndarray]) -> Dict[int, float]:
    """Per MoE layer, fraction of probe tokens whose argmax expert is the same for both routers."""
    return layer_agreement(student_top1, teacher_top1)


def checkpoint_agreement(before_top1: Mapping[int, np.ndarray],
                         after_top1: Mapping[int, np.ndarray]) -> Dict[int, float]:
    """Routing preservation between two checkpoints evaluated on one probe set."""
    return layer_agreement(before_top1, after_top1)


def checkpoint_set_overlap(before_topk: Mapping[int, np.ndarray],
                           after_topk: Mapping[int, np.ndarray]) -> Dict[int, float]:
    """Per-layer top-K set overlap between two checkpoints; equals top-1 agreement when K = 1."""
    if set(before_topk) != set(after_topk):
        raise TraceFormatError(f"layer sets differ: {sorted(before_topk)} vs {sorted(after_topk)}")
    return {layer: set_overlap_agreement(before_topk[layer], after_topk[layer]) for layer in sorted(before_topk)}


def _normalized_entropy(q: np.ndarray, num_experts: int) -> float:
    if num_experts == 1:
        return 1.0
    nz = q[q > 0]
    entropy = -float(np.sum(nz * np.log(nz)))
    return min(1.0, max(0.0, entropy / math.log(num_experts)))


def normalized_routing_entropy(assignments: np.ndarray, num_experts: int) -> float:
    """H(q) / ln E for the empirical top-1 selection frequencies q; 1.0 when E = 1."""
    assignments = np.asarray(assignments).reshape(-1)
    counts = np.bincount(assignments.astype(np.int64), minlength=num_experts)
    if counts.size > num_experts:
        raise TraceFormatError(f"expert id >= {num_experts} in assignments")
    q = counts / counts.sum() if counts.sum() else counts.astype(float)
    return _normalized_entropy(q, num_experts)


def normalized_probability_entropy(probs: np.ndarray) -> float:
    """Mean-probability variant: entropy of the importance vector divided by ln E."""
    probs = np.asarray(probs)
    return _normalized_entropy(probs.mean(axis=0), probs.shape[-1])


@dataclass
class UtilizationReport:
    counts: np.ndarray
    importance: np.ndarray

    @property
    def total_tokens(self) -> int:
        return int(self.counts.sum())


def utilization_histogram(routings: Iterable, num_experts: Optional[int] = None) -> UtilizationReport:
    """
    Top-1 selection counts and mean-probability importance over a stream of routings.

    Each item is a RouterOutput or a (top1 ids, probability matrix) pair.
    """
    counts = None
    prob_sum = None
    tokens = 0
    for item in routings:
        if isinstance(item, tuple):
            top1, probs = item
        else:
            top1, probs = item.top1, item.selection_probs.data
        probs = np.asarray(probs)
        size = num_experts or probs.shape[-1]
        if counts is None:
            counts = np.zeros(size, dtype=np.int64)
            prob_sum = np.zeros(size)
        counts += np.bincount(np.asarray(top1, dtype=np.int64), minlength=size)[:size]
        prob_sum += probs.sum(axis=0)
        tokens += probs.shape[0]
    if counts is None:
        size = num_experts or 0
        return UtilizationReport(np.zeros(size, dtype=np.int64), np.zeros(size))
    return UtilizationReport(counts=counts, importance=prob_sum / max(tokens, 1))


def trace_summary(trace: RoutingTrace, stride_epochs: int = DEFAULT_STRIDE,
                  threshold: float = DEFAULT_THRESHOLD) -> Dict[str, object]:
    """Headline stability numbers of one trace."""
    final_series = agreement_with_final(trace)
    return {
        'snapshots': len(trace),
        'mean_consecutive_agreement': mean_consecutive_agreement(trace, stride_epochs),
        'epochs_to_threshold': epochs_to_threshold(final_series, threshold),
        'final_normalized_entropy': {
            str(layer): normalized_routing_entropy(trace.assignments[-1][i], trace.num_experts)
            for i, layer in enumerate(trace.layer_ids)
        },
        'mean_agreement_with_final': safe_divide(sum(final_series.values()), len(final_series)),
    }
