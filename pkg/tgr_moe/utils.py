"""
Utility functions for the TGR-MoE lab.
"""

import functools
import hashlib
import time
from typing import Callable, Any, Dict, Mapping

import numpy as np
import structlog

logger = structlog.get_logger()


def log_duration(event: str) -> Callable:
    """
    Decorator that logs the wall-clock duration of the wrapped call.

    Args:
        event: Event name used for the log line
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                elapsed = time.perf_counter() - start
                logger.info(event, function=func.__name__, seconds=round(elapsed, 3))

        return wrapper
    return decorator


def param_checksum(params: Mapping[str, Any]) -> str:
    """
    SHA-256 over the float64 little-endian bytes of every parameter, in name order.

    Args:
        params: Mapping of parameter name to Tensor or ndarray

    Returns:
        Hex digest string
    """
    digest = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        data = getattr(value, 'data', value)
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(data, dtype='<f8').tobytes())
    return digest.hexdigest()


def normalize_min_max(values: list) -> list:
    """
    Scale values onto [0, 1]. A constant list maps to the midpoint.

    Used for chart coordinates.
    """
    if not values:
        return []
    low, high = min(values), max(values)
    if low == high:
        return [0.5] * len(values)
    span = high - low
    return [(v - low) / span for v in values]


def safe_divide(numerator: float, denominator: float, default: float = 0.0) -> float:
    """numerator / denominator, or default when the denominator is zero."""
    return numerator / denominator if denominator != 0 else default


def count_parameters(params: Dict[str, Any]) -> int:
    """Total number of scalar entries across a parameter set."""
    return int(sum(np.size(getattr(v, 'data', v)) for v in params.values()))
