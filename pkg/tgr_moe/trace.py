"""
RoutingTrace binary files: per-epoch top-1 expert ids of a fixed probe set.

Layout (little-endian): magic "TGRT", version u32, num_layers u32,
probe_tokens u32, num_experts u32, then per snapshot an epoch u32 followed by
num_layers x probe_tokens u16 expert ids.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import structlog

from .errors import TraceFormatError

logger = structlog.get_logger()

TRACE_MAGIC = b"TGRT"
TRACE_VERSION = 1
HEADER = struct.Struct('<4sIIII')
EPOCH = struct.Struct('<I')
MAX_EXPERTS = 0xFFFF


@dataclass
class RoutingTrace:
    """In-memory view of a trace; assignments[s] is [num_layers x probe_tokens]."""
    num_layers: int
    probe_tokens: int
    num_experts: int
    epochs: List[int] = field(default_factory=list)
    assignments: List[np.ndarray] = field(default_factory=list)
    layer_ids: Optional[List[int]] = None

    def __post_init__(self):
        if self.layer_ids is None:
            self.layer_ids = list(range(1, self.num_layers + 1))

    def __len__(self) -> int:
        return len(self.epochs)

    def snapshot(self, epoch: int) -> np.ndarray:
        try:
            return self.assignments[self.epochs.index(epoch)]
        except ValueError:
            raise TraceFormatError(f"no snapshot for epoch {epoch}") from None

    def validate_snapshot(self, epoch: int, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.shape != (self.num_layers, self.probe_tokens):
            raise TraceFormatError(f"snapshot shape {ids.shape} != ({self.num_layers}, {self.probe_tokens})")
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_experts):
            raise TraceFormatError(f"expert id outside [0, {self.num_experts})")
        if self.epochs and epoch <= self.epochs[-1]:
            raise TraceFormatError(f"epoch {epoch} does not follow {self.epochs[-1]}")
        return ids.astype(np.uint16)

    def append(self, epoch: int, ids: np.ndarray) -> None:
        self.assignments.append(self.validate_snapshot(epoch, ids))
        self.epochs.append(int(epoch))


class RoutingTraceWriter:
    """Appends snapshots to a trace file as training proceeds."""

    def __init__(self, path, layer_ids: Sequence[int], probe_tokens: int, num_experts: int):
        if num_experts > MAX_EXPERTS:
            raise TraceFormatError(f"{num_experts} experts do not fit u16 ids")
        self.path = Path(path)
        self.trace = RoutingTrace(len(layer_ids), probe_tokens, num_experts, layer_ids=list(layer_ids))
        with open(self.path, 'wb') as f:
            f.write(HEADER.pack(TRACE_MAGIC, TRACE_VERSION, len(layer_ids), probe_tokens, num_experts))

    def append(self, epoch: int, ids: np.ndarray) -> None:
        ids = self.trace.validate_snapshot(epoch, ids)
        with open(self.path, 'ab') as f:
            f.write(EPOCH.pack(epoch))
            f.write(np.ascontiguousarray(ids, dtype='<u2').tobytes())
        self.trace.assignments.append(ids)
        self.trace.epochs.append(int(epoch))
        logger.debug("trace_snapshot", epoch=epoch, path=str(self.path))


def write_trace(trace: RoutingTrace, path) -> None:
    writer = RoutingTraceWriter(path, trace.layer_ids, trace.probe_tokens, trace.num_experts)
    for epoch, ids in zip(trace.epochs, trace.assignments):
        writer.append(epoch, ids)


def read_trace(path, layer_ids: Optional[Sequence[int]] = None) -> RoutingTrace:
    """
    Parse a trace file.

    Args:
        path: Trace file
        layer_ids: MoE block indices to attach (the file stores positions only)
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TraceFormatError(f"{path}: shorter than the trace header")
    magic, version, num_layers, probe_tokens, num_experts = HEADER.unpack_from(raw)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"{path}: bad trace magic {magic!r}")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {version}")
    if layer_ids is not None and len(layer_ids) != num_layers:
        raise TraceFormatError(f"{len(layer_ids)} layer ids for {num_layers} traced layers")

    trace = RoutingTrace(num_layers, probe_tokens, num_experts,
                         layer_ids=list(layer_ids) if layer_ids is not None else None)
    snapshot_bytes = EPOCH.size + 2 * num_layers * probe_tokens
    offset = HEADER.size
    while offset < len(raw):
        if len(raw) - offset < snapshot_bytes:
            raise TraceFormatError(f"{path}: truncated snapshot at byte {offset}")
        (epoch,) = EPOCH.unpack_from(raw, offset)
        ids = np.frombuffer(raw, dtype='<u2', count=num_layers * probe_tokens, offset=offset + EPOCH.size)
        trace.append(epoch, ids.reshape(num_layers, probe_tokens))
        offset += snapshot_bytes
    return trace
