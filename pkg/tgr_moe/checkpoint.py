"""
Checkpoint persistence: a directory holding manifest.json and params.bin.

params.bin is every tensor as little-endian float64, concatenated in
lexicographic name order; the manifest lists name, shape and byte offset of
each tensor next to a config echo.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import structlog

from .errors import CheckpointError
from .utils import param_checksum

logger = structlog.get_logger()

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
FORMAT_VERSION = 1
DTYPE = np.dtype('<f8')


@dataclass
class CheckpointState:
    """Named float64 arrays plus the metadata recorded in the manifest."""
    params: Dict[str, np.ndarray]
    config: Dict[str, Any]
    kind: str = "student"
    frozen: bool = False
    provenance: Optional[Dict[str, Any]] = None
    metrics: Optional[str] = None
    epoch: Optional[int] = None

    def checksum(self) -> str:
        return param_checksum(self.params)


def _as_array(value) -> np.ndarray:
    return np.asarray(getattr(value, 'data', value), dtype=np.float64)


def save_checkpoint(state: CheckpointState, path) -> Path:
    """
    Write state to directory `path` (created if needed).

    Returns:
        The checkpoint directory
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    params = {name: _as_array(value) for name, value in state.params.items()}
    tensors = []
    offset = 0
    with open(path / BLOB_NAME, 'wb') as blob:
        for name in sorted(params):
            data = np.ascontiguousarray(params[name], dtype=DTYPE)
            tensors.append({'name': name, 'shape': list(data.shape), 'offset': offset})
            blob.write(data.tobytes())
            offset += data.nbytes

    manifest = {
        'format_version': FORMAT_VERSION,
        'kind': state.kind,
        'frozen': state.frozen,
        'config': state.config,
        'provenance': state.provenance,
        'metrics': state.metrics,
        'epoch': state.epoch,
        'tensors': tensors,
        'total_bytes': offset,
        'checksum': param_checksum(params),
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding='utf-8')
    logger.info("checkpoint_saved", path=str(path), tensors=len(tensors), bytes=offset, kind=state.kind)
    return path


def read_manifest(path) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {e}") from e
    if manifest.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return manifest


def load_checkpoint(path, expected_config: Optional[Mapping[str, Any]] = None,
                    config_key: str = 'model') -> CheckpointState:
    """
    Load a checkpoint directory.

    Args:
        path: Checkpoint directory
        expected_config: When given, must equal manifest['config'][config_key]
        config_key: Section of the config echo compared against expected_config

    Raises:
        CheckpointError: missing files, truncated or oversized blob, config mismatch,
            checksum mismatch
    """
    path = Path(path)
    manifest = read_manifest(path)
    blob_path = path / BLOB_NAME
    if not blob_path.is_file():
        raise CheckpointError(f"no {BLOB_NAME} in {path}")

    size = os.path.getsize(blob_path)
    if size != manifest['total_bytes']:
        raise CheckpointError(
            f"{blob_path} holds {size} bytes but the manifest declares {manifest['total_bytes']} (truncated or corrupt)")

    if expected_config is not None:
        recorded = (manifest.get('config') or {}).get(config_key)
        if recorded != dict(expected_config):
            raise CheckpointError(f"checkpoint {config_key} config does not match the requested config")

    raw = blob_path.read_bytes()
    params = {}
    for entry in manifest['tensors']:
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        end = entry['offset'] + count * DTYPE.itemsize
        if end > len(raw):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of {blob_path}")
        values = np.frombuffer(raw, dtype=DTYPE, count=count, offset=entry['offset'])
        params[entry['name']] = values.astype(np.float64).reshape(entry['shape'])

    if param_checksum(params) != manifest['checksum']:
        raise CheckpointError(f"parameter checksum mismatch in {path}")

    return CheckpointState(
        params=params,
        config=manifest.get('config') or {},
        kind=manifest.get('kind', 'student'),
        frozen=bool(manifest.get('frozen', False)),
        provenance=manifest.get('provenance'),
        metrics=manifest.get('metrics'),
        epoch=manifest.get('epoch'),
    )
