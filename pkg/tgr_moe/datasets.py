"""
Datasets: synthetic cluster-token generation, binary shards, IDX image ingestion,
patchification and deterministic batching.
"""

import gzip
import json
import math
import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np
import structlog

from .errors import DatasetError, IdxFormatError
from .models import SyntheticSpec
from .utils import log_duration

logger = structlog.get_logger()

SHARD_MAGIC = b"TGRD"
SHARD_VERSION = 1
SHARD_HEADER = struct.Struct('<4sIIIII')

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MAX_PROTOTYPE_TRIES = 10000


@dataclass
class TokenBatch:
    tokens: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TokenDataset:
    """Token sequences [S x N x D_in] with integer labels."""
    tokens: np.ndarray
    labels: np.ndarray
    num_classes: int
    sample_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)
        if self.tokens.ndim != 3 or len(self.tokens) != len(self.labels):
            raise DatasetError(f"tokens {self.tokens.shape} and labels {self.labels.shape} do not line up")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def tokens_per_sample(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[2]

    def subset(self, indices) -> "TokenDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return TokenDataset(self.tokens[indices], self.labels[indices], self.num_classes, self.sample_ids[indices])


@dataclass
class DatasetSplits:
    train: TokenDataset
    val: TokenDataset
    spec: Dict = field(default_factory=dict)


# --- synthetic generation ----------------------------------------------------

def make_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Unit-norm prototypes with pairwise angle >= spec.min_angle_deg, by rejection.

    Raises:
        DatasetError: when a prototype cannot be placed after the maximum number of draws
    """
    max_cos = math.cos(math.radians(spec.min_angle_deg))
    prototypes = []
    for m in range(spec.num_components):
        for _ in range(MAX_PROTOTYPE_TRIES):
            candidate = rng.normal(size=spec.token_dim)
            candidate /= np.linalg.norm(candidate)
            if all(float(candidate @ p) <= max_cos for p in prototypes):
                prototypes.append(candidate)
                break
        else:
            raise DatasetError(
                f"cannot place {spec.num_components} prototypes {spec.min_angle_deg} degrees apart "
                f"in {spec.token_dim} dimensions (stuck at prototype {m})")
    return np.stack(prototypes)


def _majority_components(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n, c, m = spec.tokens_per_sample, spec.num_classes, spec.num_components
    own = np.array([k for k in range(m) if k % c == label])
    others = np.array([k for k in range(m) if k % c != label])
    n_own = max(1, int(round(3 * n / 8)))
    while True:
        ids = rng.choice(own, size=n_own)
        rest = rng.choice(others, size=n - n_own) if n > n_own and others.size else np.array([], dtype=np.int64)
        class_counts = np.bincount(rest % c, minlength=c)
        if class_counts.max(initial=0) < n_own:
            return rng.permutation(np.concatenate([ids, rest]).astype(np.int64))


def _pair_parity_components(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n, c, m = spec.tokens_per_sample, spec.num_classes, spec.num_components
    pairs = [(a, b) for a in range(m) for b in range(m) if a != b and (a + b) % c == label]
    if not pairs or n < 7:
        raise DatasetError(f"component-pair-parity cannot realise label {label} with M={m}, N={n}")
    first, second = pairs[rng.integers(len(pairs))]
    pool = np.array([k for k in range(m) if k not in (first, second)])
    while True:
        rest = rng.choice(pool, size=n - 7)
        if np.bincount(rest, minlength=m).max(initial=0) < 3:
            ids = np.concatenate([[first] * 4, [second] * 3, rest])
            return rng.permutation(ids.astype(np.int64))


def _draw_split(count: int, prototypes: np.ndarray, spec: SyntheticSpec,
                rng: np.random.Generator) -> Tuple[TokenDataset, np.ndarray]:
    labels = rng.permutation(np.arange(count) % spec.num_classes)
    draw = _majority_components if spec.label_rule == "majority-component" else _pair_parity_components
    components = np.stack([draw(int(y), spec, rng) for y in labels])
    noise = rng.normal(0.0, spec.noise_sigma, size=(count, spec.tokens_per_sample, spec.token_dim))
    tokens = prototypes[components] + noise
    # shards store float32
    tokens = tokens.astype(np.float32).astype(np.float64)
    return TokenDataset(tokens, labels, spec.num_classes), components


def build_synthetic(spec: SyntheticSpec) -> Tuple[DatasetSplits, np.ndarray]:
    """Generate train/val splits in memory; returns (splits, prototypes)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    prototypes = make_prototypes(spec, rng)
    train, _ = _draw_split(spec.samples_train, prototypes, spec, rng)
    val, _ = _draw_split(spec.samples_val, prototypes, spec, rng)
    return DatasetSplits(train=train, val=val, spec=spec.to_dict()), prototypes


@log_duration("synthetic_dataset_generated")
def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetSplits:
    """
    Generate a synthetic dataset and write train/val shards plus a spec echo.

    Args:
        spec: Dataset description
        out_dir: Directory receiving train.tgrd, val.tgrd, spec.json, prototypes.npy
    """
    splits, prototypes = build_synthetic(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_shard(out_dir / "train.tgrd", splits.train)
    write_shard(out_dir / "val.tgrd", splits.val)
    (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n", encoding='utf-8')
    np.save(out_dir / "prototypes.npy", prototypes)
    logger.info("dataset_written", out_dir=str(out_dir), train=len(splits.train), val=len(splits.val),
                label_rule=spec.label_rule)
    return splits


# --- shards --------------------------------------------------------------------

def write_shard(path, dataset: TokenDataset) -> None:
    samples, tokens, dim = dataset.tokens.shape
    with open(path, 'wb') as f:
        f.write(SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, samples, tokens, dim, dataset.num_classes))
        f.write(np.ascontiguousarray(dataset.tokens, dtype='<f4').tobytes())
        f.write(np.ascontiguousarray(dataset.labels, dtype='<u2').tobytes())


def read_shard(path) -> TokenDataset:
    raw = Path(path).read_bytes()
    if len(raw) < SHARD_HEADER.size:
        raise DatasetError(f"{path}: shorter than the shard header")
    magic, version, samples, tokens, dim, classes = SHARD_HEADER.unpack_from(raw)
    if magic != SHARD_MAGIC:
        raise DatasetError(f"{path}: bad shard magic {magic!r}")
    if version != SHARD_VERSION:
        raise DatasetError(f"{path}: unsupported shard version {version}")
    n_values = samples * tokens * dim
    expected = SHARD_HEADER.size + 4 * n_values + 2 * samples
    if len(raw) != expected:
        raise DatasetError(f"{path}: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype='<f4', count=n_values, offset=SHARD_HEADER.size)
    labels = np.frombuffer(raw, dtype='<u2', count=samples, offset=SHARD_HEADER.size + 4 * n_values)
    return TokenDataset(values.astype(np.float64).reshape(samples, tokens, dim), labels.astype(np.int64), classes)


def load_dataset_dir(path) -> DatasetSplits:
    """Read train.tgrd / val.tgrd (and spec.json when present) from a directory."""
    path = Path(path)
    for name in ("train.tgrd", "val.tgrd"):
        if not (path / name).is_file():
            raise DatasetError(f"missing {name} in {path}")
    spec_path = path / "spec.json"
    spec = json.loads(spec_path.read_text(encoding='utf-8')) if spec_path.is_file() else {}
    return DatasetSplits(train=read_shard(path / "train.tgrd"), val=read_shard(path / "val.tgrd"), spec=spec)


# --- IDX ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'rb') as f:
        return f.read()


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parse an IDX image/label file pair (optionally gzipped).

    Returns:
        (images [B x H x W] scaled to [0, 1], labels [B] int64)

    Raises:
        IdxFormatError: bad magic, count mismatch between the files, truncated payload
    """
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)
    if len(image_bytes) < 16 or len(label_bytes) < 8:
        raise IdxFormatError("IDX header truncated")

    magic, count, rows, cols = struct.unpack('>IIII', image_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    label_magic, label_count = struct.unpack('>II', label_bytes[:8])
    if label_magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad label magic 0x{label_magic:08x}")
    if count != label_count:
        raise IdxFormatError(f"{count} images but {label_count} labels")
    if len(image_bytes) - 16 < count * rows * cols:
        raise IdxFormatError(f"{images_path}: pixel payload truncated")
    if len(label_bytes) - 8 < count:
        raise IdxFormatError(f"{labels_path}: label payload truncated")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    return images, labels


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping row-major patches, each flattened row-major: [B x N x patch^2]."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise DatasetError(f"patchify expects [B x H x W], got shape {images.shape}")
    b, h, w = images.shape
    if patch <= 0 or h % patch or w % patch:
        raise DatasetError(f"patch size {patch} does not divide {h}x{w}")
    grid = images.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return grid.reshape(b, (h // patch) * (w // patch), patch * patch)


def idx_dataset(images_path, labels_path, patch: int, num_classes: Optional[int] = None) -> TokenDataset:
    images, labels = load_idx(images_path, labels_path)
    classes = num_classes or (int(labels.max()) + 1 if labels.size else 1)
    return TokenDataset(patchify(images, patch), labels, classes)


# --- batching ----------------------------------------------------------------------

def batch_iterator(dataset: TokenDataset, batch_size: int, seed: int, shuffle: bool = True,
                   epoch: int = 0) -> Iterator[TokenBatch]:
    """Batches in a (seed, epoch)-determined order; the final partial batch is kept."""
    if batch_size <= 0:
        raise DatasetError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield TokenBatch(dataset.tokens[idx], dataset.labels[idx], dataset.sample_ids[idx])


_END = object()


def prefetch_batches(batches: Iterable[TokenBatch], depth: int = 2) -> Iterator[TokenBatch]:
    """Produce batches on a background thread through a bounded queue of `depth` items."""
    if depth <= 0:
        yield from batches
        return

    buffer: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def producer():
        try:
            for batch in batches:
                while not stop.is_set():
                    try:
                        buffer.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            buffer.put(_END)
        except BaseException as e:  # handed to the consumer
            buffer.put(e)

    worker = threading.Thread(target=producer, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _END:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=1.0)
