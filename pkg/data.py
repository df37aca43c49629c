"""
Datasets, splits and non-IID client partitioning
"""

import gzip
import logging
import math
import struct
from dataclasses import dataclass
from typing import List, Set, Tuple

import numpy as np

from utils import ConfigError, DomainError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class LabeledDataset:
    """Feature matrix with integer class labels in [0, num_classes)"""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DomainError("features must be (m, dim) and labels (m,)")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError("labels out of range")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, indices) -> 'LabeledDataset':
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """Concentration-q partition of the training split over n_clients in L groups"""
    n_clients: int
    q: float
    num_groups: int
    seed: int = 0

    def __post_init__(self):
        if self.num_groups < 2:
            raise ConfigError("at least two label groups are required", 'partition', 'num_groups')
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must lie in (0, 1], got {self.q}", 'partition', 'q')
        if self.n_clients < self.num_groups:
            raise ConfigError(
                f"{self.n_clients} clients cannot cover {self.num_groups} groups",
                'partition', 'n_clients')


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray


def _open_idx(path: str):
    return gzip.open(path, 'rb') if str(path).endswith('.gz') else open(path, 'rb')


def _read_idx(path: str, expected_magic: int, ndims: int) -> np.ndarray:
    with _open_idx(path) as f:
        raw = f.read()
    header_size = 4 + 4 * ndims
    if len(raw) < header_size:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic = struct.unpack('>I', raw[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    dims = struct.unpack('>' + 'I' * ndims, raw[4:header_size])
    expected = int(np.prod(dims))
    body = raw[header_size:]
    if len(body) < expected:
        raise IdxTruncatedError(f"{path}: {len(body)} data bytes, header announces {expected}")
    return np.frombuffer(body[:expected], dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> LabeledDataset:
    """Load an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]"""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    logger.info(f"Loaded {features.shape[0]} IDX examples of dimension {features.shape[1]}")
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def _class_means(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim >= num_classes:
        # orthonormal means, pairwise distance √2
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        return q.T
    if dim == 1:
        return np.linspace(-1.0, 1.0, num_classes)[:, None]
    # evenly spaced on a randomly rotated unit circle inside the first two axes
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes + rng.uniform(0, 2 * np.pi)
    means = np.zeros((num_classes, dim))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    return means


def synthetic_blobs(num_classes: int, dim: int, per_class: int, spread: float, seed: int) -> LabeledDataset:
    """Gaussian clusters around unit-norm class means with isotropic noise"""
    if num_classes < 2 or dim < 1 or per_class < 1:
        raise DomainError("need num_classes ≥ 2, dim ≥ 1 and per_class ≥ 1")
    if spread < 0:
        raise DomainError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def split_indices_80_10_10(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise DomainError(f"need at least 10 examples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    first, second = (8 * n) // 10, (9 * n) // 10
    return order[:first], order[first:second], order[second:]


def split_80_10_10(ds: LabeledDataset, seed: int) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded shuffle, then train / validation / test at the 80% and 90% marks"""
    train, validation, test = split_indices_80_10_10(len(ds), seed)
    return ds.subset(train), ds.subset(validation), ds.subset(test)


def client_groups(spec: PartitionSpec) -> List[np.ndarray]:
    """Contiguous client ids per group; group sizes differ by at most one"""
    return np.array_split(np.arange(spec.n_clients), spec.num_groups)


def partition_concentration(train: LabeledDataset, spec: PartitionSpec) -> List[ClientShard]:
    """Route label l to group l with probability q, else uniformly to another group;
    deal each group's examples round-robin over its clients after a seeded shuffle"""
    if spec.num_groups != train.num_classes:
        raise ConfigError(
            f"partition uses {spec.num_groups} groups but the data has {train.num_classes} labels",
            'partition', 'num_groups')
    rng = np.random.default_rng(spec.seed)
    L = spec.num_groups
    labels = train.labels
    keep = rng.random(labels.size) < spec.q
    other = rng.integers(0, L - 1, size=labels.size)
    other = other + (other >= labels)
    group_of_example = np.where(keep, labels, other)

    shards: List[ClientShard] = []
    for g, clients in enumerate(client_groups(spec)):
        members = np.flatnonzero(group_of_example == g)
        members = members[rng.permutation(members.size)]
        for j, client_id in enumerate(clients):
            shards.append(ClientShard(int(client_id), np.sort(members[j::clients.size])))
    shards.sort(key=lambda shard: shard.client_id)

    sizes = [shard.indices.size for shard in shards]
    logger.debug(f"Partitioned {labels.size} examples over {spec.n_clients} clients "
                 f"(min {min(sizes)}, max {max(sizes)})")
    return shards


def select_malicious_group_oriented(spec: PartitionSpec, n_malicious: int, seed: int) -> Set[int]:
    """Fill whole groups with attackers: draw ⌈n_malicious / clients_per_group⌉
    random groups and take their clients in order until the quota is met"""
    if not 0 <= n_malicious <= spec.n_clients:
        raise DomainError(f"n_malicious must lie in [0, {spec.n_clients}], got {n_malicious}")
    if n_malicious == 0:
        return set()
    groups = client_groups(spec)
    per_group = math.ceil(spec.n_clients / spec.num_groups)
    n_gm = math.ceil(n_malicious / per_group)
    order = list(np.random.default_rng(seed).permutation(len(groups)))

    chosen: List[int] = []
    picked_groups = 0
    # uneven groups can need more than n_gm groups; keep drawing in the same order
    for g in order:
        if len(chosen) >= n_malicious:
            break
        take = min(groups[g].size, n_malicious - len(chosen))
        chosen.extend(int(c) for c in groups[g][:take])
        picked_groups += 1
    logger.debug(f"Selected {len(chosen)} malicious clients from {picked_groups} groups (n_gm = {n_gm})")
    return set(chosen)


def select_malicious_random(n_clients: int, n_malicious: int, seed: int) -> Set[int]:
    """Uniformly random attackers, the easy case group-oriented selection is compared against"""
    if not 0 <= n_malicious <= n_clients:
        raise DomainError(f"n_malicious must lie in [0, {n_clients}], got {n_malicious}")
    chosen = np.random.default_rng(seed).choice(n_clients, size=n_malicious, replace=False)
    return {int(c) for c in chosen}


def partition_label_histogram(train: LabeledDataset, shards: List[ClientShard]) -> np.ndarray:
    """(n_clients, num_classes) label counts per shard"""
    counts = np.zeros((len(shards), train.num_classes), dtype=np.int64)
    for shard in shards:
        counts[shard.client_id] = np.bincount(train.labels[shard.indices], minlength=train.num_classes)
    return counts
