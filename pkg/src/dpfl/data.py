"""Datasets, transfer pairs, non-IID client partitions and attack splits.

Everything here is a pure function of its inputs and an integer seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dpfl.errors import FormatError, ParameterError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ParameterError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ParameterError(
                f"label count {labels.shape[0]} does not match row count {features.shape[0]}"
            )
        if features.shape[0] == 0:
            raise ParameterError(f"dataset {self.name!r} is empty")
        k = self.num_classes if self.num_classes is not None else int(labels.max()) + 1
        if k < 2:
            raise ParameterError("a dataset needs at least 2 classes")
        if labels.min() < 0 or labels.max() >= k:
            raise ParameterError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(k))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], name or self.name, self.num_classes
        )


@dataclass(frozen=True)
class ClientPartition:
    assignments: tuple[np.ndarray, ...]
    total: int

    @property
    def client_sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments], dtype=np.int64)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def weights(self) -> np.ndarray:
        """Aggregation weights D_n / D."""
        return self.client_sizes / float(self.total)

    def owner(self) -> np.ndarray:
        """Map from sample index to owning client."""
        own = np.full(self.total, -1, dtype=np.int64)
        for n, idx in enumerate(self.assignments):
            own[idx] = n
        return own


@dataclass(frozen=True)
class TransferPair:
    source: LabeledDataset
    target: LabeledDataset
    shift_descriptor: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AttackSplit:
    """Members are (client, sample index) pairs; non-members index the test set."""

    members: np.ndarray  # shape (M, 2)
    non_members: np.ndarray  # shape (M',)

    @property
    def member_clients(self) -> np.ndarray:
        return self.members[:, 0]

    @property
    def member_indices(self) -> np.ndarray:
        return self.members[:, 1]


def _check_count(name: str, value, minimum: int) -> int:
    if int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def generate_mixture(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    seed: int,
    name: str = "mixture",
) -> LabeledDataset:
    """Sample a labelled isotropic Gaussian mixture.

    When ``num_classes <= dim`` the class means are the vertices of a regular
    simplex with edge length ``separation`` (scaled basis vectors, then a seeded
    random rotation). Otherwise means are random Gaussian directions scaled by
    ``separation``. Within-class covariance is the identity.
    """
    num_classes = _check_count("num_classes", num_classes, 2)
    dim = _check_count("dim", dim, 2)
    samples_per_class = _check_count("samples_per_class", samples_per_class, 1)
    if not np.isfinite(separation) or separation < 0:
        raise ParameterError(f"separation must be >= 0, got {separation!r}")

    rng = np.random.default_rng(seed)
    if num_classes <= dim:
        basis = np.zeros((num_classes, dim))
        basis[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        means = basis @ q.T
    else:
        means = separation * rng.standard_normal((num_classes, dim))

    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], name, num_classes)


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    chunk = buf[offset : offset + count]
    if len(chunk) != count:
        raise FormatError(f"{what}: truncated file, expected {count} bytes at offset {offset}")
    return chunk


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic,) = struct.unpack(">I", _read_exact(buf, 0, 4, f"{what} magic"))
    if magic != expected_magic:
        raise FormatError(f"{what} magic: expected 0x{expected_magic:08X}, got 0x{magic:08X}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, f"{what} dimension sizes"))
    count = int(np.prod(dims))
    offset = 4 + 4 * ndim
    payload = _read_exact(buf, offset, count, f"{what} data")
    if len(buf) != offset + count:
        raise FormatError(f"{what} data: {len(buf) - offset - count} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx", num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (FMNIST layout); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC, "images")
    labels = _read_idx(labels_path, LABEL_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), name, num_classes)


def write_idx(dataset: LabeledDataset, images_path, labels_path, image_shape: Sequence[int] | None = None) -> None:
    """Write a dataset as IDX files. Features are clipped to [0, 1] and quantized to bytes."""
    shape = tuple(image_shape) if image_shape is not None else (dataset.dim,)
    if int(np.prod(shape)) != dataset.dim:
        raise ParameterError(f"image shape {shape} does not hold {dataset.dim} features")
    if dataset.labels.max() > 255:
        raise ParameterError("IDX labels are single bytes")
    pixels = np.rint(np.clip(dataset.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = len(dataset)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", 0x00000800 | (1 + len(shape))))
        fh.write(struct.pack(f">{1 + len(shape)}I", n, *shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _plane_rotation(dim: int, angle: float) -> np.ndarray:
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        rot[i, i], rot[i, i + 1] = c, -s
        rot[i + 1, i], rot[i + 1, i + 1] = s, c
    return rot


def make_transfer_pair(base: LabeledDataset, shift_kind: str, magnitude: float, seed: int) -> TransferPair:
    """Build a source/target pair with a controllable domain gap.

    ``affine``: x -> A x + b with A = I + magnitude * G / sqrt(dim) and
    b = magnitude * h, where G and h are seeded standard normals.
    ``rotate``: rotate every coordinate plane (0, 1), (2, 3), ... by
    ``magnitude`` radians.
    ``class_split``: the source keeps classes below K/2, the target holds the
    remaining classes relabelled from zero; ``magnitude`` is unused.
    """
    if magnitude < 0 or not np.isfinite(magnitude):
        raise ParameterError(f"magnitude must be >= 0, got {magnitude!r}")
    x, dim = base.features, base.dim
    if shift_kind == "affine":
        rng = np.random.default_rng(seed)
        a = np.eye(dim) + magnitude * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        b = magnitude * rng.standard_normal(dim)
        if magnitude == 0:
            target_x = x.copy()
        else:
            target_x = x @ a.T + b
        target = LabeledDataset(target_x, base.labels, base.name + "-affine", base.num_classes)
        desc = {"kind": "affine", "magnitude": float(magnitude), "seed": int(seed)}
        return TransferPair(base, target, desc)
    if shift_kind == "rotate":
        target_x = x.copy() if magnitude == 0 else x @ _plane_rotation(dim, magnitude).T
        target = LabeledDataset(target_x, base.labels, base.name + "-rotate", base.num_classes)
        desc = {"kind": "rotate", "magnitude": float(magnitude), "seed": int(seed)}
        return TransferPair(base, target, desc)
    if shift_kind == "class_split":
        k = base.num_classes
        if k < 4:
            raise ParameterError(f"class_split needs at least 4 classes, got {k}")
        half = k // 2
        low = base.labels < half
        source = LabeledDataset(x[low], base.labels[low], base.name + "-src", half)
        target = LabeledDataset(
            x[~low], base.labels[~low] - half, base.name + "-tgt", k - half
        )
        desc = {"kind": "class_split", "magnitude": float(magnitude), "seed": int(seed)}
        return TransferPair(source, target, desc)
    raise ParameterError(f"unknown shift kind {shift_kind!r}")


def dirichlet_partition(dataset: LabeledDataset, num_clients: int, alpha: float, seed: int) -> ClientPartition:
    """Class-wise Dirichlet split of sample indices across clients.

    For every class, client shares are drawn from Dir(alpha * 1) and the
    class's shuffled indices are cut at the cumulative shares. Clients left
    empty then take one sample at a time from the currently largest client.
    """
    num_clients = _check_count("num_clients", num_clients, 1)
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha!r}")
    if len(dataset) < num_clients:
        raise ParameterError(
            f"cannot give {num_clients} clients a sample each from {len(dataset)} samples"
        )
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(num_clients, alpha))
        cuts = np.floor(np.cumsum(shares)[:-1] * idx.size).astype(np.int64)
        for n, part in enumerate(np.split(idx, cuts)):
            buckets[n].extend(part.tolist())

    sizes = [len(b) for b in buckets]
    for n in range(num_clients):
        while not buckets[n]:
            donor = int(np.argmax(sizes))
            buckets[n].append(buckets[donor].pop())
            sizes[donor] -= 1
            sizes[n] += 1

    assignments = tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets)
    return ClientPartition(assignments, len(dataset))


def class_proportion_deviation(dataset: LabeledDataset, partition: ClientPartition) -> np.ndarray:
    """Per-client absolute deviation of class proportions from the global ones.

    Returns an (N, K) array.
    """
    k = dataset.num_classes
    overall = np.bincount(dataset.labels, minlength=k) / len(dataset)
    rows = []
    for idx in partition.assignments:
        local = np.bincount(dataset.labels[idx], minlength=k) / len(idx)
        rows.append(np.abs(local - overall))
    return np.array(rows)


def build_attack_split(
    partition: ClientPartition,
    per_client: int,
    test_set: LabeledDataset,
    non_member_count: int,
    seed: int,
) -> AttackSplit:
    per_client = _check_count("per_client", per_client, 0)
    non_member_count = _check_count("non_member_count", non_member_count, 0)
    if per_client > partition.client_sizes.min():
        raise ParameterError(
            f"per_client={per_client} exceeds the smallest client ({partition.client_sizes.min()})"
        )
    if non_member_count > len(test_set):
        raise ParameterError(
            f"non_member_count={non_member_count} exceeds the test set size {len(test_set)}"
        )
    rng = np.random.default_rng(seed)
    members = []
    for n, idx in enumerate(partition.assignments):
        chosen = np.sort(rng.choice(idx, size=per_client, replace=False))
        members.extend((n, int(i)) for i in chosen)
    members_arr = np.array(members, dtype=np.int64).reshape(-1, 2)
    non_members = np.sort(rng.choice(len(test_set), size=non_member_count, replace=False))
    return AttackSplit(members_arr, non_members.astype(np.int64))
