"""
Datasets for the simulator: IDX / CSV ingestion, synthetic Gaussian blobs, and
the archetype partitioner that hands each simulated device a label-skewed
shard with its own validation split.
"""
import csv
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_VALIDATION_FRACTION = 0.2


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed"""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class PartitionError(ValueError):
    """The partition request cannot be satisfied from the source dataset"""


def _readonly(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix (examples x features) with integer labels in [0, num_classes)"""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int = None

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels).reshape(-1)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        num_classes = int(num_classes)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        object.__setattr__(self, 'features', _readonly(features))
        object.__setattr__(self, 'labels', _readonly(labels))
        object.__setattr__(self, 'num_classes', num_classes)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def feature_dim(self):
        return int(self.features.shape[1])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)

    def label_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def indices_with_labels(self, label_set):
        return np.flatnonzero(np.isin(self.labels, sorted(label_set)))


@dataclass(frozen=True)
class ArchetypeSpec:
    """Labels a device over-represents, and by how much (bias 1.0 = only these labels)"""
    label_set: frozenset
    bias: float = 1.0

    def __post_init__(self):
        labels = frozenset(int(label) for label in self.label_set)
        if not labels:
            raise ValueError("ArchetypeSpec.label_set must not be empty")
        if min(labels) < 0:
            raise ValueError("ArchetypeSpec labels must be >= 0")
        if not 0.0 <= float(self.bias) <= 1.0:
            raise ValueError(f"ArchetypeSpec.bias must lie in [0, 1], got {self.bias}")
        object.__setattr__(self, 'label_set', labels)
        object.__setattr__(self, 'bias', float(self.bias))

    def describe(self):
        labels = ','.join(str(label) for label in sorted(self.label_set))
        return f"{{{labels}}}@{self.bias:g}"


@dataclass(frozen=True, eq=False)
class DeviceShard:
    """
    One device's local data.

    ``archetype_id`` is ground truth for reporting only; the protocol never
    reads it. The index arrays point into the source dataset.
    """
    train: LabeledDataset
    validation: LabeledDataset
    archetype_id: int
    train_indices: np.ndarray
    validation_indices: np.ndarray

    def __post_init__(self):
        if len(self.train) < 1:
            raise ValueError("a device shard needs at least one training example")
        if np.intersect1d(self.train_indices, self.validation_indices).size:
            raise ValueError("train and validation share source examples")

    @property
    def n_k(self):
        return len(self.train)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(path, "file does not exist")
    opener = gzip.open if path.suffix == '.gz' else open
    try:
        with opener(path, 'rb') as handle:
            return handle.read()
    except OSError as e:
        raise DatasetFormatError(path, f"could not read file: {e}")


def _parse_idx(path, expected_magic):
    data = _read_bytes(path)
    if len(data) < 4:
        raise DatasetFormatError(path, "truncated IDX header")
    (magic,) = struct.unpack('>I', data[:4])
    if magic != expected_magic:
        raise DatasetFormatError(path, f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise DatasetFormatError(path, "truncated IDX dimension header")
    shape = struct.unpack(f'>{ndim}I', data[4:header_size])
    expected = int(np.prod(shape))
    body = data[header_size:]
    payload = np.frombuffer(body, dtype=np.uint8) if body else np.zeros(0, dtype=np.uint8)
    if payload.size != expected:
        raise DatasetFormatError(
            path, f"IDX payload has {payload.size} bytes, header declares {expected}"
        )
    return payload.reshape(shape)


def _load_idx(images_path, labels_path, num_classes):
    if labels_path is None:
        raise DatasetFormatError(images_path, "IDX datasets need a labels file")
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            labels_path, f"{labels.shape[0]} labels but {images.shape[0]} images in {images_path}"
        )
    if labels.shape[0] == 0:
        raise DatasetFormatError(labels_path, f"dataset holds no examples (images in {images_path})")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return _build_dataset(labels_path, features, labels.astype(np.int64), num_classes)


def _load_csv(path, num_classes):
    text = _read_bytes(path).decode('utf-8')
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError(path, "empty CSV file")
    width = len(header)
    if width < 2:
        raise DatasetFormatError(path, "CSV needs at least one feature column and a label column", line=1)

    rows = []
    labels = []
    for line_number, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise DatasetFormatError(path, f"expected {width} columns, found {len(row)}", line=line_number)
        try:
            rows.append([float(cell) for cell in row[:-1]])
        except ValueError:
            raise DatasetFormatError(path, "non-numeric feature value", line=line_number)
        try:
            label = float(row[-1])
        except ValueError:
            raise DatasetFormatError(path, f"label {row[-1]!r} is not an integer", line=line_number)
        if not label.is_integer():
            raise DatasetFormatError(path, f"label {row[-1]!r} is not an integer", line=line_number)
        if label < 0:
            raise DatasetFormatError(path, f"label {int(label)} is negative", line=line_number)
        labels.append(int(label))

    if not rows:
        raise DatasetFormatError(path, "CSV has a header but no examples")
    features = np.array(rows, dtype=np.float64)
    return _build_dataset(path, _scale_unit_interval(features), np.array(labels, dtype=np.int64), num_classes)


def _scale_unit_interval(features):
    # Data already inside [0, 1] is kept as is; otherwise min-max per column
    if features.min() >= 0.0 and features.max() <= 1.0:
        return features
    low = features.min(axis=0)
    span = features.max(axis=0) - low
    scaled = np.zeros_like(features)
    varying = span > 0
    scaled[:, varying] = (features[:, varying] - low[varying]) / span[varying]
    return scaled


def _build_dataset(path, features, labels, num_classes):
    if labels.size == 0:
        raise DatasetFormatError(path, "dataset holds no examples")
    inferred = int(labels.max()) + 1
    if num_classes is not None and inferred > num_classes:
        raise DatasetFormatError(path, f"label {inferred - 1} out of range for {num_classes} classes")
    return LabeledDataset(features, labels, num_classes if num_classes is not None else inferred)


def load_dataset(path, fmt='csv', labels_path=None, num_classes=None):
    """
    Load an IDX pair or a CSV file; features end up in [0, 1].

    IDX: ``path`` is the images file (magic 0x00000803), ``labels_path`` the
    labels file (0x00000801); pixels are divided by 255. A ``.gz`` suffix is
    read through gzip.
    CSV: header row, feature columns, integer label in the last column.
    """
    fmt = (fmt or '').lower()
    if fmt == 'idx':
        dataset = _load_idx(path, labels_path, num_classes)
    elif fmt == 'csv':
        dataset = _load_csv(path, num_classes)
    else:
        raise DatasetFormatError(path, f"unknown dataset format {fmt!r} (expected 'idx' or 'csv')")
    logger.info(f"Loaded {len(dataset)} examples, {dataset.feature_dim} features, {dataset.num_classes} classes from {path}")
    return dataset


def save_csv(dataset, path):
    """Write a dataset in the CSV layout load_dataset reads"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow([f"x{i + 1}" for i in range(dataset.feature_dim)] + ['label'])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return path


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _class_means(num_classes, feature_dim, separation, rng):
    if feature_dim >= num_classes:
        # One axis per class: every pair of means is exactly `separation` apart
        means = np.zeros((num_classes, feature_dim))
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
        return means
    # Fewer dimensions than classes: evenly spaced slots on a circle in the
    # first two dimensions (a line when there is only one), neighbours exactly
    # `separation` apart. Which class takes which slot is drawn from the seed.
    slots = rng.permutation(num_classes)
    means = np.zeros((num_classes, feature_dim))
    if feature_dim == 1:
        means[:, 0] = separation * (slots - (num_classes - 1) / 2.0)
        return means
    radius = separation / (2.0 * np.sin(np.pi / num_classes)) if num_classes > 2 else separation / 2.0
    angles = 2.0 * np.pi * slots / num_classes
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def gen_synthetic(num_classes, feature_dim, per_class, separation, seed):
    """Unit-variance Gaussian blob per class, class means at least `separation` apart"""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
    if not separation > 0:
        raise ValueError(f"separation must be > 0, got {separation}")

    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, feature_dim, float(separation), rng)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, feature_dim))
    return LabeledDataset(features, labels, num_classes)


def split_balanced_holdout(dataset, per_class, seed):
    """
    Take `per_class` examples of every class out as a balanced test set.

    Returns (test, remainder, remainder_indices). The remainder indices map
    back into ``dataset``.
    """
    counts = dataset.label_counts()
    short = [label for label, count in enumerate(counts) if count < per_class + 1]
    if short:
        raise PartitionError(f"classes {short} have too few examples for a {per_class}-per-class holdout")
    rng = np.random.default_rng(seed)
    test_indices = []
    for label in range(dataset.num_classes):
        candidates = np.flatnonzero(dataset.labels == label)
        test_indices.append(rng.choice(candidates, size=per_class, replace=False))
    test_indices = np.sort(np.concatenate(test_indices))
    remainder_indices = np.setdiff1d(np.arange(len(dataset)), test_indices)
    return dataset.subset(test_indices), dataset.subset(remainder_indices), remainder_indices


# ---------------------------------------------------------------------------
# Archetype partitioner
# ---------------------------------------------------------------------------

def partition_archetypes(dataset, specs, devices_per_archetype, samples_per_device,
                         validation_fraction=DEFAULT_VALIDATION_FRACTION, seed=0):
    """
    Build label-skewed device shards.

    For a device of archetype A with bias b, ⌊b·samples_per_device⌋ examples
    come from A's labels and the rest uniformly from the whole source; draws
    never repeat inside one device, different devices may share examples.
    Devices are ordered archetype by archetype.
    """
    if not specs:
        raise PartitionError("at least one archetype spec is required")
    if devices_per_archetype < 1:
        raise PartitionError(f"devices_per_archetype must be >= 1, got {devices_per_archetype}")
    if samples_per_device < 2:
        raise PartitionError("samples_per_device must be >= 2 (train and validation both need data)")
    if not 0.0 < validation_fraction < 1.0:
        raise PartitionError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")

    present = set(np.unique(dataset.labels).tolist())
    for index, spec in enumerate(specs):
        missing = sorted(spec.label_set - present)
        if missing:
            raise PartitionError(f"archetype {index} uses labels {missing} that the dataset does not contain")

    total = len(dataset)
    if total < samples_per_device:
        raise PartitionError(f"dataset has {total} examples, each device needs {samples_per_device}")

    n_validation = max(1, int(round(validation_fraction * samples_per_device)))
    if n_validation >= samples_per_device:
        raise PartitionError("validation split leaves no training examples")

    rng = np.random.default_rng(seed)
    all_indices = np.arange(total)
    shards = []
    for archetype_id, spec in enumerate(specs):
        pool = dataset.indices_with_labels(spec.label_set)
        n_skewed = int(np.floor(spec.bias * samples_per_device))
        n_uniform = samples_per_device - n_skewed
        if pool.size < n_skewed:
            raise PartitionError(
                f"archetype {archetype_id} needs {n_skewed} examples of labels "
                f"{sorted(spec.label_set)}, source has {pool.size}"
            )
        for _ in range(devices_per_archetype):
            uniform_part = rng.choice(all_indices, size=n_uniform, replace=False)
            skew_pool = np.setdiff1d(pool, uniform_part, assume_unique=True)
            if skew_pool.size < n_skewed:
                raise PartitionError(
                    f"archetype {archetype_id}: not enough unused examples of labels "
                    f"{sorted(spec.label_set)} for one device"
                )
            skewed_part = rng.choice(skew_pool, size=n_skewed, replace=False)
            chosen = rng.permutation(np.concatenate([skewed_part, uniform_part]).astype(np.int64))
            validation_indices = chosen[:n_validation]
            train_indices = chosen[n_validation:]
            shards.append(DeviceShard(
                train=dataset.subset(train_indices),
                validation=dataset.subset(validation_indices),
                archetype_id=archetype_id,
                train_indices=_readonly(train_indices.copy()),
                validation_indices=_readonly(validation_indices.copy()),
            ))

    logger.info(
        f"Partitioned {total} examples into {len(shards)} shards "
        f"({len(specs)} archetypes x {devices_per_archetype} devices, {samples_per_device} samples each)"
    )
    return shards
