"""In-memory datasets, deterministic batching and probe sets."""
import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from adcore.params import DTYPE
from hesslens.exceptions import ConfigurationError, LabelRangeError

logger = logging.getLogger(__name__)

DEFAULT_PROBE_SET_SIZE = 2048


@dataclass(frozen=True)
class Batch:
    inputs: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class Dataset:
    inputs: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str = 'dataset'

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f'{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels in {self.name}'
            )
        if self.labels.numel() and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise LabelRangeError(f'labels of {self.name} must lie in [0, {self.num_classes})')

    @classmethod
    def from_arrays(cls, inputs, labels, num_classes, name='dataset'):
        return cls(
            inputs=torch.as_tensor(np.asarray(inputs), dtype=DTYPE),
            labels=torch.as_tensor(np.asarray(labels), dtype=torch.long),
            num_classes=int(num_classes),
            name=name,
        )

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    @property
    def class_counts(self):
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, indices):
        indices = torch.as_tensor(indices, dtype=torch.long)
        return Batch(self.inputs[indices], self.labels[indices])

    def as_batch(self):
        return Batch(self.inputs, self.labels)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int
    epoch: int = 0


def batches(dataset, plan):
    """Shuffled partition of ``dataset`` for ``(seed, epoch)``; the short final batch is kept."""
    if plan.batch_size <= 0:
        raise ConfigurationError(f'batch size must be positive, got {plan.batch_size}')
    order = batch_order(len(dataset), plan)
    return [dataset.subset(order[start:start + plan.batch_size]) for start in range(0, len(order), plan.batch_size)]


def batch_order(size, plan):
    rng = np.random.default_rng([int(plan.seed), int(plan.epoch)])
    return rng.permutation(size)


def probe_set(dataset, size=DEFAULT_PROBE_SET_SIZE, seed=0):
    """
    Fixed subset backing every curvature estimate of an analysis run.

    ``size=None`` (or ``size >= N``) keeps the full dataset in its stored order.
    """
    if len(dataset) == 0:
        raise ConfigurationError('cannot draw a probe set from an empty dataset')
    if size is None or size >= len(dataset):
        return dataset.as_batch()
    rng = np.random.default_rng(int(seed))
    indices = np.sort(rng.choice(len(dataset), size=int(size), replace=False))
    return dataset.subset(indices)


def standardize(inputs, mean=None, std=None):
    mean = inputs.mean(axis=0) if mean is None else mean
    std = inputs.std(axis=0) if std is None else std
    std = np.where(std > 0, std, 1.0)
    return (inputs - mean) / std, mean, std


def class_directions(num_classes, dim):
    """Fixed unit directions u_c: basis vectors when possible, otherwise seeded random unit vectors."""
    if num_classes <= dim:
        return np.eye(dim)[:num_classes]
    directions = np.random.default_rng(0).standard_normal((num_classes, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def make_blobs(num_classes, per_class, dim, separation, seed, test_per_class=0):
    """
    Isotropic Gaussian classes centered at ``separation * u_c``.

    Returns the training set, or ``(train, test)`` when ``test_per_class`` is
    positive; both splits are standardized with the training statistics.
    """
    if num_classes < 2 or per_class < 1 or dim < 1:
        raise ConfigurationError('blobs need C >= 2, n >= 1 and dim >= 1')
    rng = np.random.default_rng(int(seed))
    centers = separation * class_directions(num_classes, dim)
    total = per_class + test_per_class
    inputs = np.empty((num_classes, total, dim))
    for c in range(num_classes):
        inputs[c] = centers[c] + rng.standard_normal((total, dim))
    labels = np.repeat(np.arange(num_classes), total).reshape(num_classes, total)

    train_x, train_y = inputs[:, :per_class].reshape(-1, dim), labels[:, :per_class].reshape(-1)
    train_x, mean, std = standardize(train_x)
    train = Dataset.from_arrays(train_x, train_y, num_classes, name='blobs-train')
    if not test_per_class:
        return train
    test_x, test_y = inputs[:, per_class:].reshape(-1, dim), labels[:, per_class:].reshape(-1)
    test_x, _, _ = standardize(test_x, mean, std)
    return train, Dataset.from_arrays(test_x, test_y, num_classes, name='blobs-test')


def export_csv(dataset, path):
    """Write ``f0..f{d-1},label`` rows with round-trip float formatting."""
    flat = dataset.inputs.reshape(len(dataset), -1).numpy()
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow([f'f{j}' for j in range(flat.shape[1])] + ['label'])
        for row, label in zip(flat, dataset.labels.tolist()):
            writer.writerow([format(float(x), '.17g') for x in row] + [label])
    logger.info('exported %d samples to %s', len(dataset), path)
    return path


def nearest_centroid_accuracy(train, test=None):
    """Accuracy of a Euclidean nearest-class-mean classifier."""
    test = train if test is None else test
    x = train.inputs.reshape(len(train), -1)
    centroids = torch.stack([x[train.labels == c].mean(dim=0) for c in range(train.num_classes)])
    queries = test.inputs.reshape(len(test), -1)
    predicted = torch.cdist(queries, centroids).argmin(dim=1)
    return float((predicted == test.labels).double().mean())
