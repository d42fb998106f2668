"""δ vectors of the Gauss-Newton factorization and their class structure."""
import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from adcore.autodiff import vjp_outputs
from adcore.params import DTYPE
from hesslens.exceptions import ConfigurationError
from hessops.curvature import logit_curvature

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12


@dataclass(frozen=True)
class DeltaSet:
    """
    Per-sample vectors δ_i with their labels and class means δ_c.

    ``columns`` holds the per-class columns δ_{i,c'} (shape N×C×d) when
    they were kept; ``vectors`` is their mean over c'.
    """

    vectors: torch.Tensor
    labels: torch.Tensor
    class_means: torch.Tensor
    num_classes: int
    columns: torch.Tensor = None
    layer: int = None

    @classmethod
    def from_vectors(cls, vectors, labels, num_classes, columns=None, layer=None):
        vectors = torch.as_tensor(vectors, dtype=DTYPE)
        labels = torch.as_tensor(labels, dtype=torch.long)
        means = torch.zeros(num_classes, vectors.shape[1], dtype=DTYPE)
        for c in range(num_classes):
            members = labels == c
            if bool(members.any()):
                means[c] = vectors[members].mean(dim=0)
        return cls(vectors, labels, means, int(num_classes), columns=columns, layer=layer)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def dim(self):
        return int(self.vectors.shape[1])

    def gram(self):
        """Ave_i Σ_c' δ_{i,c'} δ_{i,c'}ᵀ; equals G on the same probe set."""
        if self.columns is None:
            raise ConfigurationError('per-class δ columns were not kept for this set')
        flat = self.columns.reshape(-1, self.columns.shape[-1])
        return flat.T @ flat / len(self)

    def to_csv(self, path):
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['label'] + [f'd{j}' for j in range(self.dim)])
            for label, row in zip(self.labels.tolist(), self.vectors.numpy()):
                writer.writerow([label] + [format(float(x), '.17g') for x in row])
        return path


def extract_deltas(params, registry, probe_set, layer=None, running=None, keep_columns=False):
    """
    δ_{i,c'} = J_iᵀ r_{i,c'} for every probe sample, r_{i,c'} the c'-th column
    of the per-class factor of B_i, and δ_i their mean over c'.

    ``layer`` restricts the vectors to that layer's parameter slice.
    """
    function = registry.function(running=running, training=False)
    with torch.no_grad():
        logits = function(params.values, probe_set.inputs)
    curvature = logit_curvature(logits)
    num_classes = logits.shape[1]
    segment = params.segment(layer).slice if layer is not None else slice(None)

    per_sample = []
    for i in range(len(probe_set)):
        sample = probe_set.inputs[i:i + 1]
        factor = curvature.factor[i]
        columns = torch.stack(
            [vjp_outputs(function, params, sample, factor[:, c].unsqueeze(0)).values[segment] for c in range(num_classes)]
        )
        per_sample.append(columns)
    columns = torch.stack(per_sample)
    deltas = DeltaSet.from_vectors(
        columns.mean(dim=1),
        probe_set.labels,
        num_classes,
        columns=columns if keep_columns else None,
        layer=layer,
    )
    if float(deltas.vectors.norm(dim=1).max()) < ZERO_NORM:
        logger.warning('all δ vectors vanish; the logit curvature is zero on the probe set')
    return deltas


def cluster_purity(deltas):
    """
    Fraction of samples whose nearest class mean under cosine distance is their own class.

    Degenerate sets (all vectors or all class means zero) score 1/C.
    """
    present = torch.unique(deltas.labels)
    if present.numel() < 2:
        raise ConfigurationError('cluster purity needs at least two classes present')
    vectors = deltas.vectors.numpy()
    means = deltas.class_means.numpy()
    vector_norms = np.linalg.norm(vectors, axis=1)
    mean_norms = np.linalg.norm(means, axis=1)
    if vector_norms.max() < ZERO_NORM or mean_norms.max() < ZERO_NORM:
        logger.warning('δ vectors are degenerate; reporting chance-level purity')
        return 1.0 / deltas.num_classes
    unit_vectors = vectors / np.maximum(vector_norms, ZERO_NORM)[:, None]
    unit_means = means / np.maximum(mean_norms, ZERO_NORM)[:, None]
    similarity = unit_vectors @ unit_means.T
    # absent classes never win
    missing = np.setdiff1d(np.arange(deltas.num_classes), present.numpy())
    similarity[:, missing] = -np.inf
    nearest = np.argmax(similarity, axis=1)
    return float(np.mean(nearest == deltas.labels.numpy()))
