"""Target label-distribution estimation and class-weighted source sampling.

The estimate combines exact oracle-label counts with confidence-weighted
pseudo-label counts and adds one smoothing count per class, so every class is
assumed present at least once in the target domain. Source mini-batches are
then drawn with per-sample probabilities proportional to the ratio between
the estimated target distribution and the observed source distribution,
which makes the induced class mass of a batch match the estimate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import FeatureDataset, LabelDistribution, empirical_label_distribution
from .errors import DataFormatError, UncoveredClassError
from .sampling import PrototypeState


@dataclass(frozen=True)
class ClassCounts:
    """Per-class label evidence: integer oracle counts, real pseudo counts."""

    oracle_counts: np.ndarray
    pseudo_counts: np.ndarray

    def __post_init__(self):
        oracle = np.ascontiguousarray(self.oracle_counts, dtype=np.int64)
        pseudo = np.ascontiguousarray(self.pseudo_counts, dtype=np.float64)
        if oracle.shape != pseudo.shape or oracle.ndim != 1:
            raise DataFormatError("count vectors must be 1-d and of equal length")
        if np.any(oracle < 0) or np.any(pseudo < 0):
            raise DataFormatError("counts must be nonnegative")
        object.__setattr__(self, "oracle_counts", oracle)
        object.__setattr__(self, "pseudo_counts", pseudo)

    @property
    def num_classes(self) -> int:
        return self.oracle_counts.shape[0]


def count_oracle(protos: PrototypeState, num_classes: int) -> np.ndarray:
    """Exact class frequencies of the oracle-labeled prototypes."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample_id, label in protos.oracle_labeled.items():
        if label is None:
            raise DataFormatError(f"id {sample_id} awaits annotation; cannot count")
        if not 0 <= label < num_classes:
            raise DataFormatError(f"label {label} out of range for {num_classes} classes")
        counts[label] += 1
    return counts


def count_pseudo(protos: PrototypeState, num_classes: int) -> np.ndarray:
    """Pseudo-label frequencies, each weighted by its predictive probability."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for sample_id, (label, conf) in protos.pseudo_labeled.items():
        if not 0 <= label < num_classes:
            raise DataFormatError(f"pseudo label {label} out of range for {num_classes} classes")
        if not 0.0 < conf <= 1.0:
            raise DataFormatError(f"id {sample_id}: confidence {conf} outside (0, 1]")
        counts[label] += conf
    return counts


def class_counts(protos: PrototypeState, num_classes: int) -> ClassCounts:
    return ClassCounts(count_oracle(protos, num_classes), count_pseudo(protos, num_classes))


def estimate_target_distribution(counts: ClassCounts, num_classes: int) -> LabelDistribution:
    """Smoothed estimate (oracle + pseudo + 1 per class, normalised)."""
    if counts.num_classes != num_classes:
        raise DataFormatError(f"count vectors have {counts.num_classes} classes, expected {num_classes}")
    n_oracle = int(counts.oracle_counts.sum())
    n_pseudo = float(counts.pseudo_counts.sum())
    numer = counts.oracle_counts + counts.pseudo_counts + 1.0
    return LabelDistribution(numer / (n_oracle + n_pseudo + num_classes))


def source_sampling_probs(source: FeatureDataset, p_hat: LabelDistribution) -> np.ndarray:
    """Per-sample source probabilities making class mass follow the estimate.

    rho_i is proportional to p_hat(y_i) / p_source(y_i). Any class with
    positive estimated mass but no source samples is unrecoverable and raises
    UncoveredClassError naming the class.
    """
    if source.labels is None:
        raise DataFormatError("source dataset has no labels")
    if source.num_classes != p_hat.num_classes:
        raise DataFormatError(
            f"source has {source.num_classes} classes but estimate has {p_hat.num_classes}"
        )
    p_source = empirical_label_distribution(source).probs
    uncovered = np.flatnonzero((p_hat.probs > 0) & (p_source == 0))
    if uncovered.size:
        raise UncoveredClassError(int(uncovered[0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p_source > 0, p_hat.probs / p_source, 0.0)
    weights = ratio[source.labels]
    return weights / weights.sum()


def jsd(p: LabelDistribution, q: LabelDistribution) -> float:
    """Base-2 Jensen-Shannon divergence; symmetric, 0 iff p = q, at most 1."""
    if p.num_classes != q.num_classes:
        raise DataFormatError(f"length mismatch: {p.num_classes} vs {q.num_classes}")
    a, b = p.probs, q.probs
    mid = 0.5 * (a + b)

    def kl(x, y):
        mask = x > 0
        return float(np.sum(x[mask] * np.log2(x[mask] / y[mask])))

    return 0.5 * kl(a, mid) + 0.5 * kl(b, mid)
