"""Incremental Gaussian statistics over batched feature streams.

A :class:`RunningGaussian` holds a mean, a population (divisor ``N``)
covariance and an effective sample count.  Each batch moves the estimate
with coefficient ``a = 1/N`` until the count reaches the clip value, after
which ``a`` is frozen at ``1/clip`` and the recurrence becomes an
exponential moving average.

Unclipped, the recurrence reproduces the batch maximum-likelihood estimate
over everything seen so far, for any partition of the stream into batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, EmptyInputError


@dataclass(frozen=True)
class RunningGaussian:
    """Mean/covariance pair with an effective sample count.

    ``clip`` is ``None`` for an unbounded count.
    """

    mean: np.ndarray
    covariance: np.ndarray
    count: float = 0.0
    clip: int | None = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def empty(cls, dim: int, clip: int | None = None) -> "RunningGaussian":
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0.0, clip)

    @classmethod
    def from_moments(cls, mean, covariance, clip: int | None = None) -> "RunningGaussian":
        """Seed the statistics with known moments and a zero count."""
        mean = np.array(mean, dtype=np.float64)
        covariance = np.array(covariance, dtype=np.float64)
        return cls(mean, covariance, 0.0, clip)


@dataclass(frozen=True)
class FilteredBatch:
    """Features of one minibatch with pseudo labels and the filter outcome.

    ``weights`` optionally overrides the hard assignment: an ``(N, K)``
    matrix whose column ``k`` is the weight each row carries into cluster
    ``k``.  When absent the weight is ``pass_mask & (pseudo_labels == k)``.
    """

    features: np.ndarray
    pseudo_labels: np.ndarray
    pass_mask: np.ndarray
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.pseudo_labels.shape != (n,) or self.pass_mask.shape != (n,):
            raise ConfigurationError(
                f"batch of {n} rows has {self.pseudo_labels.shape[0]} labels "
                f"and {self.pass_mask.shape[0]} mask entries"
            )
        if self.weights is not None and self.weights.shape[0] != n:
            raise ConfigurationError("assignment weights do not match batch rows")

    def __len__(self) -> int:
        return self.features.shape[0]

    def class_weights(self, k: int) -> np.ndarray:
        if self.weights is not None:
            return np.asarray(self.weights[:, k], dtype=np.float64)
        return (self.pass_mask & (self.pseudo_labels == k)).astype(np.float64)


@dataclass(frozen=True)
class UpdateTrace:
    """What a single recurrence step did, kept for the backward pass.

    ``centered`` holds ``f(x_i) - mean_before`` for every row of the batch and
    ``weights`` the per-row weight (ones for the global statistics).
    """

    centered: np.ndarray
    weights: np.ndarray
    delta: np.ndarray
    coefficient: float


def clip_coefficient(count: float, clip: int | None) -> float:
    """Step size of the running update.

    ``1/count`` while ``count < clip``, ``1/clip`` afterwards.
    """
    if not count > 0:
        raise ValueError(f"clip_coefficient needs a positive count, got {count}")
    if clip is None or count < clip:
        return 1.0 / count
    return 1.0 / clip


def _check_dim(stats: RunningGaussian, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != stats.dim:
        raise ConfigurationError(
            f"feature dimension {features.shape[-1] if features.ndim else 0} "
            f"does not match statistics dimension {stats.dim}"
        )


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _step(
    stats: RunningGaussian,
    features: np.ndarray,
    weights: np.ndarray,
    count_increment: float | None,
) -> tuple[RunningGaussian, UpdateTrace]:
    mass = float(weights.sum())
    increment = mass if count_increment is None else float(count_increment)
    count = stats.count + increment
    # an all-zero-weight batch leaves the statistics untouched
    if mass <= 0.0:
        centered = features - stats.mean
        trace = UpdateTrace(centered, weights, np.zeros(stats.dim), 0.0)
        return replace(stats, count=count), trace

    # the step must not outweigh the mass actually present in the batch
    a = clip_coefficient(max(count, mass), stats.clip)
    centered = features - stats.mean
    weighted = centered * weights[:, None]
    delta = a * weighted.sum(axis=0)
    scatter = weighted.T @ centered
    cov = stats.covariance + a * (scatter - mass * stats.covariance) - np.outer(delta, delta)
    updated = RunningGaussian(stats.mean + delta, symmetrize(cov), count, stats.clip)
    return updated, UpdateTrace(centered, weights, delta, a)


def update_global(
    stats: RunningGaussian,
    batch_features: np.ndarray,
    *,
    count_increment: float | None = None,
    return_trace: bool = False,
):
    """Fold a batch of feature rows into the running statistics.

    Returns ``(stats, delta, a)``; with ``return_trace=True`` the third item
    is the full :class:`UpdateTrace` instead of the bare coefficient.

    ``count_increment`` overrides how far the count advances (default: the
    number of rows).
    """
    features = np.asarray(batch_features, dtype=np.float64)
    _check_dim(stats, features)
    if features.shape[0] == 0:
        raise EmptyInputError("update_global needs a nonempty batch")
    weights = np.ones(features.shape[0])
    updated, trace = _step(stats, features, weights, count_increment)
    if return_trace:
        return updated, trace.delta, trace
    return updated, trace.delta, trace.coefficient


def update_cluster(
    stats: RunningGaussian,
    batch: FilteredBatch,
    k: int,
    *,
    count_increment: float | None = None,
    return_trace: bool = False,
):
    """Same recurrence as :func:`update_global` restricted to cluster ``k``.

    Only rows that passed the filter with pseudo label ``k`` take part (or,
    for soft assignment, every row weighted by its column-``k`` weight).
    With nothing qualifying the statistics come back unchanged and ``a = 0``.
    """
    features = np.asarray(batch.features, dtype=np.float64)
    _check_dim(stats, features)
    n_classes = None if batch.weights is None else batch.weights.shape[1]
    if k < 0 or (n_classes is not None and k >= n_classes):
        raise ConfigurationError(f"class index {k} out of range")
    weights = batch.class_weights(k)
    updated, trace = _step(stats, features, weights, count_increment)
    if return_trace:
        return updated, trace.delta, trace
    return updated, trace.delta, trace.coefficient


def batch_mle(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-likelihood mean and population covariance of the rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("batch_mle needs at least one row")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    return mean, symmetrize(cov)


def weighted_mle(features: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted MLE; rows with zero weight are ignored."""
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise EmptyInputError("weighted_mle needs positive total weight")
    mean = (w[:, None] * x).sum(axis=0) / total
    centered = x - mean
    cov = (w[:, None] * centered).T @ centered / total
    return mean, symmetrize(cov)


@dataclass
class ClusterBank:
    """Per-class target statistics plus the global target statistics.

    ``priors`` are stored for bookkeeping only; no loss term reads them.
    """

    clusters: list[RunningGaussian]
    global_stats: RunningGaussian
    priors: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.clusters)

    @property
    def dim(self) -> int:
        return self.global_stats.dim

    @classmethod
    def from_anchors(cls, anchors, clip: int | None, clip_k: int | None) -> "ClusterBank":
        clusters = [
            RunningGaussian.from_moments(m, c, clip_k)
            for m, c in zip(anchors.class_means, anchors.class_covs)
        ]
        glob = RunningGaussian.from_moments(anchors.global_mean, anchors.global_cov, clip)
        k = len(clusters)
        return cls(clusters, glob, np.full(k, 1.0 / k))

    def counts(self) -> np.ndarray:
        return np.array([c.count for c in self.clusters])

    def copy(self) -> "ClusterBank":
        # RunningGaussian is frozen and never mutated in place
        return ClusterBank(list(self.clusters), self.global_stats, self.priors.copy())


def is_finite(stats: RunningGaussian) -> bool:
    return (
        math.isfinite(stats.count)
        and bool(np.all(np.isfinite(stats.mean)))
        and bool(np.all(np.isfinite(stats.covariance)))
    )
