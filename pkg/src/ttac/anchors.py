"""Source-domain anchors: per-class and global feature Gaussians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AnchorError, FormatError
from .nn import Model, forward
from .stats import ClusterBank, batch_mle
from .tensorio import read_tensors, write_tensors


@dataclass
class SourceAnchors:
    class_means: np.ndarray  # (K, d)
    class_covs: np.ndarray  # (K, d, d)
    priors: np.ndarray  # (K,)
    global_mean: np.ndarray
    global_cov: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def save(self, path) -> None:
        write_tensors(
            path,
            {
                "class_means": self.class_means,
                "class_covs": self.class_covs,
                "priors": self.priors,
                "global_mean": self.global_mean,
                "global_cov": self.global_cov,
            },
            {"kind": "anchors"},
        )

    @classmethod
    def load(cls, path) -> "SourceAnchors":
        t, meta = read_tensors(path)
        if meta.get("kind") != "anchors":
            raise FormatError(f"{path}: not an anchor file")
        return cls(t["class_means"], t["class_covs"], t["priors"], t["global_mean"], t["global_cov"])


def extract_features(model: Model, x, batch_size: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    parts = [forward(model, x[i:i + batch_size]).features for i in range(0, len(x), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, model.backbone.feature_dim))


def anchors_from_features(features, labels, n_classes: int) -> SourceAnchors:
    """Per-class and global MLE over labeled source features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    means, covs = [], []
    for k in range(n_classes):
        rows = features[labels == k]
        if rows.shape[0] == 0:
            raise AnchorError(f"class {k} has no source samples")
        m, c = batch_mle(rows)
        means.append(m)
        covs.append(c)
    g_mean, g_cov = batch_mle(features)
    return SourceAnchors(
        np.array(means), np.array(covs), np.full(n_classes, 1.0 / n_classes), g_mean, g_cov
    )


def compute_source_anchors(model: Model, x, y) -> SourceAnchors:
    """Anchors from raw labeled source inputs pushed through the backbone."""
    return anchors_from_features(extract_features(model, x), y, model.head.n_classes)


def mixture_moments(means, covs, priors) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a Gaussian mixture."""
    priors = np.asarray(priors, dtype=np.float64)
    mean = priors @ means
    second = np.einsum("k,kij->ij", priors, covs) + np.einsum("k,ki,kj->ij", priors, means, means)
    cov = second - np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)


def classifier_prototype_anchors(head, cluster_bank: ClusterBank, fixed_cov_scale: float) -> SourceAnchors:
    """Source-free anchors built from the classifier weight vectors.

    Each weight vector is rescaled to the norm of the matching target
    cluster mean (unit norm while that mean is zero) and paired with
    ``fixed_cov_scale * I``.  The global anchor is the mixture moment match.
    """
    w = np.asarray(head.weight, dtype=np.float64)
    k_classes, d = w.shape
    norms = np.linalg.norm(w, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise AnchorError(f"classifier weight vector of class {int(bad[0])} has zero norm")
    target_norms = np.array([np.linalg.norm(c.mean) for c in cluster_bank.clusters])
    target_norms = np.where(target_norms > 0, target_norms, 1.0)
    means = w * (target_norms / norms)[:, None]
    covs = np.broadcast_to(fixed_cov_scale * np.eye(d), (k_classes, d, d)).copy()
    priors = np.full(k_classes, 1.0 / k_classes)
    g_mean, g_cov = mixture_moments(means, covs, priors)
    return SourceAnchors(means, covs, priors, g_mean, g_cov)
