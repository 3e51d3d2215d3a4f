"""Gaussian KL divergence, the anchored-clustering and global-alignment
losses, and their gradients with respect to the current batch's features.

All covariances get ``RIDGE`` added to the diagonal before factorization.
Gradients flow only through the current batch's contribution to the running
statistics; the statistics before the batch are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import ConfigurationError, NumericalDomainError
from .stats import (
    ClusterBank,
    FilteredBatch,
    RunningGaussian,
    UpdateTrace,
    update_cluster,
    update_global,
)

RIDGE = 1e-5

# (log-det, quadratic, trace) coefficients of the target-dependent terms
KL_FORMS = {
    "standard": (0.5, 0.5, 0.5),
    "paper_printed": (0.5, 0.5, 1.0),
}


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def of(cls, stats: RunningGaussian) -> "GaussianParams":
        return cls(stats.mean, stats.covariance)


@dataclass
class LossBreakdown:
    l_ac: float
    l_ga: float
    total: float
    per_class_kl: np.ndarray
    skipped_classes: set[int] = field(default_factory=set)


def cholesky(matrix: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """Lower Cholesky factor of ``matrix + ridge * I``.

    Raises :class:`NumericalDomainError` with the 0-based failing pivot.
    """
    m = np.asarray(matrix, dtype=np.float64)
    m = m + ridge * np.eye(m.shape[0])
    if not np.all(np.isfinite(m)):
        raise NumericalDomainError("covariance has non-finite entries", pivot=None)
    factor, info = lapack.dpotrf(m, lower=1, clean=1)
    if info > 0:
        raise NumericalDomainError(
            f"covariance is not positive definite (pivot {info - 1})", pivot=info - 1
        )
    if info < 0:
        raise NumericalDomainError(f"dpotrf rejected argument {-info}")
    return factor


def _logdet(factor: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def _chol_inverse(factor: np.ndarray) -> np.ndarray:
    d = factor.shape[0]
    inv_factor = solve_triangular(factor, np.eye(d), lower=True)
    return inv_factor.T @ inv_factor


def kl_gaussian(p: GaussianParams, q: GaussianParams, ridge: float = RIDGE) -> float:
    """Closed-form ``KL(p || q)`` between two multivariate normals."""
    if p.mean.shape != q.mean.shape:
        raise ConfigurationError("KL operands have different dimensions")
    d = p.mean.shape[0]
    lp = cholesky(p.covariance, ridge)
    lq = cholesky(q.covariance, ridge)
    # tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    m = solve_triangular(lq, lp, lower=True)
    trace = float(np.sum(m * m))
    z = solve_triangular(lq, q.mean - p.mean, lower=True)
    quad = float(z @ z)
    return 0.5 * (trace + quad - d + _logdet(lq) - _logdet(lp))


def _target_term(
    source: GaussianParams,
    target: GaussianParams,
    form: str,
    ridge: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value of the KL-type term and its gradients w.r.t. target mean/cov."""
    w_ld, w_q, w_tr = KL_FORMS[form]
    d = source.mean.shape[0]
    ls = cholesky(source.covariance, ridge)
    lt = cholesky(target.covariance, ridge)
    inv_t = _chol_inverse(lt)
    s_reg = source.covariance + ridge * np.eye(d)
    diff = target.mean - source.mean
    u = inv_t @ diff
    trace = float(np.sum(inv_t * s_reg))
    quad = float(diff @ u)
    logdet_t, logdet_s = _logdet(lt), _logdet(ls)
    # constant chosen so the value vanishes when the two Gaussians coincide
    value = (
        w_ld * (logdet_t - logdet_s) + w_q * quad + w_tr * trace
        - (w_tr * d)
    )
    grad_mean = 2.0 * w_q * u
    grad_cov = w_ld * inv_t - w_q * np.outer(u, u) - w_tr * (inv_t @ s_reg @ inv_t)
    return value, grad_mean, 0.5 * (grad_cov + grad_cov.T)


def _l2_term(source: GaussianParams, target: GaussianParams):
    dm = target.mean - source.mean
    dc = target.covariance - source.covariance
    value = float(dm @ dm + np.sum(dc * dc))
    return value, 2.0 * dm, 2.0 * dc


def anchored_clustering_loss(
    anchors: list[GaussianParams],
    targets: list[GaussianParams],
    active,
    kl_form: str = "standard",
    ridge: float = RIDGE,
) -> tuple[float, np.ndarray]:
    """Sum of per-class ``KL(source_k || target_k)`` over ``active`` classes."""
    if len(anchors) != len(targets):
        raise ConfigurationError("anchor and target class counts differ")
    per_class = np.zeros(len(anchors))
    for k in sorted(active):
        try:
            per_class[k] = _target_term(anchors[k], targets[k], kl_form, ridge)[0]
        except NumericalDomainError as exc:
            raise NumericalDomainError(
                f"class {k}: {exc}", pivot=exc.pivot, class_index=k
            ) from exc
    return float(per_class.sum()), per_class


def global_alignment_loss(
    source_global: GaussianParams,
    target_global: GaussianParams,
    kl_form: str = "standard",
    ridge: float = RIDGE,
) -> float:
    return _target_term(source_global, target_global, kl_form, ridge)[0]


def _row_gradient(trace: UpdateTrace, grad_mean: np.ndarray, grad_cov: np.ndarray) -> np.ndarray:
    # mean' = mean + a sum w_i D_i;  cov' = cov + a sum w_i (D_i D_i^T - cov) - delta delta^T
    a = trace.coefficient
    if a == 0.0:
        return np.zeros_like(trace.centered)
    rows = grad_mean[None, :] + 2.0 * (trace.centered - trace.delta[None, :]) @ grad_cov
    return a * trace.weights[:, None] * rows


@dataclass
class AlignmentStep:
    """Result of folding one minibatch in and differentiating the loss."""

    gradient: np.ndarray
    losses: LossBreakdown
    bank: ClusterBank


def align_step(
    batch: FilteredBatch,
    bank: ClusterBank,
    anchors,
    lam: float,
    *,
    kl_form: str = "standard",
    ga_form: str = "kld",
    min_cluster_count: float = 1.0,
    ridge: float = RIDGE,
    global_increment: float | None = None,
    cluster_increments=None,
) -> AlignmentStep:
    """Update the bank with ``batch`` and return the feature gradient.

    ``bank`` holds the statistics before the batch and is not modified.
    Classes whose count is still below ``min_cluster_count`` after the
    update are skipped in the anchored-clustering term.
    """
    if ga_form not in ("kld", "l2"):
        raise ConfigurationError(f"unknown global alignment form {ga_form!r}")
    if kl_form not in KL_FORMS:
        raise ConfigurationError(f"unknown KL form {kl_form!r}")
    k_classes = bank.n_classes
    if len(anchors.class_means) != k_classes:
        raise ConfigurationError("anchors and cluster bank disagree on K")

    grad = np.zeros_like(batch.features, dtype=np.float64)

    new_global, _, gtrace = update_global(
        bank.global_stats, batch.features, count_increment=global_increment, return_trace=True
    )
    source_global = GaussianParams(anchors.global_mean, anchors.global_cov)
    target_global = GaussianParams.of(new_global)
    if ga_form == "kld":
        l_ga, g_mean, g_cov = _target_term(source_global, target_global, kl_form, ridge)
    else:
        l_ga, g_mean, g_cov = _l2_term(source_global, target_global)
    if lam != 0.0:
        grad += lam * _row_gradient(gtrace, g_mean, g_cov)

    per_class = np.zeros(k_classes)
    skipped: set[int] = set()
    clusters = []
    for k in range(k_classes):
        inc = None if cluster_increments is None else cluster_increments[k]
        new_k, _, ktrace = update_cluster(
            bank.clusters[k], batch, k, count_increment=inc, return_trace=True
        )
        clusters.append(new_k)
        if new_k.count < min_cluster_count or new_k.count <= 0:
            skipped.add(k)
            continue
        source_k = GaussianParams(anchors.class_means[k], anchors.class_covs[k])
        try:
            value, k_mean, k_cov = _target_term(source_k, GaussianParams.of(new_k), kl_form, ridge)
        except NumericalDomainError as exc:
            raise NumericalDomainError(
                f"class {k}: {exc}", pivot=exc.pivot, class_index=k
            ) from exc
        per_class[k] = value
        grad += _row_gradient(ktrace, k_mean, k_cov)

    l_ac = float(per_class.sum())
    losses = LossBreakdown(l_ac, l_ga, l_ac + lam * l_ga, per_class, skipped)
    new_bank = ClusterBank(clusters, new_global, bank.priors)
    return AlignmentStep(grad, losses, new_bank)


def loss_gradient_wrt_features(
    batch: FilteredBatch,
    state_before_batch: ClusterBank,
    anchors,
    lam: float,
    **kwargs,
) -> np.ndarray:
    """Gradient of ``L_ac + lam * L_ga`` with respect to each batch row."""
    return align_step(batch, state_before_batch, anchors, lam, **kwargs).gradient
