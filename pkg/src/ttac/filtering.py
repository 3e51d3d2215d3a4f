"""Pseudo labels, temporally smoothed posteriors and the two-stage filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .stats import FilteredBatch

SIMPLEX_TOL = 1e-4


@dataclass(frozen=True)
class FilterThresholds:
    xi: float = 0.9
    tau_tc: float = -0.001
    tau_pp: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.xi <= 1.0:
            raise ConfigurationError(f"xi must lie in (0, 1], got {self.xi}")
        if not 0.0 <= self.tau_pp < 1.0:
            raise ConfigurationError(f"tau_pp must lie in [0, 1), got {self.tau_pp}")
        if not -1.0 <= self.tau_tc <= 1.0:
            raise ConfigurationError(f"tau_tc must lie in [-1, 1], got {self.tau_tc}")


def argmax_lowest(p: np.ndarray) -> np.ndarray | int:
    # np.argmax already returns the first maximal index
    return np.argmax(p, axis=-1)


class PosteriorStore:
    """EMA of each sample's posterior, keyed by a stable sample id.

    The first stored value of a sample is its first observed posterior.
    """

    def __init__(self):
        self._ema: dict[int, np.ndarray] = {}
        self._step: dict[int, int] = {}

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._ema

    def __len__(self) -> int:
        return len(self._ema)

    def get(self, sample_id) -> np.ndarray | None:
        return self._ema.get(sample_id)

    def last_update_step(self, sample_id) -> int | None:
        return self._step.get(sample_id)

    def evict(self, sample_ids) -> None:
        for sid in sample_ids:
            self._ema.pop(sid, None)
            self._step.pop(sid, None)

    def ema_update(self, sample_id, posterior, xi: float, step: int = 0):
        """Fold ``posterior`` into the sample's EMA.

        Returns ``(ema_new, ema_prev)``.  For an unseen sample both equal the
        posterior itself.
        """
        p = np.asarray(posterior, dtype=np.float64)
        if abs(p.sum() - 1.0) > SIMPLEX_TOL or np.any(p < -SIMPLEX_TOL) or np.any(p > 1 + SIMPLEX_TOL):
            raise ValidationError(f"posterior for sample {sample_id} is not on the simplex")
        prev = self._ema.get(sample_id)
        if prev is None:
            new = p.copy()
            prev = new
        else:
            new = (1.0 - xi) * prev + xi * p
        self._ema[sample_id] = new
        self._step[sample_id] = step
        return new, prev


def ema_update(store: PosteriorStore, sample_id, posterior, xi: float, step: int = 0):
    return store.ema_update(sample_id, posterior, xi, step)


def tc_filter(posterior, ema_prev, tau_tc: float) -> bool:
    """Temporal-consistency test at the current argmax (strict ``>``)."""
    k = int(argmax_lowest(np.asarray(posterior)))
    return bool(posterior[k] - ema_prev[k] > tau_tc)


def pp_filter(ema_current, k_hat: int, tau_pp: float) -> bool:
    """Confidence test on the smoothed posterior (strict ``>``)."""
    return bool(ema_current[k_hat] > tau_pp)


def make_filtered_batch(
    features,
    posteriors,
    sample_ids,
    store: PosteriorStore,
    thresholds: FilterThresholds,
    step: int = 0,
) -> FilteredBatch:
    """Pseudo-label every row and decide which rows may update clusters.

    Updates ``store`` in place, one EMA step per row.
    """
    features = np.asarray(features, dtype=np.float64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if not (features.shape[0] == posteriors.shape[0] == len(sample_ids)):
        raise ConfigurationError("features, posteriors and ids must align")
    labels = argmax_lowest(posteriors).astype(np.int64)
    mask = np.zeros(features.shape[0], dtype=bool)
    for i, sid in enumerate(sample_ids):
        p = posteriors[i]
        ema_new, ema_prev = store.ema_update(sid, p, thresholds.xi, step)
        k = int(labels[i])
        mask[i] = tc_filter(p, ema_prev, thresholds.tau_tc) and pp_filter(
            ema_new, k, thresholds.tau_pp
        )
    return FilteredBatch(features, labels, mask)
