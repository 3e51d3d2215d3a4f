"""Sequential test-time training with anchored clustering.

Each arriving batch is first predicted with the current model and logged.
Only then is it pushed into a fixed-length FIFO queue, and the model is
updated for ``n_itr`` epochs of minibatches drawn from the queue.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .align import LossBreakdown, align_step
from .anchors import SourceAnchors, classifier_prototype_anchors
from .config import SttrConfig
from .errors import ConfigurationError, NumericalDomainError
from .filtering import FilterThresholds, PosteriorStore, make_filtered_batch
from .nn import Model, SgdState, backward, forward, save_checkpoint, step_model
from .stats import ClusterBank, FilteredBatch, RunningGaussian, is_finite, update_cluster
from .tensorio import write_tensors


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: int
    arrival_index: int
    predicted_class: int
    true_class: int | None
    model_version: int


class PredictionLog:
    """Append-only list of prediction records."""

    def __init__(self, records=()):
        self._records: list[PredictionRecord] = list(records)

    def append(self, record: PredictionRecord) -> None:
        self._records.append(record)

    def extend(self, records) -> None:
        self._records.extend(records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def records(self) -> tuple[PredictionRecord, ...]:
        return tuple(self._records)

    def predictions(self) -> np.ndarray:
        return np.array([r.predicted_class for r in self._records], dtype=np.int64)

    def labels(self) -> np.ndarray | None:
        if any(r.true_class is None for r in self._records):
            return None
        return np.array([r.true_class for r in self._records], dtype=np.int64)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self._records)


class SampleQueue:
    """FIFO of the most recent ``capacity`` samples."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._ids: deque[int] = deque()
        self._rows: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._ids)

    def push(self, ids, rows) -> list[int]:
        """Append a batch; returns the ids evicted to make room."""
        for sid, row in zip(ids, rows):
            self._ids.append(int(sid))
            self._rows.append(row)
        evicted = []
        while len(self._ids) > self.capacity:
            evicted.append(self._ids.popleft())
            self._rows.popleft()
        return evicted

    def ids(self) -> np.ndarray:
        return np.array(self._ids, dtype=np.int64)

    def rows(self) -> np.ndarray:
        return np.array(self._rows)


class EngineNumericalError(NumericalDomainError):
    """Raised when an update fails; ``dump_path`` holds the state snapshot."""

    def __init__(self, message, dump_path=None, pivot=None, class_index=None):
        super().__init__(message, pivot=pivot, class_index=class_index)
        self.dump_path = dump_path


def _source_free_bank(n_classes: int, dim: int, config: SttrConfig) -> ClusterBank:
    cov = config.fixed_cov_scale * np.eye(dim)
    clusters = [RunningGaussian.from_moments(np.zeros(dim), cov, config.n_clip_k) for _ in range(n_classes)]
    glob = RunningGaussian.from_moments(np.zeros(dim), cov, config.n_clip)
    return ClusterBank(clusters, glob, np.full(n_classes, 1.0 / n_classes))


class Engine:
    """State of one streaming run: model, statistics, queue and EMA store."""

    def __init__(self, model: Model, anchors: SourceAnchors | None, config: SttrConfig, dump_dir=None):
        self.config = config
        self.model = model.copy()
        self.initial_version = self.model.version
        k, d = model.head.n_classes, model.backbone.feature_dim
        if config.anchor_mode == "source_stats":
            if anchors is None:
                raise ConfigurationError("anchor_mode 'source_stats' needs source anchors")
            if anchors.n_classes != k or anchors.dim != d:
                raise ConfigurationError("anchors do not match the model's classes/feature dimension")
            self.anchors = anchors
            self.bank = ClusterBank.from_anchors(anchors, config.n_clip, config.n_clip_k)
        else:
            self.anchors = None
            self.bank = _source_free_bank(k, d, config)
        # diagonal loading proportional to the mean source feature variance
        if self.anchors is not None:
            mean_var = float(np.trace(self.anchors.global_cov)) / d
        else:
            mean_var = config.fixed_cov_scale
        self.ridge = config.ridge + config.ridge_scale * mean_var
        self.thresholds = FilterThresholds(config.xi, config.tau_tc, config.tau_pp)
        self.store = PosteriorStore()
        self.queue = SampleQueue(config.queue_size)
        self.optimizer = SgdState(config.lr, config.momentum)
        self.rng = np.random.default_rng([config.seed, 8191])
        self.arrivals = 0
        self.update_steps = 0
        self.loss_history: list[LossBreakdown] = []
        self.dump_dir = None if dump_dir is None else Path(dump_dir)
        self.evict_store = config.protocol == "one_pass"
        self._counted: set[int] = set()

    # ------------------------------------------------------------ prediction

    def predict(self, x) -> np.ndarray:
        return np.argmax(forward(self.model, x).logits, axis=1)

    def stream_step(self, x, labels=None, ids=None) -> list[PredictionRecord]:
        """Predict a newly arrived batch, then adapt on the queue."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if ids is None:
            ids = np.arange(self.arrivals, self.arrivals + n)
        preds = self.predict(x)
        records = [
            PredictionRecord(
                int(ids[i]),
                self.arrivals + i,
                int(preds[i]),
                None if labels is None else int(labels[i]),
                self.model.version,
            )
            for i in range(n)
        ]
        self.arrivals += n
        evicted = self.queue.push(ids, x)
        if self.evict_store:
            self.store.evict(evicted)
        self.adapt()
        return records

    # ------------------------------------------------------------ adaptation

    def adapt(self) -> None:
        cfg = self.config
        if cfg.n_itr == 0 or len(self.queue) == 0:
            return
        all_ids = self.queue.ids()
        all_rows = self.queue.rows()
        for _ in range(cfg.n_itr):
            order = self.rng.permutation(len(all_ids))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                self._minibatch(all_ids[idx], all_rows[idx])

    def _assign(self, batch: FilteredBatch, posteriors: np.ndarray) -> FilteredBatch:
        strategy = self.config.cluster_update_strategy
        if strategy == "no_filter":
            return FilteredBatch(batch.features, batch.pseudo_labels, np.ones(len(batch), dtype=bool))
        if strategy == "soft_assignment":
            return FilteredBatch(batch.features, batch.pseudo_labels, np.ones(len(batch), dtype=bool),
                                 weights=posteriors)
        return batch

    def _increments(self, ids, batch: FilteredBatch):
        if self.config.count_per == "inner":
            return None, None
        fresh = np.array([sid not in self._counted for sid in ids])
        self._counted.update(int(s) for s in ids)
        k = self.bank.n_classes
        glob = float(fresh.sum())
        clusters = [float((batch.class_weights(c) * fresh).sum()) for c in range(k)]
        return glob, clusters

    def _anchors_for_step(self, batch: FilteredBatch):
        if self.anchors is not None:
            return self.anchors
        # prototypes follow the cluster means after this minibatch (held constant)
        provisional = ClusterBank(
            [update_cluster(self.bank.clusters[k], batch, k)[0] for k in range(self.bank.n_classes)],
            self.bank.global_stats,
            self.bank.priors,
        )
        return classifier_prototype_anchors(self.model.head, provisional, self.config.fixed_cov_scale)

    def _minibatch(self, ids, rows) -> None:
        cfg = self.config
        cache = forward(self.model, rows)
        batch = make_filtered_batch(
            cache.features, cache.posteriors, ids, self.store, self.thresholds, self.update_steps
        )
        batch = self._assign(batch, cache.posteriors)
        g_inc, k_inc = self._increments(ids, batch)
        try:
            anchors = self._anchors_for_step(batch)
            step = align_step(
                batch,
                self.bank,
                anchors,
                cfg.lam,
                kl_form=cfg.kl_form,
                ga_form=cfg.ga_form,
                min_cluster_count=cfg.min_cluster_count,
                ridge=self.ridge,
                global_increment=g_inc,
                cluster_increments=k_inc,
            )
            if not (np.isfinite(step.losses.total) and np.all(np.isfinite(step.gradient))):
                raise NumericalDomainError("loss or gradient became non-finite")
            if not is_finite(step.bank.global_stats):
                raise NumericalDomainError("running statistics became non-finite")
        except NumericalDomainError as exc:
            path = self.dump_state(ids, rows)
            raise EngineNumericalError(
                f"update {self.update_steps} failed: {exc}", path, exc.pivot, exc.class_index
            ) from exc
        self.bank = step.bank
        self.loss_history.append(step.losses)
        grads = backward(self.model, cache, grad_features=step.gradient)
        step_model(self.model, grads, self.optimizer, freeze_head=cfg.freeze_head)
        self.update_steps += 1

    # ------------------------------------------------------------ diagnostics

    def dump_state(self, ids=None, rows=None):
        """Write model, statistics and the failing minibatch for reproduction."""
        if self.dump_dir is None:
            return None
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.model, self.dump_dir / "model.ckpt")
        tensors = {
            "global_mean": self.bank.global_stats.mean,
            "global_cov": self.bank.global_stats.covariance,
            "class_means": np.array([c.mean for c in self.bank.clusters]),
            "class_covs": np.array([c.covariance for c in self.bank.clusters]),
            "class_counts": self.bank.counts(),
            "global_count": np.array([self.bank.global_stats.count]),
        }
        if ids is not None:
            tensors["batch_ids"] = np.asarray(ids)
            tensors["batch_rows"] = np.asarray(rows)
        write_tensors(self.dump_dir / "state.bin", tensors,
                      {"kind": "state_dump", "config": self.config.to_dict(), "step": self.update_steps})
        return str(self.dump_dir)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


@dataclass
class ProtocolResult:
    log: PredictionLog
    final_error: float | None
    wall_time: float
    n_samples: int
    engine: Engine


def run_protocol(model: Model, anchors, x, y, config: SttrConfig, *, order=None, dump_dir=None) -> ProtocolResult:
    """Run one- or multi-pass adaptation over a finite stream.

    ``order`` optionally permutes the stream; sample ids stay the original
    row indices.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ConfigurationError("empty stream")
    idx = np.arange(n) if order is None else np.asarray(order)
    xs = x[idx]
    ys = None if y is None else np.asarray(y)[idx]
    engine = Engine(model, anchors, config, dump_dir=dump_dir)
    start = time.perf_counter()
    passes = 1 if config.protocol == "one_pass" else config.passes
    log = PredictionLog()
    for _ in range(passes):
        log = PredictionLog()
        for sl in _batches(n, config.batch_size):
            log.extend(engine.stream_step(xs[sl], None if ys is None else ys[sl], ids=idx[sl]))
        # later passes revisit the same ids, so the arrival counter restarts
        engine.arrivals = 0
    if config.protocol == "multi_pass" and config.final_sweep:
        log = PredictionLog()
        for sl in _batches(n, config.batch_size):
            preds = engine.predict(xs[sl])
            for j, i in enumerate(range(sl.start, sl.stop)):
                log.append(PredictionRecord(
                    int(idx[i]), i, int(preds[j]),
                    None if ys is None else int(ys[i]), engine.model.version,
                ))
    wall = time.perf_counter() - start
    labels = log.labels()
    err = None if labels is None else float(np.mean(log.predictions() != labels) * 100.0)
    return ProtocolResult(log, err, wall, n, engine)


def baseline_error(model: Model, x, y) -> float:
    """Error (%) of the unadapted model."""
    preds = np.argmax(forward(model, np.asarray(x, dtype=np.float64)).logits, axis=1)
    return float(np.mean(preds != np.asarray(y)) * 100.0)
