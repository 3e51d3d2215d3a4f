"""Shared builders for the test suite."""

from functools import lru_cache

import numpy as np

from ttac.align import GaussianParams
from ttac.anchors import SourceAnchors, compute_source_anchors
from ttac.config import SttrConfig
from ttac.datagen import make_benchmark
from ttac.nn import Model, pretrain_source


def random_spd(rng, d, floor=0.2):
    a = rng.normal(size=(d, d))
    return a @ a.T / d + floor * np.eye(d)


def random_gaussian(rng, d):
    return GaussianParams(rng.normal(size=d), random_spd(rng, d))


def random_anchors(rng, k, d):
    means = rng.normal(size=(k, d))
    covs = np.array([random_spd(rng, d) for _ in range(k)])
    return SourceAnchors(means, covs, np.full(k, 1.0 / k), rng.normal(size=d), random_spd(rng, d))


def max_rel_err(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def central_difference(f, x, step=1e-4):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


@lru_cache(maxsize=None)
def trained_benchmark(seed, family="rotation_mix", severity=3):
    """Benchmark splits, a source model trained on them and its anchors.

    The source model depends only on the seed, so one model serves every
    corruption family.
    """
    splits = make_benchmark(family, severity, seed=seed)
    model, anchors, acc = _source_model(seed)
    return splits, model, anchors, acc


@lru_cache(maxsize=None)
def _source_model(seed):
    splits = make_benchmark("rotation_mix", 0, seed=seed)
    model = Model.init(32, [64, 64], 32, 10, np.random.default_rng(seed), feature_activation="identity")
    model, acc = pretrain_source(
        model, splits.source_train.x, splits.source_train.y, epochs=30, lr=0.05, seed=seed,
        x_val=splits.source_test.x, y_val=splits.source_test.y,
    )
    anchors = compute_source_anchors(model, splits.source_train.x, splits.source_train.y)
    return model, anchors, acc


SMALL = SttrConfig(batch_size=16, queue_size=64, n_itr=2, min_cluster_count=8, n_clip=256, n_clip_k=64)


@lru_cache(maxsize=None)
def small_setup(seed=0, family="rotation_mix", severity=3):
    splits = make_benchmark(family, severity, seed=seed, n_classes=4, input_dim=8,
                            n_source=800, n_target=192, n_source_test=200)
    model = Model.init(8, [16], 8, 4, np.random.default_rng(seed), feature_activation="identity")
    model, _ = pretrain_source(model, splits.source_train.x, splits.source_train.y, epochs=20, lr=0.05, seed=seed)
    anchors = compute_source_anchors(model, splits.source_train.x, splits.source_train.y)
    return splits, model, anchors
