"""Synthetic source/target domains, corruption families, and feature files.

The corruption families are small-scale analogs of image corruptions acting
directly on input vectors.  Every function here is a pure function of its
arguments and seed.

Severity schedules (``s`` in 1..5, ``s = 0`` is the identity):

================  ==========================================================
gaussian_noise    additive N(0, (0.1 s)^2) noise on every entry
rotation_mix      orthogonal mixing: rotation by ``s * pi / 12`` in every
                  plane of a seeded orthonormal basis
channel_scale     per-dimension gain ``exp(0.2 s z_j)`` and offset
                  ``0.1 s u_j`` with seeded standard normals ``z, u``
dim_occlusion     each entry zeroed independently with probability 0.06 s
impulse           each entry replaced by ``+-1.5`` with probability 0.03 s
================  ==========================================================
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ParseError
from .tensorio import read_tensors, write_tensors

FAMILIES = ("gaussian_noise", "rotation_mix", "channel_scale", "dim_occlusion", "impulse")
DEFAULT_FAMILY = "rotation_mix"
DEFAULT_SEVERITY = 3
WARPS = ("none", "sin")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], None if self.y is None else self.y[idx])


@dataclass
class DomainSpec:
    """Class-conditional Gaussian domain, optionally passed through a warp.

    ``warp = "sin"`` maps ``x -> x + warp_strength * sin(x @ R)`` with a
    seeded orthogonal ``R``, which makes the class boundaries nonlinear.
    """

    class_means: np.ndarray
    cov_scale: float = 0.3
    warp: str = "sin"
    warp_strength: float = 0.5
    counts: list[int] = field(default_factory=list)
    seed: int = 0
    geometry_seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def input_dim(self) -> int:
        return self.class_means.shape[1]

    def validate(self) -> None:
        if self.warp not in WARPS:
            raise ConfigurationError(f"unknown warp {self.warp!r}")
        if len(self.counts) != self.n_classes or min(self.counts) < 1:
            raise ConfigurationError("every class needs at least one sample")
        if self.cov_scale <= 0:
            raise ConfigurationError("cov_scale must be positive")
        m = self.class_means
        gaps = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if not np.all(gaps > 0):
            raise ConfigurationError("class means must be pairwise distinct")

    @classmethod
    def default(cls, n_classes=10, input_dim=32, n_per_class=500, mean_scale=0.45,
                cov_scale=0.3, warp="sin", seed=0) -> "DomainSpec":
        """Random well-separated class means drawn from ``seed``."""
        rng = np.random.default_rng([seed, 101])
        means = rng.normal(0.0, mean_scale, (n_classes, input_dim))
        return cls(means, cov_scale, warp, 0.5, [n_per_class] * n_classes, seed, seed)

    def with_counts(self, n_per_class: int, seed: int) -> "DomainSpec":
        return DomainSpec(self.class_means, self.cov_scale, self.warp, self.warp_strength,
                          [n_per_class] * self.n_classes, seed, self.geometry_seed)

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_means"] = self.class_means.tolist()
        return d


def _warp_matrix(spec: DomainSpec) -> np.ndarray:
    # every split drawn from one geometry shares the warp
    rng = np.random.default_rng([spec.geometry_seed, 7])
    q, _ = np.linalg.qr(rng.normal(size=(spec.input_dim, spec.input_dim)))
    return q * 1.5


def generate_source(spec: DomainSpec) -> Dataset:
    """Draw a labeled dataset; rows are grouped by class, then shuffled."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 202])
    xs, ys = [], []
    for k, n in enumerate(spec.counts):
        xs.append(spec.class_means[k] + np.sqrt(spec.cov_scale) * rng.normal(size=(n, spec.input_dim)))
        ys.append(np.full(n, k, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if spec.warp == "sin":
        x = x + spec.warp_strength * np.sin(x @ _warp_matrix(spec))
    order = rng.permutation(x.shape[0])
    return Dataset(x[order], y[order])


@dataclass(frozen=True)
class CorruptionSpec:
    family: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown corruption family {self.family!r}")
        if not 0 <= self.severity <= 5:
            raise ConfigurationError("severity must lie in 0..5")


def rotation_matrix(dim: int, angle: float, seed: int) -> np.ndarray:
    """Orthogonal matrix rotating by ``angle`` in each plane of a seeded basis."""
    rng = np.random.default_rng([seed, 303])
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        block[i, i] = c
        block[i + 1, i + 1] = c
        block[i, i + 1] = -s
        block[i + 1, i] = s
    return basis @ block @ basis.T


def corrupt(dataset: Dataset, corruption: CorruptionSpec) -> Dataset:
    """Apply one corruption family at the given severity; labels are kept."""
    s = corruption.severity
    x = np.array(dataset.x, dtype=np.float64, copy=True)
    y = None if dataset.y is None else dataset.y.copy()
    if s == 0:
        return Dataset(x, y)
    n, dim = x.shape
    rng = np.random.default_rng([corruption.seed, 404, FAMILIES.index(corruption.family)])
    fam = corruption.family
    if fam == "gaussian_noise":
        x = x + rng.normal(0.0, 0.1 * s, x.shape)
    elif fam == "rotation_mix":
        x = x @ rotation_matrix(dim, s * np.pi / 12, corruption.seed).T
    elif fam == "channel_scale":
        z = rng.normal(size=dim)
        u = rng.normal(size=dim)
        x = x * np.exp(0.2 * s * z) + 0.1 * s * u
    elif fam == "dim_occlusion":
        x = np.where(rng.random(x.shape) < 0.06 * s, 0.0, x)
    elif fam == "impulse":
        hit = rng.random(x.shape) < 0.03 * s
        sign = np.where(rng.random(x.shape) < 0.5, -1.5, 1.5)
        x = np.where(hit, sign, x)
    return Dataset(x, y)


@dataclass
class DomainSplits:
    source_train: Dataset
    source_test: Dataset
    target: Dataset
    spec: DomainSpec
    corruption: CorruptionSpec


def make_benchmark(family=DEFAULT_FAMILY, severity=DEFAULT_SEVERITY, seed=0, n_classes=10, input_dim=32,
                   n_source=5000, n_target=2000, n_source_test=1000, data_seed=None) -> DomainSplits:
    """Source train/test splits and a corrupted target stream.

    ``data_seed`` fixes the class geometry separately from ``seed``, which
    drives the sampling.
    """
    geometry = seed if data_seed is None else data_seed
    spec = DomainSpec.default(n_classes, input_dim, seed=geometry)
    train = generate_source(spec.with_counts(n_source // n_classes, seed * 3 + 1))
    test = generate_source(spec.with_counts(n_source_test // n_classes, seed * 3 + 2))
    clean_target = generate_source(spec.with_counts(n_target // n_classes, seed * 3 + 3))
    corruption = CorruptionSpec(family, severity, seed)
    return DomainSplits(train, test, corrupt(clean_target, corruption), spec, corruption)


# ---------------------------------------------------------------- feature files


def save_features(path, features, labels=None, fmt=None) -> None:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "bin")
    x = np.asarray(features, dtype=np.float64)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            header = [f"f{j}" for j in range(x.shape[1])]
            if labels is not None:
                header.append("label")
            w.writerow(header)
            for i, row in enumerate(x):
                vals = [repr(float(v)) for v in row]
                if labels is not None:
                    vals.append(str(int(labels[i])))
                w.writerow(vals)
    elif fmt == "bin":
        tensors = {"features": x}
        if labels is not None:
            tensors["labels"] = np.asarray(labels, dtype=np.int64)
        write_tensors(path, tensors, {"kind": "features"})
    else:
        raise ConfigurationError(f"unknown feature format {fmt!r}")


def load_features(path, fmt=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a feature matrix (and labels when present) from CSV or binary."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "bin")
    if fmt == "bin":
        tensors, _ = read_tensors(path)
        if "features" not in tensors or tensors["features"].ndim != 2:
            raise FormatError(f"{path}: no 2-D 'features' tensor")
        x = tensors["features"]
        y = tensors.get("labels")
        if y is not None and y.shape != (x.shape[0],):
            raise FormatError(f"{path}: label count does not match rows")
        return x, y
    if fmt != "csv":
        raise ConfigurationError(f"unknown feature format {fmt!r}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        has_label = header[-1] == "label"
        names = header[:-1] if has_label else header
        if names != [f"f{j}" for j in range(len(names))] or not names:
            raise ParseError("header must read f0..f{d-1}[,label]", line=1)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}"
                )
            try:
                rows.append([float(v) for v in row[: len(names)]])
                if has_label:
                    labels.append(int(row[-1]))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    x = np.array(rows, dtype=np.float64).reshape(-1, len(names))
    return x, (np.array(labels, dtype=np.int64) if has_label else None)


def save_dataset(path, data: Dataset, meta=None) -> None:
    tensors = {"x": data.x}
    if data.y is not None:
        tensors["y"] = data.y
    write_tensors(path, tensors, meta)


def load_dataset(path) -> Dataset:
    tensors, _ = read_tensors(path)
    if "x" not in tensors:
        raise FormatError(f"{path}: no 'x' tensor")
    return Dataset(tensors["x"], tensors.get("y"))


def write_manifest(path, splits: DomainSplits, extra=None) -> None:
    manifest = {
        "domain": splits.spec.to_json(),
        "corruption": asdict(splits.corruption),
        "sizes": {
            "source_train": len(splits.source_train),
            "source_test": len(splits.source_test),
            "target": len(splits.target),
        },
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
