"""Datasets, synthetic blobs, non-IID partitioning and validation-set transforms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import InputError, PartitionError, SamplingError

MAX_PARTITION_ATTEMPTS = 100


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.features.shape[0] != self.labels.size:
            raise InputError("need exactly one label per feature row")
        if self.num_classes < 1:
            raise InputError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.size)

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def reshape_features(self, shape) -> Dataset:
        return Dataset(self.features.reshape(len(self), *shape), self.labels, self.num_classes)


@dataclass
class PartitionSpec:
    client_indices: list[np.ndarray]
    alpha: float

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [int(ix.size) for ix in self.client_indices]


def make_blobs(num_classes: int, samples_per_class: int, feature_dim: int,
               class_separation: float = 3.0, noise_std: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, in shuffled order.

    With ``num_classes <= feature_dim`` the means are a randomly rotated regular
    simplex whose pairwise distance equals ``class_separation``; otherwise random
    means are rescaled so the closest pair sits exactly ``class_separation`` apart.
    """
    for name, v in (("num_classes", num_classes), ("samples_per_class", samples_per_class),
                    ("feature_dim", feature_dim), ("class_separation", class_separation)):
        if not v > 0:
            raise InputError(f"{name} must be positive")
    if noise_std < 0:
        raise InputError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    if num_classes <= feature_dim:
        q, r = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
        q *= np.sign(np.diag(r))
        means = (class_separation / np.sqrt(2.0)) * q[:, :num_classes].T
    else:
        means = rng.standard_normal((num_classes, feature_dim))
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        dist[np.diag_indices(num_classes)] = np.inf
        means *= class_separation / dist.min()
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + noise_std * rng.standard_normal((labels.size, feature_dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def split_train_val_test(ds: Dataset, val_frac: float = 0.10, test_frac: float = 0.25, seed: int = 0):
    """Shuffle and cut into (train, val, test). ``val_frac=0`` yields an empty validation set."""
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise InputError("need val_frac, test_frac >= 0 and val_frac + test_frac < 1")
    n = len(ds)
    n_val, n_test = int(round(n * val_frac)), int(round(n * test_frac))
    n_train = n - n_val - n_test
    if (val_frac > 0 and n_val == 0) or (test_frac > 0 and n_test == 0) or n_train <= 0:
        raise InputError(f"fractions {val_frac}/{test_frac} give an empty split for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    val, test, train = perm[:n_val], perm[n_val:n_val + n_test], perm[n_val + n_test:]
    return ds.subset(train), ds.subset(val), ds.subset(test)


def apportion(n: int, proportions) -> np.ndarray:
    """Largest-remainder rounding of ``n * proportions`` to integers summing to ``n``.

    Ties in the fractional part go to the lower index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    total = p.sum()
    if p.ndim != 1 or p.size == 0 or (p < 0).any() or not total > 0:
        raise InputError("proportions must be a non-empty non-negative vector with positive sum")
    quotas = n * (p / total)
    counts = np.floor(quotas).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet_rows(rng: np.random.Generator, alpha: float, rows: int, k: int) -> np.ndarray | None:
    g = rng.gamma(alpha, 1.0, size=(rows, k))
    s = g.sum(axis=1, keepdims=True)
    if (s <= 0).any():
        return None
    return g / s


def dirichlet_partition(ds: Dataset, num_clients: int, alpha: float, seed: int = 0,
                        proportions=None) -> PartitionSpec:
    """Per-class Dirichlet(alpha) split of ``ds`` over ``num_clients`` clients.

    ``proportions`` (shape ``(num_classes, num_clients)``) bypasses the random draw;
    in that case an empty client is an immediate error instead of a redraw.
    """
    if num_clients < 1:
        raise InputError("need at least one client")
    if not alpha > 0:
        raise InputError("alpha must be positive")
    n = len(ds)
    if n < num_clients:
        raise InputError(f"{n} samples cannot cover {num_clients} clients")
    root = np.random.SeedSequence(seed)
    shuffle_rng = np.random.default_rng(root.spawn(1)[0])
    by_class = [shuffle_rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]

    attempts = 1 if proportions is not None else MAX_PARTITION_ATTEMPTS
    for attempt in range(attempts):
        if proportions is not None:
            props = np.asarray(proportions, dtype=np.float64)
            if props.shape != (ds.num_classes, num_clients):
                raise InputError(f"proportions must have shape {(ds.num_classes, num_clients)}")
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, attempt + 1]))
            props = _dirichlet_rows(rng, alpha, ds.num_classes, num_clients)
            if props is None:
                continue
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c, idx in enumerate(by_class):
            if idx.size == 0:
                continue
            counts = apportion(idx.size, props[c])
            for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[k].append(part)
        clients = [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets]
        if all(ix.size > 0 for ix in clients):
            return PartitionSpec(clients, float(alpha))
    raise PartitionError(
        f"no partition with every client non-empty after {attempts} attempt(s) "
        f"(alpha={alpha}, K={num_clients}, N={n})"
    )


def imbalance_counts(num_classes: int, rho: float, n_prime: int) -> list[int]:
    """Per-class counts floor(rho**i / sum_j rho**j * n_prime), evaluated exactly."""
    if not 0 < rho <= 1:
        raise InputError("rho must lie in (0, 1]")
    if num_classes < 1 or n_prime < 0:
        raise InputError("need num_classes >= 1 and n_prime >= 0")
    r = Fraction(rho)
    weights = [r ** i for i in range(num_classes)]
    total = sum(weights)
    return [int(w * n_prime / total) for w in weights]


def imbalance_sample(val: Dataset, rho: float, seed: int = 0) -> Dataset:
    """Class-imbalanced subsample of half the validation set (class 0 most frequent)."""
    c = val.num_classes
    if len(val) < 2 * c:
        raise InputError(f"validation set needs at least {2 * c} samples")
    counts = imbalance_counts(c, rho, len(val) // 2)
    rng = np.random.default_rng(seed)
    picked = []
    for cls, k in enumerate(counts):
        pool = np.flatnonzero(val.labels == cls)
        if k > pool.size:
            raise SamplingError(f"class {cls} has {pool.size} samples, {k} requested")
        picked.append(np.sort(rng.choice(pool, size=k, replace=False)))
    return val.subset(np.concatenate(picked))


def remap_labels(ds: Dataset, mapping: dict[int, int | None], num_target_classes: int | None = None) -> Dataset:
    """Rewrite labels through ``mapping``; classes mapped to None or absent are dropped."""
    c_target = num_target_classes
    if c_target is None:
        targets = [t for t in mapping.values() if t is not None]
        c_target = max(targets) + 1 if targets else 0
    for src, tgt in mapping.items():
        if tgt is not None and not 0 <= tgt < c_target:
            raise InputError(f"target class {tgt} for source {src} outside [0, {c_target})")
    lut = np.full(ds.num_classes, -1, dtype=np.int64)
    for src, tgt in mapping.items():
        if tgt is not None and 0 <= src < ds.num_classes:
            lut[src] = tgt
    new = lut[ds.labels]
    keep = new >= 0
    if not keep.any():
        raise InputError("mapping drops every sample")
    return Dataset(ds.features[keep], new[keep], c_target)


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Header row, float feature columns, last column ``label`` (integer)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if not header or header[-1].strip() != "label":
            raise InputError(f"{path}: last header column must be 'label'")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]])
                lab = float(row[-1])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            if lab != int(lab):
                raise InputError(f"{path}:{lineno}: label must be an integer")
            labels.append(int(lab))
    if not rows:
        raise InputError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else int(labels_arr.max()) + 1
    return Dataset(np.asarray(rows), labels_arr, c)
