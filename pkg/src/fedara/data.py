"""Datasets, synthetic generation, CSV I/O and federated partitioning."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ContractError, Rng


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    """``features`` is ``n x d`` (one sample per row)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("features must be n x d with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels out of range")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


class Scheme(str, enum.Enum):
    DIRICHLET = "dirichlet"
    PATHOLOGICAL = "pathological"
    IID = "iid"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme
    num_clients: int
    seed: int = 0
    alpha: float = 0.1
    labels_per_client: int = 2

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.num_clients < 1:
            raise ContractError("num_clients must be >= 1")
        if self.scheme is Scheme.DIRICHLET and not self.alpha > 0:
            raise ContractError("Dirichlet alpha must be positive")
        if self.scheme is Scheme.PATHOLOGICAL and self.labels_per_client not in (1, 2):
            raise ContractError("labels_per_client must be 1 or 2")


def gen_synthetic(rng: Rng, n: int, d: int, classes: int, margin: float) -> Dataset:
    """Unit-covariance Gaussian clusters centred at ``margin * u_c``."""
    if classes < 2 or d < classes:
        raise ContractError("need classes >= 2 and d >= classes")
    if n < classes:
        raise ContractError("need at least one sample per class")
    dirs = rng.fork("means").normal((classes, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.arange(n) % classes
    labels = labels[rng.fork("labels").permutation(n)]
    noise = rng.fork("noise").normal((n, d))
    return Dataset(margin * dirs[labels] + noise, labels, classes)


def load_csv(path) -> Dataset:
    path = Path(path)
    rows, labels = [], []
    width = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            try:
                label = int(fields[0])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: label {fields[0]!r} is not an integer") from None
            if label < 0:
                raise ParseError(f"{path}:{lineno}: negative label {label}")
            try:
                feats = [float(v) for v in fields[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not feats:
                raise ParseError(f"{path}:{lineno}: row has no features")
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} features, got {len(feats)}")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    labels = np.array(labels)
    num_classes = int(labels.max()) + 1
    missing = np.flatnonzero(np.bincount(labels, minlength=num_classes) == 0)
    if missing.size:
        raise ParseError(f"{path}: classes {missing.tolist()} never appear")
    return Dataset(np.array(rows), labels, num_classes)


def save_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("# label,features...\n")
        for label, row in zip(dataset.labels, dataset.features):
            fh.write(",".join([str(int(label))] + [f"{v:.9g}" for v in row]) + "\n")


def _apportion(total: int, weights: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights`` (lowest index wins ties)."""
    exact = total * weights / weights.sum()
    out = np.minimum(np.floor(exact).astype(np.int64), caps)
    frac = exact - np.floor(exact)
    for i in np.lexsort((np.arange(len(frac)), -frac)):
        if out.sum() >= total:
            break
        if out[i] < caps[i]:
            out[i] += 1
    return out


def split(dataset: Dataset, rng: Rng, ratios=(8, 1, 1)) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split."""
    n = len(dataset)
    if n < 10:
        raise ContractError("split needs at least 10 samples")
    ratios = np.asarray(ratios, dtype=np.float64)
    totals = np.floor(n * ratios / ratios.sum() + 0.5).astype(np.int64)
    totals[-1] = n - totals[:-1].sum()

    counts = dataset.label_counts()
    present = counts[counts > 0]
    if present.min() < 3:
        warnings.warn("a class has fewer than 3 samples; falling back to an unstratified split")
        perm = rng.permutation(n)
        cuts = np.cumsum(totals)[:-1]
        return tuple(dataset.subset(np.sort(part)) for part in np.split(perm, cuts))

    pools = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    pools = [p[rng.fork(f"class{c}").permutation(p.size)] for c, p in enumerate(pools)]
    remaining = counts.copy()
    quotas = []
    for s in range(len(ratios) - 1):
        q = _apportion(int(totals[s]), counts * ratios[s], remaining)
        remaining -= q
        quotas.append(q)
    quotas.append(remaining)

    parts = [[] for _ in ratios]
    for c, pool in enumerate(pools):
        start = 0
        for s, q in enumerate(quotas):
            parts[s].append(pool[start:start + q[c]])
            start += q[c]
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


def partition(train: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Disjoint cover of ``range(len(train))`` by ``spec.num_clients`` shards."""
    n = len(train)
    if spec.num_clients > n:
        raise ContractError(f"{spec.num_clients} clients but only {n} samples")
    root = Rng(spec.seed).fork(f"partition/{spec.scheme.value}")
    for attempt in range(100):
        rng = root.fork(f"attempt{attempt}")
        if spec.scheme is Scheme.IID:
            shards = np.array_split(rng.permutation(n), spec.num_clients)
        elif spec.scheme is Scheme.PATHOLOGICAL:
            shards = _pathological(train, spec, rng)
        else:
            shards = _dirichlet(train, spec, rng)
        if all(len(s) > 0 for s in shards):
            return [np.sort(s) for s in shards]
    raise ContractError("could not produce a partition without empty clients in 100 draws")


def _pathological(train: Dataset, spec: PartitionSpec, rng: Rng) -> list[np.ndarray]:
    n_shards = spec.labels_per_client * spec.num_clients
    counts = train.label_counts()
    present = np.flatnonzero(counts)
    if n_shards < present.size:
        raise ContractError(
            f"{n_shards} shards cannot cover {present.size} labels without mixing labels in a shard"
        )
    # every present label gets >= 1 shard, the rest proportional to its size
    per_label = np.zeros(train.num_classes, dtype=np.int64)
    per_label[present] = 1
    extra = n_shards - present.size
    if extra:
        per_label[present] += _apportion(extra, counts[present].astype(float), counts[present] - 1)
    if per_label.sum() != n_shards:
        raise ContractError("not enough samples to fill every shard")
    order = np.argsort(train.labels, kind="stable")
    shards = []
    for c in present:
        pool = order[train.labels[order] == c]
        shards.extend(np.array_split(pool, per_label[c]))
    dealt = rng.permutation(n_shards)
    L = spec.labels_per_client
    return [np.concatenate([shards[j] for j in dealt[i * L:(i + 1) * L]]) for i in range(spec.num_clients)]


def _dirichlet(train: Dataset, spec: PartitionSpec, rng: Rng) -> list[np.ndarray]:
    C = train.num_classes
    gen = rng.generator
    pools = [np.flatnonzero(train.labels == c) for c in range(C)]
    pools = [list(p[gen.permutation(p.size)]) for p in pools]
    avail = np.array([len(p) for p in pools])
    sizes = [len(s) for s in np.array_split(np.arange(len(train)), spec.num_clients)]
    mixtures = gen.dirichlet(np.full(C, spec.alpha), size=spec.num_clients)

    shards = []
    for k, size in enumerate(sizes):
        take = np.zeros(C, dtype=np.int64)
        need = size
        while need > 0:
            p = np.where(avail - take > 0, mixtures[k], 0.0)
            if not p.sum() > 0:
                # preferred labels exhausted: fall back to what is left
                p = (avail - take).astype(np.float64)
            draw = gen.multinomial(need, p / p.sum())
            draw = np.minimum(draw, avail - take)
            take += draw
            need -= int(draw.sum())
        shard = []
        for c in range(C):
            shard.extend(pools[c][:take[c]])
            del pools[c][:take[c]]
        avail -= take
        shards.append(np.array(shard, dtype=np.int64))
    return shards


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of a label histogram."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0


def mean_client_entropy(train: Dataset, shards) -> float:
    return float(np.mean([label_entropy(train.labels[s], train.num_classes) for s in shards]))

