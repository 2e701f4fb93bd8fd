"""Episodic task engine: dataset wrapping, task transforms, lazy N-way K-shot
sampling with description caching, pluggable task samplers, and synthetic
desk-scale data sources.

TaskDataset semantics: with ``num_tasks >= 1`` the dataset has that length and
every index is sampled lazily once, cached as a TaskDescription, and replayed
bit-identically afterwards.  With ``num_tasks == -1`` the length is 1, nothing
is cached, and ``sample()`` draws a fresh task every call.
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, constant

MFT_MAGIC = b"MFT1"


class TaskError(Exception):
    pass


# ---------------------------------------------------------------------------
# dataset index

@dataclass
class MetaDatasetIndex:
    items: list[tuple[np.ndarray, int]]
    by_class: dict[int, list[int]]

    @property
    def feature_dim(self) -> int:
        return int(self.items[0][0].size)

    def class_ids(self) -> list[int]:
        return sorted(self.by_class)


def meta_dataset_wrap(items) -> MetaDatasetIndex:
    """Index a labeled dataset of (features, class id) pairs by class."""
    items = [(np.asarray(x, dtype=np.float64).reshape(-1), int(y)) for x, y in items]
    if not items:
        raise TaskError("cannot wrap an empty dataset")
    by_class: dict[int, list[int]] = {}
    for i, (_, y) in enumerate(items):
        by_class.setdefault(y, []).append(i)
    return MetaDatasetIndex(items, by_class)


# ---------------------------------------------------------------------------
# transforms

@dataclass(frozen=True)
class NWays:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise TaskError(f"NWays: n must be >= 2, got {self.n}")


@dataclass(frozen=True)
class KShots:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise TaskError(f"KShots: k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class LoadData:
    pass


@dataclass(frozen=True)
class DataSplit:
    t: int
    v: int

    def __post_init__(self):
        if self.t <= 0 or self.v < 0:
            raise TaskError(f"DataSplit: need t > 0, v >= 0, got ({self.t}, {self.v})")


@dataclass(frozen=True)
class LabelFree:
    pass


def _require_order(transforms) -> tuple[NWays, KShots, DataSplit | None, bool]:
    kinds = [type(t) for t in transforms]
    for cls in (NWays, KShots, LoadData):
        if kinds.count(cls) != 1:
            raise TaskError(f"transforms must include exactly one {cls.__name__}")
    order = [kinds.index(NWays), kinds.index(KShots), kinds.index(LoadData)]
    if order != sorted(order):
        raise TaskError("transforms must order NWays, KShots, LoadData")
    split = None
    label_free = False
    for t in transforms:
        if isinstance(t, DataSplit):
            split = t
        elif isinstance(t, LabelFree):
            label_free = True
    nways = next(t for t in transforms if isinstance(t, NWays))
    kshots = next(t for t in transforms if isinstance(t, KShots))
    return nways, kshots, split, label_free


def split_counts(k: int, split: DataSplit | None) -> tuple[int, int]:
    """Per-class (support, query) item counts.

    With DataSplit(t, v): the per-class pool is k*(t+v)/gcd(t, v) items, and
    support takes the t : v share of it, so (7, 3) with k = 1 gives the natural
    7 support / 3 query.  Without DataSplit an implicit (1, 1) split applies:
    k support and k fresh query items per class.
    """
    if split is None:
        return k, k
    g = math.gcd(split.t, split.v) if split.v else split.t
    pool = k * (split.t + split.v) // g
    support = max(1, round(pool * split.t / (split.t + split.v)))
    return support, pool - support


# ---------------------------------------------------------------------------
# task descriptions and episodes

@dataclass(frozen=True)
class TaskDescription:
    class_ids: tuple[int, ...]
    support: tuple[tuple[int, ...], ...]   # item indices per class
    query: tuple[tuple[int, ...], ...]
    signature: int


def _signature(class_ids, support, query) -> int:
    triples = []
    for new_label, cid in enumerate(class_ids):
        triples.extend((cid, idx, 0) for idx in support[new_label])
        triples.extend((cid, idx, 1) for idx in query[new_label])
    payload = repr(sorted(triples)).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


@dataclass(frozen=True)
class Episode:
    support_x: Tensor
    support_y: Tensor
    query_x: Tensor
    query_y: Tensor
    n_way: int
    k_shot: int
    signature: int
    label_free: bool = False

    @property
    def support_labels(self) -> np.ndarray:
        return np.asarray(self.support_y.data, dtype=np.int64).reshape(-1)

    @property
    def query_labels(self) -> np.ndarray:
        return np.asarray(self.query_y.data, dtype=np.int64).reshape(-1)


def materialize(desc: TaskDescription, source: MetaDatasetIndex) -> Episode:
    """Rebuild the episode an exact description denotes; labels re-indexed 0..n-1."""
    sx, sy, qx, qy = [], [], [], []
    for new_label, _ in enumerate(desc.class_ids):
        for idx in desc.support[new_label]:
            sx.append(source.items[idx][0])
            sy.append(new_label)
        for idx in desc.query[new_label]:
            qx.append(source.items[idx][0])
            qy.append(new_label)
    n = len(desc.class_ids)
    k = len(desc.support[0])
    return Episode(constant(np.stack(sx)), constant(np.asarray(sy, dtype=np.float64)),
                   constant(np.stack(qx)), constant(np.asarray(qy, dtype=np.float64)),
                   n, k, desc.signature)


def label_free(episode: Episode) -> Episode:
    """Instance discrimination: each support item becomes its own pseudo-class.

    A query item takes the pseudo-label of the support instance anchoring its
    original class (the first one, when k_shot > 1).  Idempotent.
    """
    if episode.label_free:
        return episode
    sup = episode.support_labels
    anchors: dict[int, int] = {}
    for pos, cls in enumerate(sup):
        anchors.setdefault(int(cls), pos)
    qy = np.asarray([anchors[int(c)] for c in episode.query_labels], dtype=np.float64)
    n = sup.size
    sig = int.from_bytes(
        hashlib.blake2b(struct.pack("<Q", episode.signature) + b"label_free",
                        digest_size=8).digest(), "big")
    return Episode(episode.support_x, constant(np.arange(n, dtype=np.float64)),
                   episode.query_x, constant(qy),
                   n, 1, sig, label_free=True)


# ---------------------------------------------------------------------------
# task dataset

class TaskDataset:
    """Lazily sampled episodic view over an indexed dataset.

    Episodes at a given index are derived from a per-index seed, so indexing
    is order-independent and cache replay is bit-identical.
    """

    def __init__(self, source: MetaDatasetIndex, transforms, num_tasks: int = -1,
                 seed: int = 0):
        if num_tasks == 0 or num_tasks < -1:
            raise TaskError(f"num_tasks must be >= 1 or -1, got {num_tasks}")
        self.source = source
        self.transforms = list(transforms)
        self.nways, self.kshots, self.split, self._label_free = _require_order(self.transforms)
        self.num_tasks = num_tasks
        self.seed = seed
        self.cache: dict[int, TaskDescription] = {}
        self._lock = threading.Lock()
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11CE)))
        self.sampler = UniformSampler()
        self._fresh_counter = 0

    def __len__(self) -> int:
        return 1 if self.num_tasks == -1 else self.num_tasks

    def set_sampler(self, sampler) -> None:
        if self.num_tasks == -1 and not isinstance(sampler, UniformSampler):
            raise TaskError(
                "non-uniform samplers need a finite task list (num_tasks >= 1)")
        self.sampler = sampler

    def _describe(self, rng: np.random.Generator) -> TaskDescription:
        n, k = self.nways.n, self.kshots.k
        classes = self.source.class_ids()
        if n > len(classes):
            raise TaskError(
                f"task needs {n} classes but dataset has {len(classes)}")
        n_support, n_query = split_counts(k, self.split)
        per_class = n_support + n_query
        chosen = rng.choice(classes, size=n, replace=False)
        support, query = [], []
        for cid in chosen:
            pool = self.source.by_class[int(cid)]
            if len(pool) < per_class:
                raise TaskError(
                    f"class {cid} has {len(pool)} items; task needs {per_class}")
            picked = rng.choice(pool, size=per_class, replace=False)
            support.append(tuple(int(i) for i in picked[:n_support]))
            query.append(tuple(int(i) for i in picked[n_support:]))
        class_ids = tuple(int(c) for c in chosen)
        sig = _signature(class_ids, support, query)
        return TaskDescription(class_ids, tuple(support), tuple(query), sig)

    def description(self, i: int) -> TaskDescription:
        if not 0 <= i < len(self):
            raise TaskError(f"index {i} out of range for length {len(self)}")
        with self._lock:
            cached = self.cache.get(i)
        if cached is not None:
            return cached
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, i)))
        desc = self._describe(rng)
        if self.num_tasks != -1:
            with self._lock:
                desc = self.cache.setdefault(i, desc)
        return desc

    def __getitem__(self, i: int) -> Episode:
        ep = materialize(self.description(i), self.source)
        return label_free(ep) if self._label_free else ep

    def sample(self) -> Episode:
        if self.num_tasks == -1:
            self._fresh_counter += 1
            rng = np.random.default_rng(
                np.random.SeedSequence((self.seed, 0xF4E5, self._fresh_counter)))
            ep = materialize(self._describe(rng), self.source)
            return label_free(ep) if self._label_free else ep
        return self[self.sampler.choose(self)]

    def feedback(self, signature: int, loss_value: float) -> None:
        self.sampler.feedback(signature, loss_value)


def task_dataset_new(source, transforms, num_tasks=-1, seed=0) -> TaskDataset:
    return TaskDataset(source, transforms, num_tasks=num_tasks, seed=seed)


# ---------------------------------------------------------------------------
# diversity score and samplers

def diversity_score(desc: TaskDescription, source: MetaDatasetIndex) -> float:
    """Mean pairwise Euclidean distance between per-class centroids of the
    selected items; invariant to class relabeling and rigid translation."""
    if len(desc.class_ids) < 2:
        raise TaskError("diversity_score needs a description with >= 2 classes")
    centroids = []
    for c in range(len(desc.class_ids)):
        idx = list(desc.support[c]) + list(desc.query[c])
        centroids.append(np.mean([source.items[i][0] for i in idx], axis=0))
    total, pairs = 0.0, 0
    for i in range(len(centroids)):
        for j in range(i + 1, len(centroids)):
            total += float(np.linalg.norm(centroids[i] - centroids[j]))
            pairs += 1
    return total / pairs


class UniformSampler:
    """Equiprobable index choice."""

    def choose(self, ts: TaskDataset) -> int:
        return int(ts.rng.integers(len(ts)))

    def feedback(self, signature, loss_value):
        pass


class DiversitySampler:
    """Ranks every candidate description by diversity score and draws
    uniformly from the top (high) or bottom (low) quartile."""

    def __init__(self, high: bool):
        self.high = high
        self._ranked: list[int] | None = None
        self._ranked_for: int | None = None

    def choose(self, ts: TaskDataset) -> int:
        if self._ranked is None or self._ranked_for != id(ts):
            scores = [diversity_score(ts.description(i), ts.source)
                      for i in range(len(ts))]
            order = np.argsort(np.asarray(scores), kind="stable")
            self._ranked = [int(i) for i in (order[::-1] if self.high else order)]
            self._ranked_for = id(ts)
        quart = max(1, len(self._ranked) // 4)
        return self._ranked[int(ts.rng.integers(quart))]

    def feedback(self, signature, loss_value):
        pass


class AdaptiveSampler:
    """Draws indices with probability softmax(ema loss per signature).

    Before any feedback every weight is exp(0), i.e. the sampler falls back
    to uniform.  EMA decay 0.9, initialized to the first observed loss.
    """

    def __init__(self, decay: float = 0.9, temperature: float = 1.0):
        self.decay = decay
        self.temperature = temperature
        self.ema: dict[int, float] = {}

    def choose(self, ts: TaskDataset) -> int:
        sigs = [ts.description(i).signature for i in range(len(ts))]
        scores = np.asarray([self.ema.get(s, 0.0) for s in sigs]) / self.temperature
        scores -= scores.max()
        weights = np.exp(scores)
        probs = weights / weights.sum()
        return int(ts.rng.choice(len(ts), p=probs))

    def feedback(self, signature, loss_value):
        prev = self.ema.get(signature)
        if prev is None:
            self.ema[signature] = float(loss_value)
        else:
            self.ema[signature] = self.decay * prev + (1.0 - self.decay) * float(loss_value)


def sampler_select(strategy: str, **kw):
    """One of uniform | low_diversity | high_diversity | adaptive."""
    if strategy == "uniform":
        return UniformSampler()
    if strategy == "low_diversity":
        return DiversitySampler(high=False)
    if strategy == "high_diversity":
        return DiversitySampler(high=True)
    if strategy == "adaptive":
        return AdaptiveSampler(**kw)
    raise TaskError(f"unknown sampler strategy '{strategy}'")


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SinusoidTasks:
    """Regression task family: y = A sin(x + phase), x in [-5, 5]."""
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, np.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        if self.amplitude[1] <= 0 or self.amplitude[0] > self.amplitude[1]:
            raise TaskError(f"bad amplitude range {self.amplitude}")

    def sample(self, k_support: int, k_query: int, rng: np.random.Generator) -> Episode:
        amp = rng.uniform(*self.amplitude)
        ph = rng.uniform(*self.phase)
        xs = rng.uniform(*self.x_range, size=(k_support + k_query, 1))
        ys = amp * np.sin(xs + ph)
        return _regression_episode(xs, ys, k_support, (amp, ph))


def _regression_episode(xs, ys, k_support, task_params) -> Episode:
    sig = int.from_bytes(
        hashlib.blake2b(xs.tobytes() + struct.pack(f"<{len(task_params)}d", *task_params),
                        digest_size=8).digest(), "big")
    return Episode(constant(xs[:k_support]), constant(ys[:k_support]),
                   constant(xs[k_support:]), constant(ys[k_support:]),
                   0, k_support, sig)


@dataclass
class SeriesTasks:
    """Next-value prediction on A sin(w t + phase) series, window of 4 lags."""
    amplitude: tuple[float, float] = (0.5, 2.0)
    frequency: tuple[float, float] = (0.3, 1.2)
    window: int = 4

    def sample(self, k_support: int, k_query: int, rng: np.random.Generator) -> Episode:
        amp = rng.uniform(*self.amplitude)
        freq = rng.uniform(*self.frequency)
        ph = rng.uniform(0.0, 2 * np.pi)
        n = k_support + k_query
        starts = rng.uniform(0.0, 20.0, size=n)
        xs = np.stack([amp * np.sin(freq * (s + np.arange(self.window)) + ph)
                       for s in starts])
        ys = (amp * np.sin(freq * (starts + self.window) + ph))[:, None]
        return _regression_episode(xs, ys, k_support, (amp, freq, ph))


def make_blobs(n_classes: int, per_class: int, dim: int,
               centroid_spread: float, noise: float, seed: int = 0):
    """Gaussian cluster dataset with integer labels; deterministic under seed."""
    if n_classes < 1 or per_class < 1 or dim < 1:
        raise TaskError("blobs: counts and dim must be positive")
    if centroid_spread <= 0 or noise < 0:
        raise TaskError("blobs: centroid_spread must be > 0 and noise >= 0")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB10B5)))
    centroids = rng.normal(scale=centroid_spread, size=(n_classes, dim))
    items = []
    for c in range(n_classes):
        pts = centroids[c] + rng.normal(scale=noise, size=(per_class, dim)) \
            if noise > 0 else np.repeat(centroids[c][None, :], per_class, axis=0)
        items.extend((pts[i], c) for i in range(per_class))
    return items, centroids


def bayes_accuracy(centroids: np.ndarray, noise: float, n_samples: int = 20000,
                   seed: int = 0) -> float:
    """Monte-Carlo accuracy of the optimal (nearest-centroid) classifier."""
    if noise == 0:
        return 1.0
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7E5)))
    n_classes, dim = centroids.shape
    labels = rng.integers(0, n_classes, size=n_samples)
    pts = centroids[labels] + rng.normal(scale=noise, size=(n_samples, dim))
    d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == labels).mean())


def synth_tasks(kind: str, params: dict | None = None, seed: int = 0):
    """Desk-scale data sources: 'blobs' -> labeled dataset (list of (x, y));
    'sinusoid' -> regression task family."""
    params = dict(params or {})
    if kind == "sinusoid":
        return SinusoidTasks(
            amplitude=tuple(params.get("amplitude", (0.1, 5.0))),
            phase=tuple(params.get("phase", (0.0, np.pi))))
    if kind == "series":
        return SeriesTasks()
    if kind == "blobs":
        items, _ = make_blobs(
            n_classes=int(params.get("classes", 8)),
            per_class=int(params.get("per_class", 20)),
            dim=int(params.get("dim", 4)),
            centroid_spread=float(params.get("centroid_spread", 10.0)),
            noise=float(params.get("noise", 1.0)),
            seed=seed)
        return items
    raise TaskError(f"unknown synthetic kind '{kind}'")


# ---------------------------------------------------------------------------
# file ingestion: CSV with header (label, f0..fd) and binary MFT1

def load_csv(path) -> list[tuple[np.ndarray, int]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise TaskError(f"{path}: expected header starting with 'label'")
        dim = len(header) - 1
        items = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise TaskError(f"{path}:{lineno}: expected {dim + 1} columns")
            items.append((np.asarray([float(v) for v in row[1:]]), int(row[0])))
    if not items:
        raise TaskError(f"{path}: no data rows")
    return items


def save_csv(path, items) -> None:
    dim = int(np.asarray(items[0][0]).size)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(dim)])
        for x, y in items:
            writer.writerow([int(y)] + [repr(float(v)) for v in np.asarray(x).reshape(-1)])


def load_binary(path) -> list[tuple[np.ndarray, int]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MFT_MAGIC:
            raise TaskError(f"{path}: bad magic, expected MFT1")
        count, dim = struct.unpack("<II", fh.read(8))
        feats = np.frombuffer(fh.read(8 * count * dim), dtype="<f8").reshape(count, dim)
        labels = np.frombuffer(fh.read(4 * count), dtype="<u4")
        if labels.size != count:
            raise TaskError(f"{path}: truncated label block")
    return [(np.array(feats[i]), int(labels[i])) for i in range(count)]


def save_binary(path, items) -> None:
    feats = np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x, _ in items])
    labels = np.asarray([y for _, y in items], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(MFT_MAGIC)
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.astype("<f8").tobytes())
        fh.write(labels.tobytes())
