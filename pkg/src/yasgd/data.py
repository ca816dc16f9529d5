"""Synthetic classification data and per-rank sharding.

Every rank regenerates the full dataset and the per-epoch permutation from
the shared seed, so sharding needs no communication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng

SPLITS = {"train": 0, "eval": 1}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per sample required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self):
        return self.features.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.features[idx], self.labels[idx]


def gen_dataset(seed: int, n: int, d: int, num_classes: int, *, split: str = "train",
                clusters_per_class: int = 3, noise: float = 1.0, spread: float = 1.0) -> Dataset:
    """Gaussian-mixture data with several clusters per class.

    Cluster centers depend only on ``seed``; the samples depend on
    ``(seed, split)``, so train and eval splits share the same underlying
    distribution.  Several clusters per class make the problem nonlinear.
    """
    if n < 1 or d < 1 or num_classes < 2 or clusters_per_class < 1:
        raise ValueError("need n >= 1, d >= 1, num_classes >= 2, clusters_per_class >= 1")
    n_clusters = num_classes * clusters_per_class
    centers = spread * rng.normal(seed, rng.stream_id(rng.DATA_STRUCTURE, 0), n_clusters * d).reshape(n_clusters, d)

    stream = SPLITS[split]
    u = rng.uniform(seed, rng.stream_id(rng.DATA_SAMPLES, 2 * stream), n)
    cluster = np.minimum((u * n_clusters).astype(np.int64), n_clusters - 1)
    eps = rng.normal(seed, rng.stream_id(rng.DATA_SAMPLES, 2 * stream + 1), n * d).reshape(n, d)
    features = (centers[cluster] + noise * eps).astype(np.float32)
    labels = cluster // clusters_per_class
    return Dataset(features, labels, num_classes, seed)


def iteration_sizes(n: int, world: int, batch_per_rank: int) -> list[int]:
    """Per-rank batch size of each iteration in one epoch.

    Full iterations consume ``world * batch_per_rank`` samples.  A leftover
    of ``r`` samples forms one extra iteration of ``r // world`` samples per
    rank when ``r`` holds at least one full per-rank batch; otherwise it is
    dropped.
    """
    if world < 1 or batch_per_rank < 1:
        raise ValueError("world and batch_per_rank must be >= 1")
    global_batch = world * batch_per_rank
    full, rest = divmod(n, global_batch)
    sizes = [batch_per_rank] * full
    if rest >= batch_per_rank and rest // world >= 1:
        sizes.append(rest // world)
    return sizes


def iterations_per_epoch(n: int, world: int, batch_per_rank: int) -> int:
    return len(iteration_sizes(n, world, batch_per_rank))


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return rng.permutation(seed, rng.stream_id(rng.PERMUTATION, epoch), n)


def shard(dataset: Dataset | int, epoch: int, rank: int, world: int, batch_per_rank: int,
          seed: int | None = None) -> list[np.ndarray]:
    """Sample indices for ``rank`` in ``epoch``, one array per iteration.

    Iteration ``i`` takes the next ``world * size_i`` entries of the epoch
    permutation; rank ``r`` gets the ``r``-th contiguous slice of them.
    ``dataset`` may be a sample count, in which case ``seed`` is required.
    """
    if not 0 <= rank < world:
        raise ValueError(f"rank {rank} outside world of size {world}")
    if isinstance(dataset, Dataset):
        n, seed = len(dataset), dataset.seed if seed is None else seed
    else:
        n = int(dataset)
        if seed is None:
            raise ValueError("seed required when sharding by sample count")
    perm = epoch_permutation(seed, epoch, n)
    out = []
    pos = 0
    for size in iteration_sizes(n, world, batch_per_rank):
        start = pos + rank * size
        out.append(perm[start:start + size])
        pos += world * size
    return out
