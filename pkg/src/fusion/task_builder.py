"""Cluster-driven task construction.

Partitions an embedding set with k-means, then turns each cluster into a
few-shot task: the cluster plays the role of one pseudo-class, roughly two
thirds of it becomes the support set, and the query set mixes the remaining
third with random samples drawn from other clusters.  Cluster sizes are
whatever k-means produced, so tasks are naturally unbalanced; the helpers at
the bottom (truncation, augmentation, loss-balancing weights) are the three
ways of compensating for that.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data_io import Dataset, EmbeddingSet, LabeledExample
from .errors import ConfigError, TaskError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterAssignment:
    """Result of partitioning an embedding set.

    `indices` maps assignment rows back to dataset positions, so a truncated
    assignment (see truncate_to_balanced) stays usable for task construction.
    """

    pseudo_labels: np.ndarray
    k: int
    centroids: np.ndarray
    inertia: float
    inertia_history: tuple = ()
    indices: np.ndarray = None

    def __post_init__(self):
        labels = np.asarray(self.pseudo_labels, dtype=np.int64)
        object.__setattr__(self, "pseudo_labels", labels)
        if labels.ndim != 1 or labels.size == 0:
            raise ValidationError("pseudo-labels must be a non-empty vector")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if labels.min() < 0 or labels.max() >= self.k:
            raise ValidationError("pseudo-labels out of range [0, k)")
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.shape[0] != self.k:
            raise ValidationError("centroid count must equal k")
        object.__setattr__(self, "centroids", centroids)
        if not np.isfinite(self.inertia):
            raise ValidationError("inertia must be finite")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(labels.size, dtype=np.int64))
        else:
            idx = np.asarray(self.indices, dtype=np.int64)
            if idx.shape != labels.shape:
                raise ValidationError("indices must align with pseudo-labels")
            object.__setattr__(self, "indices", idx)
        object.__setattr__(
            self, "inertia_history", tuple(float(v) for v in self.inertia_history)
        )

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.pseudo_labels, minlength=self.k)

    def members(self, cluster_id: int) -> np.ndarray:
        """Dataset indices belonging to one cluster."""
        if not (0 <= cluster_id < self.k):
            raise TaskError(f"cluster id {cluster_id} out of range [0, {self.k})")
        return self.indices[self.pseudo_labels == cluster_id]

    def usable_clusters(self, min_size: int = 2) -> np.ndarray:
        """Clusters large enough to split into support and query."""
        sizes = self.sizes
        usable = np.nonzero(sizes >= min_size)[0]
        skipped = np.nonzero(sizes < min_size)[0]
        if skipped.size:
            logger.warning(
                "skipping %d cluster(s) with fewer than %d elements: %s",
                skipped.size, min_size, skipped.tolist(),
            )
        return usable

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("index,pseudo_label\n")
            for i, lab in zip(self.indices, self.pseudo_labels):
                f.write(f"{i},{lab}\n")


@dataclass(frozen=True)
class Task:
    """A support/query split over one pseudo-class.

    Every example's label is the cluster id of the element itself, so query
    items imported from other clusters keep their own pseudo-labels.
    """

    support: tuple
    query: tuple
    cluster_id: int
    support_indices: np.ndarray = field(default=None)
    query_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if len(self.support) < 1:
            raise TaskError("task needs at least one support example")
        if len(self.query) < 1:
            raise TaskError("task needs at least one query example")
        for ex in self.support:
            if ex.y != self.cluster_id:
                raise TaskError("support examples must carry the task's own pseudo-label")

    @property
    def support_x(self) -> torch.Tensor:
        return torch.stack([ex.x for ex in self.support])

    @property
    def query_x(self) -> torch.Tensor:
        return torch.stack([ex.x for ex in self.query])

    @property
    def query_y(self) -> torch.Tensor:
        return torch.tensor([ex.y for ex in self.query], dtype=torch.int64)


@dataclass(frozen=True)
class BalancingVector:
    """Per-cluster outer-loss weights in [0, 1] plus the inputs that shaped them."""

    gamma_norm: np.ndarray
    epsilon: float
    c_max: int
    c_min: int

    def __post_init__(self):
        g = np.asarray(self.gamma_norm, dtype=np.float64)
        object.__setattr__(self, "gamma_norm", g)
        if not np.isfinite(g).all():
            raise ValidationError("balancing weights must be finite")
        if (g < 0).any() or (g > 1).any():
            raise ValidationError("balancing weights must lie in [0, 1]")

    def __getitem__(self, cluster_id: int) -> float:
        return float(self.gamma_norm[cluster_id])

    def __len__(self) -> int:
        return self.gamma_norm.size

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("cluster_id,gamma_norm\n")
            for i, g in enumerate(self.gamma_norm):
                f.write(f"{i},{repr(float(g))}\n")


def _squared_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * (x @ c.T)
    return np.maximum(d2, 0.0)


def _plus_plus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _squared_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid; fall back to
            # picking any index not already chosen
            remaining = np.setdiff1d(np.arange(n), np.array(chosen))
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, _squared_distances(x, x[chosen[-1:]])[:, 0])
    return x[chosen].copy()


def kmeans_partition(
    embeddings: EmbeddingSet, k: int, seed: int = 0, max_iters: int = 300
) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired each iteration by stealing the point that is
    currently farthest from its own centroid, which keeps the recorded
    inertia trace non-increasing.
    """
    x = embeddings.vectors.astype(np.float64)
    n = x.shape[0]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of points ({n})")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {max_iters}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    centroids = _plus_plus_init(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history = []
    for _ in range(max_iters):
        d2 = _squared_distances(x, centroids)
        new_labels = d2.argmin(axis=1)

        counts = np.bincount(new_labels, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            own = d2[np.arange(n), new_labels]
            own[counts[new_labels] <= 1] = -1.0  # never orphan a singleton
            thief = int(own.argmax())
            counts[new_labels[thief]] -= 1
            new_labels[thief] = empty
            counts[empty] += 1

        for c in range(k):
            centroids[c] = x[new_labels == c].mean(axis=0)
        inertia = float(((x - centroids[new_labels]) ** 2).sum())
        history.append(inertia)
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break

    return ClusterAssignment(
        pseudo_labels=labels,
        k=k,
        centroids=centroids,
        inertia=history[-1],
        inertia_history=tuple(history),
    )


def support_size(cluster_size: int) -> int:
    """Two thirds of the cluster (rounded up), but always leaving at least
    one element on the query side."""
    if cluster_size < 2:
        raise TaskError(f"cannot split a cluster of size {cluster_size}")
    return min(math.ceil(2 * cluster_size / 3), cluster_size - 1)


def make_unbalanced_task(
    assignment: ClusterAssignment,
    dataset: Dataset,
    cluster_id: int,
    q_random: int = 10,
    seed: int = 0,
) -> Task:
    """Build the task for one cluster.

    The cluster's own elements are shuffled and split support/query; the
    query side additionally receives q_random elements sampled (without
    replacement, within this task) from the other clusters.
    """
    if q_random < 0:
        raise ConfigError(f"q_random must be >= 0, got {q_random}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    own = assignment.members(cluster_id)
    if own.size < 2:
        raise TaskError(
            f"cluster {cluster_id} has {own.size} element(s); need >= 2 to form a task"
        )
    own = rng.permutation(own)
    n_support = support_size(own.size)
    support_idx = own[:n_support]
    same_query_idx = own[n_support:]

    other_mask = assignment.pseudo_labels != cluster_id
    others = assignment.indices[other_mask]
    other_labels = assignment.pseudo_labels[other_mask]
    if q_random > 0:
        if others.size < q_random:
            raise TaskError(
                f"asked for {q_random} cross-cluster query samples but only "
                f"{others.size} exist outside cluster {cluster_id}"
            )
        pick = rng.choice(others.size, size=q_random, replace=False)
        rand_idx, rand_labels = others[pick], other_labels[pick]
    else:
        rand_idx = np.empty(0, dtype=np.int64)
        rand_labels = np.empty(0, dtype=np.int64)

    support = tuple(LabeledExample(dataset.images[i], cluster_id) for i in support_idx)
    query = tuple(LabeledExample(dataset.images[i], cluster_id) for i in same_query_idx)
    query += tuple(
        LabeledExample(dataset.images[i], int(c)) for i, c in zip(rand_idx, rand_labels)
    )
    return Task(
        support=support,
        query=query,
        cluster_id=cluster_id,
        support_indices=support_idx,
        query_indices=np.concatenate([same_query_idx, rand_idx]),
    )


def make_balanced_task(
    dataset: Dataset,
    class_id: int,
    n_support: int = 10,
    n_query_same: int = 5,
    n_query_random: int = 10,
    seed: int = 0,
) -> Task:
    """Fixed-size task built from true labels (oracle/supervised mode)."""
    if n_support < 1 or n_query_same < 1 or n_query_random < 0:
        raise ConfigError("need n_support >= 1, n_query_same >= 1, n_query_random >= 0")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    own = dataset.class_indices(class_id)
    if own.size < n_support + n_query_same:
        raise TaskError(
            f"class {class_id} has {own.size} samples; need "
            f"{n_support + n_query_same} for a balanced task"
        )
    own = rng.permutation(own)
    support_idx = own[:n_support]
    same_idx = own[n_support : n_support + n_query_same]
    rand_idx = np.empty(0, dtype=np.int64)
    if n_query_random > 0:
        others = np.nonzero((dataset.labels != class_id).numpy())[0]
        if others.size < n_query_random:
            raise TaskError("not enough other-class samples for the query set")
        rand_idx = rng.choice(others, size=n_query_random, replace=False)

    support = tuple(LabeledExample(dataset.images[i], class_id) for i in support_idx)
    query = tuple(LabeledExample(dataset.images[i], class_id) for i in same_idx)
    query += tuple(
        LabeledExample(dataset.images[i], int(dataset.labels[i])) for i in rand_idx
    )
    return Task(
        support=support,
        query=query,
        cluster_id=class_id,
        support_indices=support_idx,
        query_indices=np.concatenate([same_idx, rand_idx]),
    )


def truncate_to_balanced(
    assignment: ClusterAssignment, n: int, seed: int = 0
) -> ClusterAssignment:
    """Force every cluster to exactly n elements.

    Clusters smaller than n are dropped and ids compacted; larger ones are
    subsampled without replacement.  Inertia fields carry over unchanged
    since no new clustering happens here.
    """
    if n < 2:
        raise ConfigError(f"target cluster size must be >= 2, got {n}")
    sizes = assignment.sizes
    survivors = [c for c in range(assignment.k) if sizes[c] >= n]
    if not survivors:
        raise ConfigError(f"no cluster has >= {n} elements; nothing survives truncation")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))

    keep_indices, keep_labels, keep_centroids = [], [], []
    for new_id, c in enumerate(survivors):
        members = assignment.members(c)
        pick = rng.choice(members.size, size=n, replace=False)
        keep_indices.append(np.sort(members[pick]))
        keep_labels.append(np.full(n, new_id, dtype=np.int64))
        keep_centroids.append(assignment.centroids[c])
    return ClusterAssignment(
        pseudo_labels=np.concatenate(keep_labels),
        k=len(survivors),
        centroids=np.stack(keep_centroids),
        inertia=assignment.inertia,
        inertia_history=assignment.inertia_history,
        indices=np.concatenate(keep_indices),
    )


def compute_balancing_vector(sizes, epsilon: float = 1e-8) -> BalancingVector:
    """Per-cluster outer-loss weights that favor small clusters.

    Raw weight for a cluster of size C is (C_max - C_min) / (C - C_min + eps),
    then the vector is min-max normalized into [0, 1].  Equal-sized clusters
    all get weight 1.  The largest cluster lands exactly at 0, which silences
    its tasks entirely; that is logged because it is easy to miss.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or sizes.size == 0:
        raise ValidationError("sizes must be a non-empty vector")
    if (sizes < 1).any():
        raise ValidationError("cluster sizes must all be >= 1")
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    c_min, c_max = sizes.min(), sizes.max()
    if c_max == c_min:
        norm = np.ones_like(sizes)
    else:
        gamma = (c_max - c_min) / (sizes - c_min + epsilon)
        g_min, g_max = gamma.min(), gamma.max()
        norm = (gamma - g_min) / (g_max - g_min)
        if (norm[sizes == c_max] == 0.0).any():
            logger.warning(
                "loss balancing assigns weight 0 to the largest cluster "
                "(size %d); its tasks will not contribute to training",
                int(c_max),
            )
    return BalancingVector(
        gamma_norm=norm, epsilon=epsilon, c_max=int(c_max), c_min=int(c_min)
    )


def proportional_sample_size(
    cluster_size: int, min_n: int, max_n: int, min_size: int, max_size: int
) -> int:
    """Map a cluster size linearly onto a sample-count range.

    The smallest cluster maps to min_n, the largest to max_n, everything in
    between rounds to the nearest integer on the line through those points.
    """
    if min_n > max_n:
        raise ValidationError(f"min_n {min_n} exceeds max_n {max_n}")
    if not (min_size <= cluster_size <= max_size):
        raise ValidationError(
            f"cluster_size {cluster_size} outside [{min_size}, {max_size}]"
        )
    if min_size == max_size:
        return min_n
    frac = (cluster_size - min_size) / (max_size - min_size)
    return int(round(min_n + frac * (max_n - min_n)))


_CROP_FRACTIONS = (0.75, 0.80, 0.85, 0.90)


def _augment_one(img: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Apply a random non-empty subset of the augmentation ops to one image."""

    def coin() -> bool:
        return bool(torch.rand((), generator=gen) < 0.5)

    def uniform(lo: float, hi: float) -> float:
        return float(torch.empty(()).uniform_(lo, hi, generator=gen))

    c, h, w = img.shape
    while True:
        flags = [coin() for _ in range(5)]
        if any(flags):
            break
    out = img
    if flags[0]:
        out = TF.hflip(out)
    if flags[1]:
        out = TF.vflip(out)
    if flags[2]:
        out = TF.affine(
            out,
            angle=uniform(-15.0, 15.0),
            translate=[int(round(uniform(-0.1, 0.1) * w)), int(round(uniform(-0.1, 0.1) * h))],
            scale=uniform(0.9, 1.1),
            shear=[0.0],
            interpolation=TF.InterpolationMode.BILINEAR,
        )
    if flags[3]:
        frac = _CROP_FRACTIONS[int(torch.randint(len(_CROP_FRACTIONS), (), generator=gen))]
        ch, cw = max(1, round(h * frac)), max(1, round(w * frac))
        top = int(torch.randint(h - ch + 1, (), generator=gen))
        left = int(torch.randint(w - cw + 1, (), generator=gen))
        out = TF.resized_crop(out, top, left, ch, cw, [h, w], antialias=True)
    if flags[4]:
        out = TF.adjust_brightness(out, uniform(0.8, 1.2))
        out = TF.adjust_contrast(out, uniform(0.8, 1.2))
        if c == 3:
            out = TF.adjust_saturation(out, uniform(0.8, 1.2))
            out = TF.adjust_hue(out, uniform(-0.02, 0.02))
    return out.clamp(0.0, 1.0)


def augment_to_size(cluster_examples, target: int, seed: int = 0) -> list:
    """Grow (or shrink) a cluster's example list to exactly `target` entries.

    Undersized clusters keep all originals (in order) and append jittered
    copies of randomly chosen sources; oversized clusters are subsampled
    without replacement.  Labels are never touched.
    """
    examples = list(cluster_examples)
    if not examples:
        raise ValidationError("cluster_examples must be non-empty")
    if target < 1:
        raise ConfigError(f"target size must be >= 1, got {target}")
    n = len(examples)
    if n == target:
        return examples
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    if n > target:
        keep = np.sort(rng.choice(n, size=target, replace=False))
        return [examples[i] for i in keep]
    gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
    out = list(examples)
    for _ in range(target - n):
        src = examples[int(torch.randint(n, (), generator=gen))]
        out.append(LabeledExample(_augment_one(src.x, gen), src.y))
    return out
