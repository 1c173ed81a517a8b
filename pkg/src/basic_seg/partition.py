"""Class-balanced subclass partition of the labeled set.

A supervised backbone maps labeled pixels to feature vectors; every
foreground class is split into ``K_c`` clusters of (nearly) equal size, with
``K_c`` proportional to the class's pixel count. Background stays subclass 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import segnet
from .autodiff import Tensor
from .data import Dataset, read_container, write_container


@dataclass
class SubclassTable:
    """Parent/subclass bookkeeping; ``parent_of[s]`` is the parent of subclass ``s``."""

    parent_of: np.ndarray
    children_of: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.parent_of = np.asarray(self.parent_of, dtype=np.int64)
        if not self.children_of:
            for s, p in enumerate(self.parent_of):
                self.children_of.setdefault(int(p), []).append(s)
        self.validate()

    @classmethod
    def identity(cls, num_classes: int) -> "SubclassTable":
        return cls(np.arange(num_classes))

    @classmethod
    def from_counts(cls, counts) -> "SubclassTable":
        """Contiguous ids in parent order; ``counts[0]`` must be 1 (background)."""
        return cls(np.repeat(np.arange(len(counts)), counts))

    @property
    def num_classes(self) -> int:
        return int(self.parent_of.max()) + 1

    @property
    def num_subclasses(self) -> int:
        return len(self.parent_of)

    @property
    def K(self) -> int:
        return self.num_classes - 1

    @property
    def K_sub(self) -> int:
        return self.num_subclasses - 1

    def validate(self) -> None:
        if self.parent_of.size == 0 or self.parent_of[0] != 0 or self.children_of.get(0) != [0]:
            raise ValueError("background must map to itself only (subclass 0 <-> class 0)")
        parents = set(range(self.num_classes))
        if set(self.children_of) != parents:
            raise ValueError("every parent class needs at least one subclass")
        seen = sorted(s for kids in self.children_of.values() for s in kids)
        if seen != list(range(self.num_subclasses)):
            raise ValueError("children_of must partition the subclass ids")
        for p, kids in self.children_of.items():
            if kids != sorted(kids) or any(self.parent_of[s] != p for s in kids):
                raise ValueError(f"children_of[{p}] disagrees with parent_of")

    def membership(self) -> np.ndarray:
        """(K_sub+1) x (K+1) 0/1 matrix with a one at (subclass, parent)."""
        m = np.zeros((self.num_subclasses, self.num_classes))
        m[np.arange(self.num_subclasses), self.parent_of] = 1.0
        return m

    def counts(self) -> np.ndarray:
        return np.bincount(self.parent_of, minlength=self.num_classes)

    def to_text(self) -> str:
        return "".join(f"{s} {p}\n" for s, p in enumerate(self.parent_of))

    @classmethod
    def from_text(cls, text: str) -> "SubclassTable":
        rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
        pairs = sorted((int(a), int(b)) for a, b in rows)
        if [s for s, _ in pairs] != list(range(len(pairs))):
            raise ValueError("subclass ids must be contiguous from 0")
        return cls(np.array([p for _, p in pairs]))


# ---------------------------------------------------------------- counts


def allocate_subclass_counts(pixel_counts) -> np.ndarray:
    """Subclasses per class: ``max(1, round(p_c / min_fg p))``, background 1.

    Counts are also capped at the class's pixel count.
    """
    counts = np.asarray(pixel_counts, dtype=np.int64)
    fg = counts[1:]
    if np.any(fg <= 0):
        missing = [int(c) + 1 for c in np.flatnonzero(fg <= 0)]
        raise ValueError(f"foreground class(es) {missing} have no pixels and cannot be partitioned")
    s = fg.min()
    k = np.maximum(1, np.floor(fg / s + 0.5).astype(np.int64))
    return np.concatenate([[1], np.minimum(k, fg)])


# ---------------------------------------------------------------- clustering


def _sqdist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = _sqdist(points, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=closest / total)
        centers.append(points[idx])
        closest = np.minimum(closest, _sqdist(points, points[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def _check_k(n: int, k: int) -> None:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")


def _centroids(points: np.ndarray, assign: np.ndarray, k: int, previous: np.ndarray) -> np.ndarray:
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, assign, points)
    sizes = np.bincount(assign, minlength=k)
    out = previous.copy()
    live = sizes > 0
    out[live] = sums[live] / sizes[live, None]
    return out


def capacity_assign(dist: np.ndarray) -> np.ndarray:
    """Greedy balanced assignment from an n x k distance matrix.

    Pairs are visited by increasing distance; each unassigned point joins its
    pair's cluster if capacity remains. ``n mod k`` clusters may reach
    ``ceil(n/k)``; once they have, every other cluster is capped at
    ``floor(n/k)``.
    """
    n, k = dist.shape
    q, r = divmod(n, k)
    order = np.argsort(dist, axis=None, kind="stable")
    rows, cols = (order // k).tolist(), (order % k).tolist()
    sizes = [0] * k
    assign = [-1] * n
    at_ceiling = 0
    remaining = n
    for i, j in zip(rows, cols):
        if assign[i] >= 0:
            continue
        size = sizes[j]
        if size < q or (size == q and at_ceiling < r):
            assign[i] = j
            sizes[j] = size + 1
            if size == q:
                at_ceiling += 1
            remaining -= 1
            if remaining == 0:
                break
    assign = np.asarray(assign, dtype=np.int64)
    return assign


def swap_pass(points: np.ndarray, assign: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """One sweep of best-improving local moves on the exact objective.

    For each point the best of two size-preserving moves is applied if it
    lowers the within-cluster sum of squares: swapping ``x_i`` (cluster ``a``)
    with ``x_j`` (cluster ``b``), which changes the objective by
    ``-2 (m_a - m_b) . d - |d|^2 (1/n_a + 1/n_b)`` with ``d = x_j - x_i``; or,
    when ``a`` holds ``ceil(n/k)`` points, relocating ``x_i`` to a cluster
    holding ``floor(n/k)``. Means are updated after every accepted move.
    Returns the new assignment and whether anything changed.
    """
    assign = assign.copy()
    n = len(points)
    floor = n // k
    sizes = np.bincount(assign, minlength=k).astype(np.float64)
    means = _centroids(points, assign, k, np.zeros((k, points.shape[1])))
    changed = False
    for i in range(n):
        a = assign[i]
        x = points[i]
        d = points - x
        diff = means[a] - means[assign]
        inv = 1.0 / sizes[a] + 1.0 / sizes[assign]
        delta = -2.0 * np.einsum("ij,ij->i", diff, d) - (d * d).sum(1) * inv
        delta[assign == a] = np.inf
        j = int(np.argmin(delta))
        best_swap = delta[j]
        best_move, target = np.inf, -1
        if sizes[a] == floor + 1 and sizes[a] > 1:
            gain_out = sizes[a] / (sizes[a] - 1) * ((x - means[a]) ** 2).sum()
            cost_in = sizes / (sizes + 1) * ((means - x) ** 2).sum(1)
            cost_in[sizes != floor] = np.inf
            target = int(np.argmin(cost_in))
            best_move = cost_in[target] - gain_out
        if min(best_swap, best_move) >= -1e-12:
            continue
        changed = True
        if best_move < best_swap:
            means[a] = (means[a] * sizes[a] - x) / (sizes[a] - 1)
            means[target] = (means[target] * sizes[target] + x) / (sizes[target] + 1)
            sizes[a] -= 1
            sizes[target] += 1
            assign[i] = target
        else:
            b = assign[j]
            shift = points[j] - x
            means[a] += shift / sizes[a]
            means[b] -= shift / sizes[b]
            assign[i], assign[j] = b, a
    return assign, changed


def objective(points: np.ndarray, assign: np.ndarray, k: int) -> float:
    """Within-cluster sum of squared distances to cluster means."""
    total = 0.0
    for c in range(k):
        members = points[assign == c]
        if len(members):
            total += float(((members - members.mean(0)) ** 2).sum())
    return total


def _balanced_run(points, k, rng, max_iters, max_passes):
    centroids = kmeans_pp(points, k, rng)
    assign = None
    for _ in range(max_iters):
        new = capacity_assign(_sqdist(points, centroids))
        centroids = _centroids(points, new, k, centroids)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
    for _ in range(max_passes):
        new, changed = swap_pass(points, new, k)
        if not changed:
            break
    return new


def balanced_kmeans(
    points, k: int, seed: int = 0, max_iters: int = 100, restarts: int = 10, max_passes: int = 20
) -> tuple[np.ndarray, np.ndarray]:
    """Size-constrained k-means: every cluster holds floor(n/k) or ceil(n/k) points.

    Runs ``restarts`` seedings (greedy capacity assignment alternating with
    centroid updates, then local-move passes until none improves) and keeps
    the lowest objective.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    best, best_obj = None, np.inf
    for _ in range(1 if k == 1 else restarts):
        assign = _balanced_run(points, k, rng, max_iters, max_passes)
        obj = objective(points, assign, k)
        if obj < best_obj:
            best, best_obj = assign, obj
    return best, _centroids(points, best, k, np.zeros((k, points.shape[1])))


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd k-means (no size constraint), k-means++ seeding."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp(points, k, rng)
    assign = None
    for _ in range(max_iters):
        dist = _sqdist(points, centroids)
        new = np.argmin(dist, axis=1)
        sizes = np.bincount(new, minlength=k)
        for c in np.flatnonzero(sizes == 0):
            far = int(np.argmax(dist[np.arange(n), new]))
            new[far] = c
            dist[far] = 0.0
        centroids = _centroids(points, new, k, centroids)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
    return new, centroids


CLUSTERERS = {"balanced": balanced_kmeans, "kmeans": kmeans}


# ---------------------------------------------------------------- pipeline


def pretrain_backbone(labeled: Dataset, net_config: segnet.NetConfig, iterations: int, seed: int = 0, **overrides):
    """Supervised MoS-only training on the labeled set.

    Returns ``(state, loss_log)``.
    """
    from .trainer import TrainConfig, fit

    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    opts = dict(
        iterations=iterations, seed=seed, semi_supervised=False, use_scs=False,
        mu=0.0, lambda1_max=0.0, lambda2=0.0, lambda3=0.0,
    )
    opts.update(overrides)
    result = fit(labeled, None, None, TrainConfig(**opts), net_config=net_config)
    return result.state, result.losses


def extract_features(backbone: segnet.ModelState, images) -> np.ndarray:
    """Per-pixel features (N x C x H x W): the MoS decoder's last hidden map.

    Uses the backbone's student weights in eval mode.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    out = segnet.run(backbone, "student", Tensor(x), mode="eval", tasks=("mos",), features=True)
    return out["mos_features"].data


def group_by_class(features: np.ndarray, labels: np.ndarray, num_classes: int):
    """{class: (vectors p_c x C, coordinates p_c x 3 of (image, row, col))}."""
    groups = {}
    for c in range(num_classes):
        coords = np.argwhere(labels == c)
        vecs = features[coords[:, 0], :, coords[:, 1], coords[:, 2]]
        groups[c] = (vecs, coords)
    return groups


@dataclass
class Partition:
    table: SubclassTable
    sub_labels: np.ndarray  # N x H x W


def build_partition(
    backbone: segnet.ModelState,
    labeled: Dataset,
    cap_per_class: int = 20000,
    seed: int = 0,
    method: str = "balanced",
    features: np.ndarray | None = None,
) -> Partition:
    """Cluster each foreground class's pixel features into balanced subclasses.

    Pixels outside the clustered subsample take the nearest centroid of their
    own class, so the result always refines the parent labels.
    """
    cluster = CLUSTERERS[method]
    if features is None:
        features = extract_features(backbone, labeled.images)
    groups = group_by_class(features, labeled.labels, labeled.num_classes)
    counts = allocate_subclass_counts([len(groups[c][0]) for c in range(labeled.num_classes)])
    table = SubclassTable.from_counts(counts)
    sub = np.zeros_like(labeled.labels)
    for c in range(1, labeled.num_classes):
        vecs, coords = groups[c]
        k = int(counts[c])
        first = table.children_of[c][0]
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        if len(vecs) > cap_per_class:
            pick = np.sort(rng.choice(len(vecs), cap_per_class, replace=False))
        else:
            pick = np.arange(len(vecs))
        assign_sub, centroids = cluster(vecs[pick], k, seed=int(rng.integers(2**31)))
        assign = np.argmin(_sqdist(vecs, centroids), axis=1)
        assign[pick] = assign_sub
        sub[coords[:, 0], coords[:, 1], coords[:, 2]] = first + assign
    return Partition(table, sub)


def save_partition(directory, partition: Partition, labeled: Dataset) -> None:
    """Write ``table.txt`` ("subclass_id parent_id" lines) and ``labeled.segd``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "table.txt").write_text(partition.table.to_text())
    ds = Dataset(labeled.images, labeled.labels, labeled.num_classes, partition.sub_labels, partition.table.num_subclasses)
    write_container(directory / "labeled.segd", ds)


def load_partition(directory) -> tuple[Partition, Dataset]:
    directory = Path(directory)
    table = SubclassTable.from_text((directory / "table.txt").read_text())
    ds = read_container(directory / "labeled.segd")
    if ds.sub_labels is None or ds.num_subclasses != table.num_subclasses:
        raise ValueError(f"{directory}: subclass maps do not match table.txt")
    return Partition(table, ds.sub_labels), ds
