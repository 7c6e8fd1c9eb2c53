"""Per-pixel features, Ward-linkage clustering and label-map smoothing."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import as_array, box_sum, thread_count, window_spec

DEFAULT_WEIGHTS = (0.7, 0.3)    # (attenuation, intensity)
DEFAULT_SAMPLE_SIZE = 2000

INTENSITY, ATTENUATION = 0, 1


class DegenerateFeaturesError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureField:
    """Normalized, weighted per-pixel features.

    ``features[..., 0]`` is the intensity channel and ``features[..., 1]``
    the attenuation channel. ``intensity`` keeps the raw image so clusters
    can be ordered by brightness.
    """

    features: np.ndarray
    weights: tuple[float, float]
    intensity: np.ndarray

    @property
    def shape(self):
        return self.features.shape[:2]

    def flat(self) -> np.ndarray:
        return self.features.reshape(-1, self.features.shape[-1])

    def rescaled(self, factor: float) -> "FeatureField":
        return FeatureField(self.features * factor, self.weights, self.intensity)


@dataclass(frozen=True)
class LabelMap:
    """Cluster index per pixel in 1..k, with optional per-cluster summaries."""

    labels: np.ndarray
    k: int
    centroids: np.ndarray | None = None
    sizes: np.ndarray | None = None

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError("label map must be 2-D")
        if lab.size and (lab.min() < 1 or lab.max() > self.k):
            raise ValueError(f"labels must lie in [1, {self.k}]")
        object.__setattr__(self, "labels", lab.astype(np.int32, copy=False))

    @property
    def shape(self):
        return self.labels.shape

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.k + 1)[1:]


def labels_of(lm) -> np.ndarray:
    return lm.labels if isinstance(lm, LabelMap) else np.asarray(lm)


def _zscore(a: np.ndarray) -> np.ndarray:
    std = a.std()
    if not std > 0:
        return np.zeros_like(a)
    return (a - a.mean()) / std


def build_features(img, att, w1: float = DEFAULT_WEIGHTS[0],
                   w2: float = DEFAULT_WEIGHTS[1]) -> FeatureField:
    """Z-score each channel over the image, then weight.

    ``w1`` weights attenuation and ``w2`` intensity; the pair is rescaled
    to sum to 1. A constant channel normalizes to 0.
    """
    x = as_array(img)
    mu = np.asarray(att, dtype=np.float64)
    if x.shape != mu.shape:
        raise ValueError(f"image {x.shape} and attenuation map {mu.shape} differ in shape")
    if w1 < 0 or w2 < 0 or not w1 + w2 > 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    total = w1 + w2
    w1, w2 = w1 / total, w2 / total
    feats = np.stack([w2 * _zscore(x), w1 * _zscore(mu)], axis=-1)
    return FeatureField(feats, (w1, w2), x)


# -- Ward agglomeration -----------------------------------------------------

def ward_merges(points: np.ndarray) -> list[tuple[int, int, float]]:
    """Full Ward dendrogram by the nearest-neighbour-chain algorithm.

    Distances start as squared Euclidean and are updated with the
    Lance-Williams Ward recurrence. Each merge is reported as
    ``(slot_a, slot_b, cost)`` where the merged cluster keeps ``slot_a``;
    ``cost`` is twice the increase in within-cluster sum of squares.
    Merges come out in chain order, not sorted by cost.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        return []
    sq = np.einsum("ij,ij->i", pts, pts)
    dist = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
    np.maximum(dist, 0.0, out=dist)
    np.fill_diagonal(dist, np.inf)
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    merges = []
    chain: list[int] = []

    for _ in range(n - 1):
        if not chain:
            chain.append(int(np.argmax(active)))
        while True:
            a = chain[-1]
            b = int(np.argmin(dist[a]))
            if len(chain) > 1:
                prev = chain[-2]
                # prefer the previous chain element on ties so the chain terminates
                if dist[a, prev] <= dist[a, b]:
                    b = prev
                if b == prev:
                    break
            chain.append(b)
        chain.pop()
        chain.pop()
        a, b = (a, b) if a < b else (b, a)
        d_ab = dist[a, b]
        na, nb = size[a], size[b]
        nk = size
        row = ((na + nk) * dist[a] + (nb + nk) * dist[b] - nk * d_ab) / (na + nb + nk)
        row[~active] = np.inf
        row[a] = np.inf
        row[b] = np.inf
        dist[a, :] = row
        dist[:, a] = row
        dist[b, :] = np.inf
        dist[:, b] = np.inf
        size[a] = na + nb
        active[b] = False
        merges.append((a, b, float(d_ab)))
    return merges


def ward_partition(points: np.ndarray, k: int) -> np.ndarray:
    """Cut the Ward dendrogram at ``k`` clusters.

    Returns 0-based cluster ids numbered in order of each cluster's first
    member.
    """
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    merges = ward_merges(points)
    order = sorted(range(len(merges)), key=lambda i: merges[i][2])
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for idx in order[:n - k]:
        a, b, _ = merges[idx]
        ra, rb = find(a), find(b)
        parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse]


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per point; ties go to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)

    def assign(chunk):
        d = ((chunk[:, None, :] - cen[None, :, :]) ** 2).sum(axis=-1)
        return np.argmin(d, axis=1)

    workers = min(thread_count(), max(1, len(pts) // 50_000))
    if workers == 1:
        return assign(pts)
    bounds = np.linspace(0, len(pts), workers + 1).astype(int)
    with ThreadPoolExecutor(workers) as pool:
        parts = pool.map(assign, [pts[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])])
    return np.concatenate(list(parts))


def ward_cluster(ff: FeatureField, k: int = 4, sample_size: int = DEFAULT_SAMPLE_SIZE,
                 seed: int = 0) -> LabelMap:
    """Ward clustering on a seeded pixel sample, extended by nearest centroid.

    A uniform sample of ``min(sample_size, N)`` pixels (all pixels, in
    raster order, when ``sample_size >= N``) is clustered exactly with
    Ward's criterion down to ``k`` clusters. Every pixel then takes the
    label of the nearest cluster centroid. Labels are finally renumbered
    so that 1 is the cluster with the highest mean raw intensity.
    """
    pts = ff.flat()
    n = len(pts)
    if k < 1:
        raise ValueError("k must be at least 1")
    if sample_size < k:
        raise ValueError(f"sample_size={sample_size} is smaller than k={k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the pixel count {n}")
    if sample_size >= n:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=sample_size, replace=False))
    sample = pts[idx]
    if len(np.unique(sample, axis=0)) < k:
        raise DegenerateFeaturesError(
            f"degenerate features: fewer than k={k} distinct feature vectors in the sample")

    part = ward_partition(sample, k)
    centroids = np.stack([sample[part == c].mean(axis=0) for c in range(k)])
    assigned = nearest_centroid(pts, centroids)

    brightness = np.full(k, -np.inf)
    intensity = ff.intensity.ravel()
    sums = np.bincount(assigned, weights=intensity, minlength=k)
    sizes = np.bincount(assigned, minlength=k)
    nonempty = sizes > 0
    brightness[nonempty] = sums[nonempty] / sizes[nonempty]
    order = np.lexsort((np.arange(k), -brightness))   # brightest first, stable
    relabel = np.empty(k, dtype=np.int32)
    relabel[order] = np.arange(1, k + 1)
    labels = relabel[assigned].reshape(ff.shape)
    return LabelMap(labels, k, centroids=centroids[order], sizes=sizes[order])


# -- smoothing --------------------------------------------------------------

def label_smooth(lm, w=(5, 5), mode: str = "majority") -> LabelMap:
    """Neighbourhood filter on a label map with border-clipped windows.

    ``mode="max"`` takes the largest label in the window. ``mode="majority"``
    takes the most frequent label, ties going to the lowest label.
    """
    lab = labels_of(lm)
    k = lm.k if isinstance(lm, LabelMap) else int(lab.max())
    w = window_spec(w)
    if mode == "max":
        out = ndimage.maximum_filter(lab, size=tuple(w), mode="nearest")
    elif mode == "majority":
        present = np.unique(lab)
        best = np.full(lab.shape, -1.0)
        out = np.zeros_like(lab)
        for label in present:   # ascending, so strict '>' keeps the lowest on ties
            votes = box_sum((lab == label).astype(np.float64), w)
            better = votes > best + 0.5
            out[better] = label
            best[better] = votes[better]
    else:
        raise ValueError(f"unknown smoothing mode {mode!r}")
    if isinstance(lm, LabelMap):
        return LabelMap(out, k, lm.centroids, lm.sizes)
    return LabelMap(out, k)
