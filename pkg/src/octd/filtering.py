"""Adaptive Wiener filtering, plain and cluster-masked."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .clustering import labels_of
from .image import as_array, box_sum, local_stats, thread_count, window_spec


@dataclass(frozen=True)
class MaskedStats:
    """Same-cluster window statistics per pixel."""

    mean: np.ndarray
    var: np.ndarray
    count: np.ndarray


def wiener_gain(local_var, noise_var) -> np.ndarray:
    """``max(0, local_var - noise_var) / local_var``, 0 where ``local_var`` is 0."""
    local_var = np.asarray(local_var, dtype=np.float64)
    excess = np.maximum(local_var - noise_var, 0.0)
    out = np.zeros(np.broadcast(local_var, excess).shape)
    np.divide(excess, local_var, out=out, where=local_var > 0)
    return out


def wiener_update(pixel, mean, local_var, noise_var):
    """Shrink ``pixel`` toward ``mean`` by the Wiener gain."""
    return mean + wiener_gain(local_var, noise_var) * (pixel - mean)


def wiener(img, w=(5, 5), noise_var: float | None = None) -> np.ndarray:
    """Adaptive Wiener filter with border-clipped local statistics.

    When ``noise_var`` is not given it is estimated as the mean of the
    local-variance map.
    """
    x = as_array(img)
    mean, var = local_stats(x, w)
    if noise_var is None:
        noise_var = float(var.mean())
    elif noise_var < 0:
        raise ValueError("noise variance must be nonnegative")
    return wiener_update(x, mean, var, noise_var)


def _check_pair(x: np.ndarray, lab: np.ndarray):
    if x.shape != lab.shape:
        raise ValueError(f"image {x.shape} and label map {lab.shape} differ in shape")


def masked_stats(img, lm, w=(5, 5)) -> MaskedStats:
    """Mean and population variance over window pixels sharing the centre's label."""
    x = as_array(img)
    lab = labels_of(lm)
    _check_pair(x, lab)
    w = window_spec(w)
    ref = x.flat[0]
    d = x - ref
    present = np.unique(lab)

    def per_label(label):
        m = lab == label
        md = np.where(m, d, 0.0)
        cnt = box_sum(m.astype(np.float64), w)
        s1 = box_sum(md, w)
        s2 = box_sum(md * md, w)
        return m, cnt[m], s1[m], s2[m]

    workers = min(thread_count(), len(present))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(per_label, present))
    else:
        parts = [per_label(label) for label in present]

    count = np.empty(x.shape)
    mean = np.empty(x.shape)
    var = np.empty(x.shape)
    for m, cnt, s1, s2 in parts:
        mu = s1 / cnt
        count[m] = cnt
        mean[m] = mu
        var[m] = s2 / cnt - mu * mu
    np.maximum(var, 0.0, out=var)
    mean += ref
    # a lone in-cluster pixel is its own mean, exactly
    single = count == 1
    mean[single] = x[single]
    var[single] = 0.0
    return MaskedStats(mean, var, count)


def cluster_noise(ms: MaskedStats, lm) -> dict[int, float]:
    """Per-cluster noise variance: mean masked variance over the cluster's pixels."""
    lab = labels_of(lm)
    _check_pair(ms.var, lab)
    flat = lab.ravel()
    present = np.unique(flat)
    sums = np.bincount(flat, weights=ms.var.ravel())
    counts = np.bincount(flat)
    return {int(k): float(sums[k] / counts[k]) for k in present}


def noise_map(profile: dict[int, float], lm) -> np.ndarray:
    lab = labels_of(lm)
    lut = np.zeros(lab.max() + 1)
    for k, v in profile.items():
        lut[k] = v
    return lut[lab]


def cff_filter(img, lm, w=(5, 5), return_parts: bool = False):
    """Cluster-based Wiener filter.

    Each pixel is pulled toward its same-cluster window mean with gain
    ``max(0, v - s) / v``, where ``v`` is the masked local variance and
    ``s`` the cluster's noise variance.
    """
    x = as_array(img)
    ms = masked_stats(x, lm, w)
    profile = cluster_noise(ms, lm)
    out = wiener_update(x, ms.mean, ms.var, noise_map(profile, lm))
    if return_parts:
        return out, ms, profile
    return out
