import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.optimize import linear_sum_assignment

from octd.clustering import (DEFAULT_WEIGHTS, DegenerateFeaturesError, FeatureField, LabelMap,
                             build_features, label_smooth, nearest_centroid, ward_cluster,
                             ward_merges, ward_partition)

from . import oracles


def same_partition(a, b):
    """True when two labelings induce the same partition."""
    a, b = np.ravel(a), np.ravel(b)
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def blob_features(seed=0, n_per=40, centres=((0, 0), (10, 10)), spread=0.1):
    rng = np.random.default_rng(seed)
    pts = np.concatenate([rng.normal(c, spread, size=(n_per, 2)) for c in centres])
    truth = np.repeat(np.arange(len(centres)), n_per)
    return pts, truth


def field_from_points(pts, shape, intensity=None):
    feats = pts.reshape(*shape, 2)
    if intensity is None:
        intensity = feats[..., 0]
    return FeatureField(feats, DEFAULT_WEIGHTS, np.asarray(intensity).reshape(shape))


def test_build_features_zscore_and_weights(rng):
    img = rng.gamma(2.0, 1.0, size=(10, 12))
    att = rng.random((10, 12)) * 3
    ff = build_features(img, att)
    assert ff.weights == pytest.approx(DEFAULT_WEIGHTS)
    np.testing.assert_allclose(ff.features[..., 0], 0.3 * (img - img.mean()) / img.std())
    np.testing.assert_allclose(ff.features[..., 1], 0.7 * (att - att.mean()) / att.std())
    ff2 = build_features(img, att, 7, 3)
    np.testing.assert_allclose(ff2.features, ff.features)
    np.testing.assert_array_equal(ff.intensity, img)


def test_build_features_degenerate_and_masked():
    ff = build_features(np.full((4, 4), 3.0), np.full((4, 4), 1.0))
    assert np.all(ff.features == 0)
    x = np.arange(16.0).reshape(4, 4)
    assert np.all(build_features(x, x[::-1], 1.0, 0.0).features[..., 0] == 0)
    with pytest.raises(ValueError):
        build_features(x, x[:2])
    with pytest.raises(ValueError):
        build_features(x, x, 0, 0)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("k", [2, 3, 4, 6])
def test_ward_partition_matches_scipy(seed, k):
    pts = np.random.default_rng(seed).normal(size=(60, 2)) * [1.0, 3.0]
    ours = ward_partition(pts, k)
    ref = fcluster(linkage(pts, "ward"), k, criterion="maxclust")
    assert same_partition(ours, ref)


def test_ward_merge_heights_match_scipy(rng):
    pts = rng.normal(size=(50, 3))
    ours = np.sort(np.sqrt([m[2] for m in ward_merges(pts)]))
    ref = np.sort(linkage(pts, "ward")[:, 2])
    np.testing.assert_allclose(ours, ref, rtol=1e-9, atol=1e-12)


def test_two_blobs_split_exactly():
    pts, truth = blob_features()
    ff = field_from_points(pts, (8, 10))
    lm = ward_cluster(ff, k=2, sample_size=10_000)
    assert same_partition(lm.labels, truth)
    assert sorted(lm.counts()) == [40, 40]


def test_k1_labels_everything_one(rng):
    ff = build_features(rng.random((6, 7)), rng.random((6, 7)))
    lm = ward_cluster(ff, k=1)
    assert np.all(lm.labels == 1) and lm.k == 1


def test_full_data_equals_exact_ward_on_all_pixels():
    pts, truth = blob_features(seed=3, n_per=512, centres=((0, 0), (5, 0), (0, 5), (5, 5)),
                               spread=0.4)
    ff = field_from_points(pts, (32, 64))
    lm = ward_cluster(ff, k=4, sample_size=10_000)
    exact = fcluster(linkage(pts, "ward"), 4, criterion="maxclust")
    assert same_partition(lm.labels, exact)
    assert same_partition(lm.labels, truth)


def test_subsample_then_assign_on_blobs():
    pts, truth = blob_features(seed=5, n_per=1500, centres=((0, 0), (4, 0), (0, 4)), spread=0.3)
    ff = field_from_points(pts, (50, 90))
    lm = ward_cluster(ff, k=3, sample_size=300, seed=9)
    assert same_partition(lm.labels, truth)


def test_labels_ordered_by_brightness():
    pts, truth = blob_features(centres=((0, 0), (10, 10), (20, 0)))
    intensity = np.array([5.0, 9.0, 1.0])[truth]
    lm = ward_cluster(field_from_points(pts, (10, 12), intensity), k=3)
    # brightest cloud (centre 10,10) gets label 1, dimmest label 3
    assert np.all(lm.labels.ravel()[truth == 1] == 1)
    assert np.all(lm.labels.ravel()[truth == 0] == 2)
    assert np.all(lm.labels.ravel()[truth == 2] == 3)


def test_every_label_used_and_deterministic(rng):
    ff = build_features(rng.gamma(2.0, 1.0, size=(30, 40)), rng.random((30, 40)))
    a = ward_cluster(ff, k=4, sample_size=200, seed=5)
    b = ward_cluster(ff, k=4, sample_size=200, seed=5)
    assert np.array_equal(a.labels, b.labels)
    assert np.all(a.counts() > 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_partition_invariant_under_common_rescaling(seed, factor):
    rng = np.random.default_rng(seed)
    ff = build_features(rng.gamma(2.0, 1.0, size=(12, 15)), rng.random((12, 15)))
    a = ward_cluster(ff, k=3, sample_size=100, seed=seed)
    b = ward_cluster(ff.rescaled(factor), k=3, sample_size=100, seed=seed)
    assert np.array_equal(a.labels, b.labels)


def test_degenerate_features():
    ff = build_features(np.ones((5, 5)), np.ones((5, 5)))
    with pytest.raises(DegenerateFeaturesError, match="degenerate features"):
        ward_cluster(ff, k=2)
    with pytest.raises(ValueError):
        ward_cluster(ff, k=2, sample_size=1)


def test_nearest_centroid_ties_go_low():
    cen = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert list(nearest_centroid(np.array([[0.0, 0.0], [0.9, 0.0], [-2, 0]]), cen)) == [0, 0, 1]


def test_label_map_validation():
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 1]]), 2)
    with pytest.raises(ValueError):
        LabelMap(np.array([[1, 3]]), 2)


def test_label_smooth_uniform_unchanged():
    lm = LabelMap(np.full((9, 9), 2), 3)
    for mode in ("max", "majority"):
        assert np.all(label_smooth(lm, (5, 5), mode).labels == 2)


def test_majority_removes_dissenter():
    lab = np.ones((7, 7), dtype=int)
    lab[3, 3] = 4
    assert np.all(label_smooth(LabelMap(lab, 4), (5, 5)).labels == 1)


def test_max_mode_takes_largest_label():
    lab = np.array([[1, 1, 3]])
    out = label_smooth(LabelMap(lab, 3), (1, 3), "max").labels
    assert list(out[0]) == [1, 3, 3]


def test_majority_tie_goes_to_lowest_label():
    lab = np.array([[2, 2, 1, 1]])
    out = label_smooth(LabelMap(lab, 2), (1, 3), "majority").labels
    # windows: [2,2] [2,2,1] [2,1,1] [1,1]
    assert list(out[0]) == [2, 2, 1, 1]
    lab = np.array([[3, 1]])
    assert list(label_smooth(LabelMap(lab, 3), (1, 3)).labels[0]) == [1, 1]


def test_label_smooth_bad_mode():
    with pytest.raises(ValueError):
        label_smooth(LabelMap(np.ones((3, 3), dtype=int), 1), 3, "median")


def brute_majority(lab, n1, n2):
    out = np.empty_like(lab)
    for i in range(lab.shape[0]):
        for j in range(lab.shape[1]):
            votes = {}
            for l, m in oracles.window_pixels(lab, i, j, n1, n2):
                votes[lab[l, m]] = votes.get(lab[l, m], 0) + 1
            top = max(votes.values())
            out[i, j] = min(v for v, c in votes.items() if c == top)
    return out


@pytest.mark.parametrize("seed", range(4))
def test_majority_matches_brute_force(seed):
    lab = np.random.default_rng(seed).integers(1, 5, size=(13, 11))
    np.testing.assert_array_equal(label_smooth(LabelMap(lab, 4), (3, 5)).labels,
                                  brute_majority(lab, 3, 5))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_majority_idempotent_on_large_regions(seed):
    # layered bands, each thicker than the window
    rng = np.random.default_rng(seed)
    heights = rng.integers(6, 12, size=5)
    bands = rng.integers(1, 4, size=5)
    lab = np.repeat(np.repeat(bands, heights)[:, None], 17, axis=1)
    assert np.array_equal(label_smooth(LabelMap(lab, 3), (5, 5)).labels, lab)
    lab[rng.integers(0, lab.shape[0], 8), rng.integers(0, 17, 8)] = rng.integers(1, 4, 8)
    once = label_smooth(LabelMap(lab, 3), (5, 5))
    twice = label_smooth(once, (5, 5))
    assert np.array_equal(once.labels, twice.labels)


def test_hungarian_agreement_matches_enumeration(rng):
    truth = rng.integers(1, 5, size=(9, 9))
    pred = np.where(rng.random((9, 9)) < 0.7, (truth % 4) + 1, rng.integers(1, 5, size=(9, 9)))
    cm = np.zeros((4, 4))
    np.add.at(cm, (pred.ravel() - 1, truth.ravel() - 1), 1)
    r, c = linear_sum_assignment(-cm)
    assert cm[r, c].sum() / truth.size == pytest.approx(
        oracles.best_permutation_agreement(pred, truth))
