"""Acceptance suite: one test per criterion, each printing a pass/fail line."""

import time

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from octd.clustering import LabelMap
from octd.filtering import cff_filter, masked_stats, wiener
from octd.image import Image, Roi, local_stats
from octd.metrics import auto_rois, cnr, default_background, epi, evaluate, layer_snr, snr, ssim
from octd.optics import (TABLE1_REDUCED_SCATTERING, average_frames, estimate_attenuation,
                         speckle_frames, synthesize_phantom, table1_phantom)
from octd.pipeline import RunConfig, run_cff, run_wiener, segment

from . import oracles
from .conftest import random_case

SEEDS = (42, 43, 44, 45, 46)


def close(a, b, rtol=1e-9, atol=1e-12):
    return bool(np.allclose(a, b, rtol=rtol, atol=atol))


def agreement(labels, truth, k=4):
    cm = np.zeros((k, k))
    np.add.at(cm, (labels.ravel() - 1, truth.ravel() - 1), 1)
    r, c = linear_sum_assignment(-cm)
    return cm[r, c].sum() / truth.size


@pytest.fixture(scope="module")
def phantom_runs():
    """Noisy, clean, truth, Wiener and CFF outputs for the five seeded phantoms."""
    runs = {}
    for seed in SEEDS:
        noisy, truth, clean = synthesize_phantom(table1_phantom(seed=seed))
        runs[seed] = dict(noisy=noisy, truth=truth, clean=clean,
                          wiener=run_wiener(noisy), cff=run_cff(noisy))
    return runs


def test_c01_oracle_equivalence(criterion):
    spent, bad = 0.0, []
    for seed in range(20):
        x, lab = random_case(seed, max_side=32, min_side=16)
        lm = LabelMap(lab, 4)
        rng = np.random.default_rng(seed)
        y = x * rng.gamma(4.0, 0.25, size=x.shape)
        bg = Roi(0, 0, 6, 6)
        rois = [Roi(8, 8, 5, 5), Roi(x.shape[0] - 6, x.shape[1] - 7, 5, 6)]

        t0 = time.perf_counter()
        got = dict(local_stats=local_stats(x, (5, 5)), masked=masked_stats(x, lm, (5, 5)),
                   cff=cff_filter(x, lm, (5, 5)), snr=snr(x, bg), cnr=cnr(x, rois, bg),
                   epi=epi(x, y), ssim=ssim(x, y))
        spent += time.perf_counter() - t0

        om, ov = oracles.local_stats(x, 5, 5)
        mm, mv, _ = oracles.masked_stats(x, lab, 5, 5)
        checks = {
            "local_stats": close(got["local_stats"][0], om) and close(got["local_stats"][1], ov),
            "masked_stats": close(got["masked"].mean, mm) and close(got["masked"].var, mv),
            "cff_filter": close(got["cff"], oracles.cff_filter(x, lab, 5, 5)),
            "snr": close(got["snr"], oracles.snr(x, *bg), atol=0),
            "cnr": close(got["cnr"], oracles.cnr(x, rois, bg), atol=0),
            "epi": close(got["epi"], oracles.epi(x, y), atol=0),
            "ssim": close(got["ssim"], oracles.ssim(x, y), atol=0),
        }
        bad += [f"{name}@seed{seed}" for name, ok in checks.items() if not ok]
    criterion(1, not bad and spent < 10.0,
              f"7 operations x 20 images match brute force within 1e-9 "
              f"(mismatches: {bad or 'none'}), implementation time {spent:.2f} s < 10 s")


def test_c02_single_cluster_reduction(criterion):
    worst = 0.0
    for seed in range(10):
        x = np.random.default_rng(seed).gamma(2.0, 3.0, size=(40, 36))
        _, var = local_stats(x, (5, 5))
        a = cff_filter(x, LabelMap(np.ones(x.shape, dtype=int), 1), (5, 5))
        b = wiener(x, (5, 5), noise_var=float(var.mean()))
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))))
    criterion(2, worst <= 1e-9, f"max relative difference {worst:.2e} <= 1e-9 over 10 images")


def test_c03_clustering_accuracy(criterion):
    noisy, truth, _ = synthesize_phantom(table1_phantom(rows=400, cols=300, speckle_shape=4.0,
                                                        seed=42))
    t0 = time.perf_counter()
    _, _, smooth = segment(noisy, RunConfig(k=4))
    elapsed = time.perf_counter() - t0
    acc = agreement(smooth.labels, truth)
    criterion(3, acc >= 0.90 and elapsed < 20.0,
              f"pixel agreement {acc:.3f} (need >= 0.90), runtime {elapsed:.2f} s (< 20 s)")


def test_c04_edge_preservation_trend(criterion, phantom_runs):
    gaps = {}
    for seed, r in phantom_runs.items():
        gaps[seed] = epi(r["clean"], r["cff"].filtered) - epi(r["clean"], r["wiener"])
    ok = all(g >= 0.02 for g in gaps.values())
    detail = ", ".join(f"{s}:{g:+.4f}" for s, g in gaps.items())
    criterion(4, ok, f"EPI(CFF) - EPI(Wiener) per seed [{detail}] (need >= +0.02 each)")


def test_c05_improvement_trend(criterion, phantom_runs):
    failures, parts = [], []
    for seed, r in phantom_runs.items():
        o = evaluate(r["noisy"], "original", r["clean"])
        w = evaluate(r["wiener"], "wiener", r["clean"])
        c = evaluate(r["cff"].filtered, "cff", r["clean"])
        dw, dc = w.snr_db - o.snr_db, c.snr_db - o.snr_db
        if not dc >= dw - 0.5:
            failures.append(f"{seed}:snr")
        if not c.cnr >= w.cnr:
            failures.append(f"{seed}:cnr")
        if not (dw >= 3.0 and dc >= 3.0):
            failures.append(f"{seed}:gain")
        parts.append(f"{seed}: dSNR w {dw:.2f} c {dc:.2f}, CNR w {w.cnr:.3f} c {c.cnr:.3f}")
    criterion(5, not failures, f"failed checks {failures or 'none'}; " + "; ".join(parts))


def test_c06_layer_snr_trend(criterion, phantom_runs):
    r = phantom_runs[42]
    per_layer = layer_snr(r["cff"].filtered, r["truth"])
    values = [per_layer[k] for k in range(1, 5)]
    rho = spearmanr(TABLE1_REDUCED_SCATTERING, values)[0]
    criterion(6, np.isclose(rho, -1.0),
              f"per-layer SNR {np.round(values, 2).tolist()} dB vs mu_s' "
              f"{list(TABLE1_REDUCED_SCATTERING)}: Spearman {rho:+.2f} (need -1)")


def test_c07_sqrt_n_averaging(criterion):
    ratios = {}
    for n in (4, 16, 64):
        frames = speckle_frames((100, 100), n, speckle_shape=1.0, seed=700 + n)
        ratios[n] = float((average_frames(frames) - 1.0).std() * np.sqrt(n))
    ok = all(abs(v - 1) <= 0.10 for v in ratios.values())
    criterion(7, ok, "residual std x sqrt(N): "
              + ", ".join(f"N={n}: {v:.3f}" for n, v in ratios.items()) + " (need within 10% of 1)")


def test_c08_attenuation_recovery(criterion):
    i = np.arange(400, dtype=float)
    x = np.exp(-2.0 * 1.0 * 0.01 * i)[:, None]
    mu = estimate_attenuation(Image(x, axial_um=10.0))
    med = float(np.median(mu[:200]))
    criterion(8, abs(med - 1.0) <= 0.05, f"median over upper half {med:.4f} mm^-1 (need 1.0 +/- 5%)")


def test_c09_metric_identities(criterion):
    worst_id, worst_sym = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(900 + seed)
        f, g = rng.random((48, 40)) * 255, rng.random((48, 40)) * 255
        worst_id = max(worst_id, abs(ssim(f, f) - 1), abs(epi(f, f) - 1))
        worst_sym = max(worst_sym, abs(ssim(f, g) - ssim(g, f)))
    criterion(9, worst_id <= 1e-9 and worst_sym <= 1e-12,
              f"max |identity - 1| {worst_id:.1e} (<= 1e-9), max asymmetry {worst_sym:.1e} (<= 1e-12)")


def test_c10_performance_and_determinism(criterion, monkeypatch):
    noisy, _, _ = synthesize_phantom(table1_phantom(rows=500, cols=500, seed=42))
    monkeypatch.setenv("OCTD_THREADS", "1")
    t0 = time.perf_counter()
    first = run_cff(noisy)
    t_cff = time.perf_counter() - t0
    t0 = time.perf_counter()
    w = run_wiener(noisy)
    t_w = time.perf_counter() - t0
    second = run_cff(noisy)
    monkeypatch.setenv("OCTD_THREADS", "4")
    threaded = run_cff(noisy)
    same = (np.array_equal(first.filtered, second.filtered)
            and np.array_equal(first.labels.labels, second.labels.labels)
            and np.array_equal(first.filtered, threaded.filtered)
            and np.array_equal(first.labels.labels, threaded.labels.labels)
            and np.array_equal(w, run_wiener(noisy)))
    criterion(10, t_cff <= 50.0 and t_w <= 4.0 and same,
              f"500x500 CFF {t_cff:.2f} s (<= 50), Wiener {t_w:.3f} s (<= 4), "
              f"identical across runs and thread counts: {same}")
