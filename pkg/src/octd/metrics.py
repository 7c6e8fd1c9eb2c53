"""Image quality metrics: SNR, CNR, EPI and SSIM, plus CSV reporting."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .image import Roi, as_array

SSIM_C1 = (0.01 * 255) ** 2     # 6.5025
SSIM_C2 = (0.03 * 255) ** 2     # 58.5225
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

DEFAULT_BACKGROUND = 20
DEFAULT_ROI_COUNT = 10

CSV_FIELDS = ("image", "snr_db", "cnr", "epi", "ssim", "roi_count")


class MetricError(ValueError):
    pass


def default_background(shape, size: int = DEFAULT_BACKGROUND) -> Roi:
    """Top-left square background region, shrunk to fit small images."""
    rows, cols = shape
    return Roi(0, 0, min(size, rows), min(size, cols))


def auto_rois(shape, count: int = DEFAULT_ROI_COUNT) -> list[Roi]:
    """``count`` equal squares centred on the horizontal midline, evenly spaced."""
    rows, cols = shape
    side = max(1, min(rows // 4, cols // count))
    top = max(0, (rows - side) // 2)
    centres = (np.arange(count) + 0.5) * cols / count
    lefts = np.clip(np.rint(centres - side / 2).astype(int), 0, cols - side)
    return [Roi(top, int(left), min(side, rows), side) for left in lefts]


def snr(img, background: Roi | None = None) -> float:
    """Peak signal over background variance, in dB.

    The peak ``max(I^2)`` is taken outside the background region so that
    background pixels cannot define the signal; it falls back to the whole
    image when the background covers everything.
    """
    x = as_array(img)
    if background is None:
        background = default_background(x.shape)
    bg = background.extract(x)
    var_b = float(bg.var())
    if not var_b > 0:
        raise MetricError("degenerate background: zero variance makes SNR unbounded")
    mask = np.ones(x.shape, dtype=bool)
    mask[background.slices] = False
    peak = float(np.max(x[mask] ** 2)) if mask.any() else float(np.max(x ** 2))
    return 10.0 * math.log10(peak / var_b)


def region_snr(img, mask) -> float:
    """SNR with a pixel mask as the noise region and the image-wide peak as signal."""
    x = as_array(img)
    vals = x[np.asarray(mask, dtype=bool)]
    if vals.size == 0:
        raise MetricError("empty region")
    var = float(vals.var())
    if not var > 0:
        raise MetricError("degenerate region: zero variance makes SNR unbounded")
    return 10.0 * math.log10(float(np.max(x ** 2)) / var)


def layer_snr(img, truth, trim: int = 5) -> dict[int, float]:
    """Per-layer SNR: a common image peak over each layer's interior variance.

    Sharing the peak makes layers comparable by their absolute noise
    level. Rows within ``trim`` of a layer boundary are dropped so that
    the step between layers does not count as noise.
    """
    lab = np.asarray(truth)
    out = {}
    for k in np.unique(lab):
        rows = np.flatnonzero(np.any(lab == k, axis=1))
        keep = np.zeros(lab.shape[0], dtype=bool)
        keep[rows[trim:len(rows) - trim]] = True
        out[int(k)] = region_snr(img, (lab == k) & keep[:, None])
    return out


def cnr_terms(img, rois: Sequence[Roi], background: Roi | None = None) -> list[float]:
    """Per-ROI contrast ``(mu_r - mu_b) / sqrt(var_r + var_b)``."""
    x = as_array(img)
    if not rois:
        raise MetricError("CNR needs at least one ROI")
    if background is None:
        background = default_background(x.shape)
    bg = background.extract(x)
    mu_b, var_b = float(bg.mean()), float(bg.var())
    terms = []
    for roi in rois:
        reg = roi.extract(x)
        denom = float(reg.var()) + var_b
        if not denom > 0:
            raise MetricError(f"ROI {tuple(roi)} and background both have zero variance")
        terms.append((float(reg.mean()) - mu_b) / math.sqrt(denom))
    return terms


def cnr(img, rois: Sequence[Roi], background: Roi | None = None) -> float:
    return float(np.mean(cnr_terms(img, rois, background)))


def laplacian(img) -> np.ndarray:
    """3x3 Laplacian (centre -4, edge neighbours +1) on interior pixels only."""
    x = as_array(img)
    if min(x.shape) < 3:
        raise MetricError("Laplacian needs an image of at least 3x3")
    return (x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:]
            - 4.0 * x[1:-1, 1:-1])


def epi(original, filtered) -> float:
    """Edge preservation index: Pearson correlation of the two Laplacians."""
    a, b = as_array(original), as_array(filtered)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    la, lb = laplacian(a), laplacian(b)
    da, db = la - la.mean(), lb - lb.mean()
    saa, sbb = float((da * da).sum()), float((db * db).sum())
    tiny = np.finfo(float).eps ** 2 * la.size
    if saa <= tiny * max(1.0, float(np.abs(a).max()) ** 2) or \
            sbb <= tiny * max(1.0, float(np.abs(b).max()) ** 2):
        raise MetricError("no edge content: a Laplacian field is constant")
    return float((da * db).sum() / math.sqrt(saa * sbb))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim_map(reference, test, c1: float = SSIM_C1, c2: float = SSIM_C2) -> np.ndarray:
    """Local SSIM with an 11x11, sigma 1.5 Gaussian window.

    Near the border the window is truncated to the image and its weights
    renormalized, so every pixel gets a value.
    """
    x, y = as_array(reference), as_array(test)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    g = gaussian_window()

    def wsum(a):
        return ndimage.correlate(a, g, mode="constant", cval=0.0)

    norm = wsum(np.ones_like(x))
    mx, my = wsum(x) / norm, wsum(y) / norm
    sxx = wsum(x * x) / norm - mx * mx
    syy = wsum(y * y) / norm - my * my
    sxy = wsum(x * y) / norm - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(reference, test) -> float:
    """Mean SSIM. Inputs are expected on a [0, 255] scale; see `ssim_scale`."""
    return float(ssim_map(reference, test).mean())


def ssim_scale(reference) -> float:
    """Factor mapping the reference's peak to 255 (1 for an all-zero image)."""
    peak = float(as_array(reference).max())
    return 255.0 / peak if peak > 0 else 1.0


@dataclass
class MetricsReport:
    image: str
    snr_db: float
    cnr: float
    epi: float | None = None
    ssim: float | None = None
    roi_count: int = 0
    cnr_terms: list[float] = field(default_factory=list)
    ssim_scale: float | None = None

    def row(self) -> dict:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        return {"image": self.image, "snr_db": fmt(self.snr_db), "cnr": fmt(self.cnr),
                "epi": fmt(self.epi), "ssim": fmt(self.ssim), "roi_count": str(self.roi_count)}

    def delta(self, base: "MetricsReport", name: str) -> "MetricsReport":
        def sub(a, b):
            return None if a is None or b is None else a - b
        return MetricsReport(name, self.snr_db - base.snr_db, self.cnr - base.cnr,
                             sub(self.epi, base.epi), sub(self.ssim, base.ssim), self.roi_count)


def evaluate(img, name: str = "image", reference=None, rois: Sequence[Roi] | None = None,
             background: Roi | None = None) -> MetricsReport:
    """All four metrics for one image; EPI and SSIM only with a reference.

    SSIM rescales both images by the factor that maps the reference peak
    to 255 and records that factor on the report.
    """
    x = as_array(img)
    if background is None:
        background = default_background(x.shape)
    if not rois:
        rois = auto_rois(x.shape)
    terms = cnr_terms(x, rois, background)
    rep = MetricsReport(name, snr(x, background), float(np.mean(terms)),
                        roi_count=len(rois), cnr_terms=terms)
    if reference is not None:
        ref = as_array(reference)
        rep.epi = epi(ref, x)
        scale = ssim_scale(ref)
        rep.ssim = ssim(ref * scale, x * scale)
        rep.ssim_scale = scale
    return rep


def write_reports(path, reports: Sequence[MetricsReport], comments: Sequence[str] = (),
                  append: bool = False):
    """Write reports as CSV rows; a header (and comments) only for new files."""
    fresh = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="") as fh:
        if fresh:
            for c in comments:
                fh.write(f"# {c}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        if fresh:
            writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())


def read_reports(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
