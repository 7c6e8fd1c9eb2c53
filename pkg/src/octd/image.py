"""Image container, file I/O, ROIs and sliding-window statistics.

Pixels are linear intensities held as float64 arrays. Two on-disk formats
are supported: raw little-endian float32 with a ``.hdr`` sidecar, and
binary PGM (P5, 8 or 16 bit).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_AXIAL_UM = 10.0
DEFAULT_LATERAL_UM = 7.5

RAW_SUFFIXES = (".raw", ".f32", ".bin")
PGM_SUFFIXES = (".pgm",)


class ImageFormatError(ValueError):
    """Raised for unreadable, malformed or inconsistent image files."""


@dataclass(frozen=True)
class Image:
    """A 2-D B-scan with physical pixel spacing.

    Rows run along depth (axial), columns along the scan (lateral).
    """

    pixels: np.ndarray
    axial_um: float = DEFAULT_AXIAL_UM
    lateral_um: float = DEFAULT_LATERAL_UM
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image pixels must be finite")
        if np.any(px < 0):
            raise ValueError("image pixels must be nonnegative")
        if not self.axial_um > 0:
            raise ValueError("axial pixel size must be positive")
        if not self.lateral_um > 0:
            raise ValueError("lateral pixel size must be positive")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def axial_mm(self) -> float:
        return self.axial_um / 1000.0

    def with_pixels(self, pixels) -> "Image":
        return Image(pixels, self.axial_um, self.lateral_um)


def as_array(img) -> np.ndarray:
    """Return the float64 pixel array of an `Image` or array-like."""
    if isinstance(img, Image):
        return img.pixels
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


class WindowSpec(NamedTuple):
    """Odd-sized sliding window, ``n1`` rows by ``n2`` columns."""

    n1: int = 5
    n2: int = 5

    @classmethod
    def parse(cls, text: str) -> "WindowSpec":
        """Parse ``"5x5"`` or ``"7"`` into a validated window."""
        parts = text.lower().replace("×", "x").split("x")
        try:
            dims = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"bad window spec {text!r}, expected N1xN2") from None
        if len(dims) == 1:
            dims = dims * 2
        if len(dims) != 2:
            raise ValueError(f"bad window spec {text!r}, expected N1xN2")
        return window_spec(tuple(dims))

    def __str__(self):
        return f"{self.n1}x{self.n2}"


def window_spec(w) -> WindowSpec:
    """Coerce an int, pair or `WindowSpec` to a validated `WindowSpec`."""
    if isinstance(w, str):
        return WindowSpec.parse(w)
    if np.isscalar(w):
        w = (w, w)
    n1, n2 = (int(v) for v in w)
    for n in (n1, n2):
        if n < 1 or n % 2 == 0:
            raise ValueError(f"window dimensions must be odd and >= 1, got {n1}x{n2}")
    return WindowSpec(n1, n2)


class Roi(NamedTuple):
    """Rectangular region of interest in pixel coordinates."""

    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.height),
                slice(self.left, self.left + self.width))

    def check(self, shape) -> "Roi":
        rows, cols = shape
        if self.height < 1 or self.width < 1:
            raise ValueError(f"ROI {tuple(self)} must have positive size")
        if (self.top < 0 or self.left < 0 or self.top + self.height > rows
                or self.left + self.width > cols):
            raise ValueError(f"ROI {tuple(self)} does not fit in a {rows}x{cols} image")
        return self

    def extract(self, img) -> np.ndarray:
        arr = as_array(img)
        self.check(arr.shape)
        return arr[self.slices]


def read_roi_file(path) -> list[Roi]:
    """Read ``top left height width`` lines; ``#`` starts a comment."""
    rois = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                vals = []
            if len(vals) != 4:
                raise ValueError(f"{path}:{lineno}: malformed ROI line, "
                                 "expected 'top left height width'")
            rois.append(Roi(*vals))
    return rois


def write_roi_file(path, rois: Sequence[Roi]):
    with open(path, "w") as fh:
        fh.write("# top left height width\n")
        for r in rois:
            fh.write(f"{r.top} {r.left} {r.height} {r.width}\n")


# -- file I/O ---------------------------------------------------------------

def _header_path(path: Path) -> Path:
    return path.with_suffix(".hdr")


def _read_header(path: Path) -> dict:
    hdr = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ImageFormatError(f"{path}:{lineno}: malformed header line {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            hdr[key] = val
    try:
        out = {"rows": int(hdr["rows"]), "cols": int(hdr["cols"])}
        out["axial_um"] = float(hdr.get("axial_um", DEFAULT_AXIAL_UM))
        out["lateral_um"] = float(hdr.get("lateral_um", DEFAULT_LATERAL_UM))
    except (KeyError, ValueError) as exc:
        raise ImageFormatError(f"{path}: malformed header ({exc})") from None
    return out


def _load_raw(path: Path) -> Image:
    hdr_path = _header_path(path)
    if not hdr_path.exists():
        raise ImageFormatError(f"{path}: missing sidecar header {hdr_path.name}")
    hdr = _read_header(hdr_path)
    data = np.fromfile(path, dtype="<f4")
    if data.size != hdr["rows"] * hdr["cols"]:
        raise ImageFormatError(
            f"{path}: header says {hdr['rows']}x{hdr['cols']} but payload has {data.size} samples")
    px = data.reshape(hdr["rows"], hdr["cols"]).astype(np.float64)
    try:
        return Image(px, hdr["axial_um"], hdr["lateral_um"])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def _save_raw(img: Image, path: Path):
    img.pixels.astype("<f4").tofile(path)
    with open(_header_path(path), "w") as fh:
        fh.write(f"rows={img.rows}\ncols={img.cols}\n"
                 f"axial_um={img.axial_um!r}\nlateral_um={img.lateral_um!r}\n")


def _pgm_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError("truncated PGM header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary P5 PGM. Returns the integer sample array and maxval."""
    path = Path(path)
    buf = path.read_bytes()
    tokens, offset = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if cols < 1 or rows < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = rows * cols * dtype.itemsize
    payload = buf[offset:offset + nbytes]
    if len(payload) != nbytes:
        raise ImageFormatError(f"{path}: PGM payload shorter than {rows}x{cols}")
    data = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    return data.astype(np.int64), maxval


def write_pgm(path, samples: np.ndarray, maxval: int):
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("PGM samples must be 2-D")
    if samples.min(initial=0) < 0 or samples.max(initial=0) > maxval:
        raise ValueError(f"PGM samples out of range [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    rows, cols = samples.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{maxval}\n".encode("ascii"))
        fh.write(samples.astype(dtype).tobytes())


def load_image(path) -> Image:
    """Load a raw-float (``.raw``/``.f32``/``.bin`` + ``.hdr``) or PGM image.

    PGM samples are normalized by maxval to [0, 1]. Pixel sizes come from
    the sidecar header when present and default to 10 um axial, 7.5 um
    lateral otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"{path}: no such file")
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        return _load_raw(path)
    if suffix in PGM_SUFFIXES:
        data, maxval = read_pgm(path)
        axial, lateral = DEFAULT_AXIAL_UM, DEFAULT_LATERAL_UM
        hdr_path = _header_path(path)
        if hdr_path.exists():
            hdr = _read_header(hdr_path)
            if (hdr["rows"], hdr["cols"]) != data.shape:
                raise ImageFormatError(f"{path}: header dimensions disagree with PGM")
            axial, lateral = hdr["axial_um"], hdr["lateral_um"]
        return Image(data / float(maxval), axial, lateral)
    raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


def save_image(img, path, maxval: int = 65535):
    """Save an image. Raw float round trips exactly (at float32 precision).

    PGM output clips to [0, 1] and quantizes to ``maxval`` levels; a
    header sidecar carrying the pixel sizes is written alongside.
    """
    if not isinstance(img, Image):
        img = Image(img)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in RAW_SUFFIXES:
        _save_raw(img, path)
    elif suffix in PGM_SUFFIXES:
        q = np.rint(np.clip(img.pixels, 0.0, 1.0) * maxval).astype(np.int64)
        write_pgm(path, q, maxval)
        with open(_header_path(path), "w") as fh:
            fh.write(f"rows={img.rows}\ncols={img.cols}\n"
                     f"axial_um={img.axial_um!r}\nlateral_um={img.lateral_um!r}\n")
    else:
        raise ImageFormatError(f"{path}: unsupported image format {suffix!r}")


# -- windowed statistics ----------------------------------------------------

def thread_count() -> int:
    """Worker cap from ``OCTD_THREADS`` (0 or unset means one per CPU)."""
    try:
        n = int(os.environ.get("OCTD_THREADS", "0"))
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def _clipped_bounds(n: int, size: int):
    half = size // 2
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx + half + 1, 0, n)
    return lo, hi


def window_counts(shape, w) -> np.ndarray:
    """Number of in-image pixels in each border-clipped window."""
    n1, n2 = window_spec(w)
    r0, r1 = _clipped_bounds(shape[0], n1)
    c0, c1 = _clipped_bounds(shape[1], n2)
    return np.outer(r1 - r0, c1 - c0).astype(np.float64)


def box_sum(a: np.ndarray, w) -> np.ndarray:
    """Sum of ``a`` over each border-clipped window, via a summed-area table."""
    a = np.asarray(a, dtype=np.float64)
    n1, n2 = window_spec(w)
    rows, cols = a.shape
    sat = np.zeros((rows + 1, cols + 1))
    np.cumsum(a, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    r0, r1 = _clipped_bounds(rows, n1)
    c0, c1 = _clipped_bounds(cols, n2)
    return (sat[np.ix_(r1, c1)] - sat[np.ix_(r0, c1)]
            - sat[np.ix_(r1, c0)] + sat[np.ix_(r0, c0)])


def local_stats(img, w=(5, 5)) -> tuple[np.ndarray, np.ndarray]:
    """Local mean and population variance over border-clipped windows.

    Statistics are normalized by the number of in-image pixels in each
    window. Data are shifted by a reference pixel before accumulation to
    limit cancellation in ``E[x^2] - E[x]^2``.

    Returns
    -------
    mean, var : ndarray
        Arrays with the image's shape; ``var`` is clamped at 0.
    """
    x = as_array(img)
    ref = x.flat[0]
    d = x - ref
    n = window_counts(x.shape, w)
    m = box_sum(d, w) / n
    var = box_sum(d * d, w) / n - m * m
    np.maximum(var, 0.0, out=var)
    mean = m + ref
    single = n == 1
    if single.any():
        mean[single] = x[single]
        var[single] = 0.0
    return mean, var
