"""Attenuation estimation, TiO2 phantom arithmetic and phantom synthesis."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .image import DEFAULT_AXIAL_UM, DEFAULT_LATERAL_UM, Image, as_array, box_sum

DEFAULT_ANISOTROPY = 0.715
TIO2_DENSITY = 4.23          # g/cm^3
TIO2_RADIUS_UM = 0.075       # 0.15 um diameter

MU_CAP = 100.0               # mm^-1
TAIL_EPS = 1e-12

# reference four-layer TiO2 phantom, layers top to bottom
TABLE1_TIO2_PERCENT = (0.52, 0.26, 0.91, 0.65)
TABLE1_REDUCED_SCATTERING = (1.08, 0.55, 1.90, 1.36)   # cm^-1


class NoSignalError(ValueError):
    pass


# -- attenuation ------------------------------------------------------------

def _fill_down(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid entries by the nearest valid entry above, else 0."""
    rows = values.shape[0]
    idx = np.where(valid, np.arange(rows)[:, None], -1)
    np.maximum.accumulate(idx, axis=0, out=idx)
    cols = np.broadcast_to(np.arange(values.shape[1]), values.shape)
    out = values[np.maximum(idx, 0), cols]
    out[idx < 0] = 0.0
    return out


def estimate_attenuation(img, axial_um: float | None = None, method: str = "tail",
                         fit_rows: int = 15) -> np.ndarray:
    """Per-pixel attenuation coefficient map in mm^-1.

    ``method="tail"`` is the depth-resolved estimator: each pixel's
    intensity divided by twice the pixel size times the summed intensity
    below it in the same A-line. Pixels with no usable tail (last row, or a
    tail sum under 1e-12) inherit the nearest valid value above them.

    ``method="logslope"`` fits a straight line to log intensity over a
    sliding axial window of ``fit_rows`` rows and reports half the negative
    slope. It is smoother but blurs layer boundaries; it exists to
    cross-check the tail estimator.

    The result is clamped to [0, 100] mm^-1.
    """
    x = as_array(img)
    if axial_um is None:
        axial_um = img.axial_um if isinstance(img, Image) else DEFAULT_AXIAL_UM
    if x.shape[0] < 2:
        raise ValueError("attenuation estimation needs at least 2 rows")
    if not np.any(x >= TAIL_EPS):
        raise NoSignalError("no signal: image is entirely below 1e-12")
    delta = axial_um / 1000.0

    if method == "tail":
        # sum of strictly deeper pixels in each column
        tail = np.cumsum(x[::-1], axis=0)[::-1] - x
        valid = tail >= TAIL_EPS
        safe = np.where(valid, tail, 1.0)
        mu = np.where(valid, x / (2.0 * delta * safe), 0.0)
        mu = _fill_down(mu, valid)
    elif method == "logslope":
        mu = _logslope(x, delta, fit_rows)
    else:
        raise ValueError(f"unknown attenuation method {method!r}")
    return np.clip(mu, 0.0, MU_CAP)


def _logslope(x: np.ndarray, delta: float, fit_rows: int) -> np.ndarray:
    if fit_rows < 3 or fit_rows % 2 == 0:
        raise ValueError("fit_rows must be odd and >= 3")
    floor = max(TAIL_EPS, float(x.max()) * 1e-9)
    y = np.log(np.maximum(x, floor))
    z = np.broadcast_to(np.arange(x.shape[0], dtype=np.float64)[:, None], x.shape)
    w = (fit_rows, 1)
    n = box_sum(np.ones_like(y), w)
    sz, sy = box_sum(z, w), box_sum(y, w)
    szz, szy = box_sum(z * z, w), box_sum(z * y, w)
    den = n * szz - sz * sz
    slope = np.where(den > 0, (n * szy - sz * sy) / np.where(den > 0, den, 1.0), 0.0)
    return -slope / (2.0 * delta)


# -- Mie / TiO2 arithmetic --------------------------------------------------

def reduced_scattering(mu_s: float, g: float = DEFAULT_ANISOTROPY) -> float:
    """Reduced scattering coefficient ``mu_s * (1 - g)``, same units as ``mu_s``."""
    if mu_s < 0:
        raise ValueError("scattering coefficient must be nonnegative")
    if not 0 <= g < 1:
        raise ValueError("anisotropy must lie in [0, 1)")
    return mu_s * (1.0 - g)


def scattering_from_reduced(mu_s_reduced: float, g: float = DEFAULT_ANISOTROPY) -> float:
    if not 0 <= g < 1:
        raise ValueError("anisotropy must lie in [0, 1)")
    return mu_s_reduced / (1.0 - g)


@dataclass(frozen=True)
class MieInputs:
    tio2_mass: float                 # g
    polyurethane_volume: float       # cm^3
    sphere_radius: float = TIO2_RADIUS_UM   # um
    tio2_density: float = TIO2_DENSITY      # g/cm^3
    anisotropy: float = DEFAULT_ANISOTROPY

    def __post_init__(self):
        for name in ("tio2_mass", "polyurethane_volume", "sphere_radius", "tio2_density"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.anisotropy < 1:
            raise ValueError("anisotropy must lie in [0, 1)")


def sphere_volume_um3(radius_um: float) -> float:
    return 4.0 / 3.0 * math.pi * radius_um ** 3


def tio2_volume_cm3(mass_g: float, density: float = TIO2_DENSITY) -> float:
    return mass_g / density


def tio2_sphere_count(inp: MieInputs) -> float:
    """Number of TiO2 spheres: total TiO2 volume over one sphere's volume."""
    v_sphere_cm3 = sphere_volume_um3(inp.sphere_radius) * 1e-12
    return tio2_volume_cm3(inp.tio2_mass, inp.tio2_density) / v_sphere_cm3


def tio2_concentration(inp: MieInputs) -> float:
    """Sphere number density in spheres per cm^3 of polyurethane."""
    return tio2_sphere_count(inp) / inp.polyurethane_volume


# -- phantom ----------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One phantom layer.

    ``attenuation`` (mm^-1) drives the depth decay; when omitted it is
    taken as the scattering coefficient recovered from
    ``reduced_scattering`` (cm^-1) with g = 0.715, absorption neglected.
    """

    thickness: float                  # um
    reduced_scattering: float         # cm^-1
    backreflection: float = 1.0
    attenuation: float | None = None  # mm^-1

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValueError("layer thickness must be positive")
        if not 0 < self.backreflection <= 1:
            raise ValueError("backreflection must lie in (0, 1]")
        if self.reduced_scattering < 0:
            raise ValueError("reduced scattering must be nonnegative")
        if self.attenuation is not None and not self.attenuation >= 0:
            raise ValueError("attenuation must be nonnegative")

    @property
    def mu(self) -> float:
        if self.attenuation is not None:
            return self.attenuation
        return scattering_from_reduced(self.reduced_scattering) / 10.0


@dataclass(frozen=True)
class PhantomSpec:
    layers: tuple[LayerSpec, ...]
    rows: int = 400
    cols: int = 300
    axial_pixel_size: float = DEFAULT_AXIAL_UM
    lateral_pixel_size: float = DEFAULT_LATERAL_UM
    incident_intensity: float = 1.0
    speckle_shape: float = 4.0
    rng_seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("phantom needs at least one layer")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("phantom rows and cols must be positive")
        if not self.axial_pixel_size > 0 or not self.lateral_pixel_size > 0:
            raise ValueError("pixel sizes must be positive")
        if not self.incident_intensity > 0:
            raise ValueError("incident intensity must be positive")
        if not self.speckle_shape > 0:
            raise ValueError("speckle shape must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        try:
            layers = [LayerSpec(**layer) for layer in d.pop("layers")]
        except KeyError:
            raise ValueError("phantom spec has no 'layers'") from None
        except TypeError as exc:
            raise ValueError(f"bad layer entry: {exc}") from None
        try:
            return cls(layers=tuple(layers), **d)
        except TypeError as exc:
            raise ValueError(f"bad phantom spec: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ValueError(f"{path}: phantom spec must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    def boundaries(self) -> np.ndarray:
        """First row of each layer after the top one, rounded and clipped."""
        edges = np.cumsum([layer.thickness for layer in self.layers]) / self.axial_pixel_size
        return np.clip(np.rint(edges[:-1]).astype(int), 0, self.rows)


def table1_phantom(rows: int = 400, cols: int = 300, speckle_shape: float = 4.0,
                   seed: int = 42, noiseless: bool = False) -> PhantomSpec:
    """Reference four-layer phantom built from `TABLE1_REDUCED_SCATTERING`.

    The 1.5 mm stack is split into four equal layers spanning the image
    depth. Backreflection is proportional to the layer's attenuation, the
    single-scattering assumption under which the depth-resolved estimator
    is exact for an untruncated tail.
    """
    axial_um = 1500.0 / rows
    mus = [scattering_from_reduced(m) / 10.0 for m in TABLE1_REDUCED_SCATTERING]
    top = max(mus)
    layers = tuple(
        LayerSpec(thickness=1500.0 / 4, reduced_scattering=ms, backreflection=mu / top)
        for ms, mu in zip(TABLE1_REDUCED_SCATTERING, mus))
    return PhantomSpec(layers=layers, rows=rows, cols=cols, axial_pixel_size=axial_um,
                       speckle_shape=speckle_shape, rng_seed=seed, noiseless=noiseless)


def phantom_truth(spec: PhantomSpec) -> np.ndarray:
    """Row-wise 1-based layer labels; rows below the stack join the last layer."""
    row_layer = np.searchsorted(spec.boundaries(), np.arange(spec.rows), side="right")
    return np.repeat(row_layer[:, None] + 1, spec.cols, axis=1).astype(np.int32)


def clean_profile(spec: PhantomSpec) -> np.ndarray:
    """Noiseless A-line: ``I0 * rho * exp(-2 * tau(z))`` with optical depth
    ``tau`` accumulated through every layer above, evaluated at ``z = i * dz``."""
    dz = spec.axial_pixel_size / 1000.0
    bounds = np.concatenate(([0], spec.boundaries(), [spec.rows]))
    rho = np.empty(spec.rows)
    tau = np.empty(spec.rows)
    acc = 0.0
    for k, layer in enumerate(spec.layers):
        lo, hi = bounds[k], max(bounds[k], bounds[k + 1])
        if k == len(spec.layers) - 1:
            hi = spec.rows
        i = np.arange(lo, hi)
        rho[lo:hi] = layer.backreflection
        tau[lo:hi] = acc + layer.mu * (i - lo) * dz
        acc += layer.mu * (hi - lo) * dz
    return spec.incident_intensity * rho * np.exp(-2.0 * tau)


def synthesize_phantom(spec: PhantomSpec):
    """Render a phantom.

    Returns
    -------
    noisy : Image
        ``clean`` times i.i.d. Gamma speckle of mean 1 and shape
        ``spec.speckle_shape`` (identical to ``clean`` when noiseless).
    truth : ndarray of int32
        1-based layer index per pixel.
    clean : Image
        Noiseless signal.
    """
    profile = clean_profile(spec)
    clean = np.repeat(profile[:, None], spec.cols, axis=1)
    truth = phantom_truth(spec)
    if spec.noiseless:
        noisy = clean.copy()
    else:
        rng = np.random.Generator(np.random.Philox(spec.rng_seed))
        k = spec.speckle_shape
        noisy = clean * rng.gamma(k, 1.0 / k, size=clean.shape)
    return (Image(noisy, spec.axial_pixel_size, spec.lateral_pixel_size), truth,
            Image(clean, spec.axial_pixel_size, spec.lateral_pixel_size))


def speckle_frames(shape, n: int, speckle_shape: float = 1.0, seed: int = 0) -> list[np.ndarray]:
    """``n`` independent unit-mean Gamma speckle fields."""
    rng = np.random.Generator(np.random.Philox(seed))
    k = speckle_shape
    return [rng.gamma(k, 1.0 / k, size=shape) for _ in range(n)]


def average_frames(frames: Sequence) -> np.ndarray:
    """Pixelwise arithmetic mean of equally sized frames."""
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    arrays = [np.asarray(as_array(f) if isinstance(f, Image) else f, dtype=np.float64)
              for f in frames]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"frame shape {a.shape} differs from {shape}")
    acc = np.zeros(shape)
    for a in arrays:
        acc += a
    return acc / len(arrays)
