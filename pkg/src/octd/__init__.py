"""Cluster-based adaptive Wiener despeckling for OCT B-scans."""

__version__ = "0.1.0"

from .image import Image, Roi, WindowSpec, load_image, local_stats, save_image
from .optics import (
    LayerSpec,
    MieInputs,
    PhantomSpec,
    average_frames,
    estimate_attenuation,
    reduced_scattering,
    synthesize_phantom,
    table1_phantom,
    tio2_concentration,
)
from .clustering import FeatureField, LabelMap, build_features, label_smooth, ward_cluster
from .filtering import cff_filter, cluster_noise, masked_stats, wiener
from .metrics import MetricsReport, cnr, epi, snr, ssim
from .pipeline import RunConfig, run_cff, run_wiener

__all__ = [
    "Image", "Roi", "WindowSpec", "load_image", "save_image", "local_stats",
    "LayerSpec", "MieInputs", "PhantomSpec", "average_frames", "estimate_attenuation",
    "reduced_scattering", "synthesize_phantom", "table1_phantom", "tio2_concentration",
    "FeatureField", "LabelMap", "build_features", "label_smooth", "ward_cluster",
    "cff_filter", "cluster_noise", "masked_stats", "wiener",
    "MetricsReport", "cnr", "epi", "snr", "ssim",
    "RunConfig", "run_cff", "run_wiener",
]
