"""h2cam: simulator and reconstruction toolkit for a snapshot HDR + spectral
camera built from a multi-split metasurface and a single monochrome sensor.

Modules
-------
core         wavelength grids, cubes, metrics, file I/O
metasurface  split specification, phase library, interleaved designs
optics       PSF stacks, forward rendering, far-field checks
sensor       photon/read noise, saturation, quantisation
reconstruct  linearisation, HDR fusion, Wiener + CG refinement
bench        synthetic scenes and the standard experiments
"""
from ._kernels import BACKEND
from .core import (SpectralCube, WavelengthGrid, Image2D, QualityReport, psnr, sam, ssim, ssim_cube,
                   dynamic_range_db, quality_report)
from .metasurface import SplitSpec, MetasurfaceDesign, PhaseLibrary, build_design, default_splits, synthetic_library
from .optics import OpticalConfig, build_psf_stack, render_irradiance, far_field_powers
from .sensor import SensorConfig, SensorFrame, expose, crop_subimages
from .reconstruct import ReconConfig, ReconResult, reconstruct_pipeline

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "SpectralCube", "WavelengthGrid", "Image2D", "QualityReport", "psnr", "sam", "ssim", "ssim_cube",
    "dynamic_range_db", "quality_report", "SplitSpec", "MetasurfaceDesign", "PhaseLibrary", "build_design",
    "default_splits", "synthetic_library", "OpticalConfig", "build_psf_stack", "render_irradiance",
    "far_field_powers", "SensorConfig", "SensorFrame", "expose", "crop_subimages", "ReconConfig", "ReconResult",
    "reconstruct_pipeline",
]
