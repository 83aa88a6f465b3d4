"""Monochrome sensor: shot noise, full-well clipping, read noise, ADC; sub-image crops."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import _kernels
from .core import ConfigurationError, Image2D, ParameterError, WavelengthGrid, write_json
from .optics import OpticalConfig, crop_windows

GAUSS_ABOVE = 1e4  # mean electrons above which Poisson is drawn from its normal approximation


@dataclass(frozen=True)
class SensorConfig:
    gain: float = 4095.0 / 15000.0       # DN per electron
    exposure: float = 1.0                # s
    read_noise: float = 3.0              # electrons RMS
    photon_efficiency: float | tuple[float, ...] = 1.0
    full_well: float = 15000.0           # electrons
    bit_depth: int = 12
    seed: int = 0
    noise: bool = True                   # False: Poisson -> mean, no read noise

    def __post_init__(self):
        if not (self.gain > 0 and self.exposure > 0 and self.full_well > 0):
            raise ParameterError("gain, exposure and full well must be positive")
        if self.read_noise < 0:
            raise ParameterError("read noise must be non-negative")
        if self.bit_depth not in (8, 10, 12, 14, 16):
            raise ParameterError("bit depth must be one of 8, 10, 12, 14, 16")
        eta = np.atleast_1d(np.asarray(self.photon_efficiency, dtype=np.float64))
        if np.any(eta <= 0) or np.any(eta > 1):
            raise ParameterError("photon efficiency must lie in (0, 1]")
        if eta.size > 1:
            object.__setattr__(self, "photon_efficiency", tuple(float(x) for x in eta))

    @property
    def max_dn(self) -> int:
        return 2**self.bit_depth - 1

    def efficiency(self, num_bands: int) -> np.ndarray:
        eta = np.atleast_1d(np.asarray(self.photon_efficiency, dtype=np.float64))
        if eta.size == 1:
            return np.full(num_bands, eta[0])
        if eta.size != num_bands:
            raise ConfigurationError(f"{eta.size} photon efficiencies for {num_bands} bands")
        return eta

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["photon_efficiency"], tuple):
            d["photon_efficiency"] = list(d["photon_efficiency"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        d = dict(d)
        if isinstance(d.get("photon_efficiency"), list):
            d["photon_efficiency"] = tuple(d["photon_efficiency"])
        return cls(**d)


@dataclass(frozen=True)
class SensorFrame:
    image: Image2D
    config: SensorConfig
    saturation_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        """``path`` gets uint16 DN, ``.mask.raw`` the saturation mask, ``.json`` the metadata."""
        path = Path(path)
        np.ascontiguousarray(self.image.data, dtype="<u2").tofile(path)
        np.ascontiguousarray(self.saturation_mask, dtype=np.uint8).tofile(path.with_suffix(".mask.raw"))
        rows, cols = self.image.data.shape
        write_json(path.with_suffix(".json"), {"height": rows, "width": cols,
                                               "sensor": self.config.to_dict(), **self.meta})

    @classmethod
    def load(cls, path) -> "SensorFrame":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        shape = (meta.pop("height"), meta.pop("width"))
        img = np.fromfile(path, dtype="<u2").reshape(shape).astype(np.float64)
        mask = np.fromfile(path.with_suffix(".mask.raw"), dtype=np.uint8).reshape(shape).astype(bool)
        return cls(Image2D(img), SensorConfig.from_dict(meta.pop("sensor")), mask, meta)


def mean_electrons(irradiance: np.ndarray, config: SensorConfig, grid: WavelengthGrid) -> np.ndarray:
    """t * sum_lambda eta E dlambda for a (bands, rows, cols) irradiance."""
    E = np.asarray(irradiance, dtype=np.float64)
    if E.ndim == 2:
        E = E[None]
    eta = config.efficiency(E.shape[0])
    return config.exposure * grid.band_width * np.tensordot(eta, E, axes=(0, 0))


def expose(irradiance: np.ndarray, config: SensorConfig, grid: WavelengthGrid) -> SensorFrame:
    """Noisy, clipped, quantised frame from per-band irradiance.

    Electrons are drawn by inverse-CDF sampling from one uniform per pixel
    (normal approximation above 1e4 mean electrons), then clipped at the full
    well.  Read noise is added in electrons and scaled by the gain.  The two
    random fields come from a Philox stream keyed by ``config.seed``, so the
    same uniforms are reused when only the exposure changes.
    """
    E = np.asarray(irradiance, dtype=np.float64)
    if np.any(E < 0) or not np.all(np.isfinite(E)):
        raise ParameterError("irradiance must be finite and non-negative")
    mu = mean_electrons(E, config, grid)
    if config.noise:
        rng = np.random.Generator(np.random.Philox(key=config.seed))
        u = rng.random(mu.shape)
        read = rng.standard_normal(mu.shape)
        z = ndtri(np.clip(u, 1e-300, 1.0))
        electrons = _kernels.poisson_icdf(mu, u, z, GAUSS_ABOVE)
    else:
        electrons = mu.copy()
        read = np.zeros_like(mu)
    saturated = electrons >= config.full_well
    electrons = np.minimum(electrons, config.full_well)
    dn = np.clip(np.round(config.gain * (electrons + config.read_noise * read)), 0, config.max_dn)
    return SensorFrame(Image2D(dn), config, saturated, {"backend": _kernels.BACKEND})


def crop_subimages(frame: SensorFrame, config: OpticalConfig) -> tuple[list[Image2D], list[np.ndarray]]:
    """Sub-images and saturation masks in split order."""
    img = frame.image.data
    windows = crop_windows(config)
    if img.shape != tuple(config.sensor_shape):
        raise ConfigurationError(f"frame is {img.shape}, optical configuration expects {config.sensor_shape}")
    subs, masks = [], []
    for r0, c0, h, w in windows:
        subs.append(Image2D(img[r0:r0 + h, c0:c0 + w]))
        masks.append(frame.saturation_mask[r0:r0 + h, c0:c0 + w].copy())
    return subs, masks
