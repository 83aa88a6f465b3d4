"""Shared containers, wavelength grids, quality metrics and file formats."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PSNR_CAP_DB = 99.0


class H2CamError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(H2CamError, ValueError):
    pass


class DegenerateInputError(H2CamError, ValueError):
    pass


class ParameterError(H2CamError, ValueError):
    pass


class ConfigurationError(H2CamError, ValueError):
    pass


class IllPosedError(H2CamError, ArithmeticError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class WavelengthGrid:
    """Band centres (nm) spanning ``[lambda_low, lambda_high]``."""

    lambda_low: float
    lambda_high: float
    centers: tuple[float, ...]

    def __post_init__(self):
        centers = tuple(float(c) for c in self.centers)
        object.__setattr__(self, "centers", centers)
        if not self.lambda_low < self.lambda_high:
            raise ParameterError("lambda_low must be below lambda_high")
        if len(centers) < 1:
            raise ParameterError("need at least one band")
        if np.any(np.diff(centers) <= 0):
            raise ParameterError("band centres must be strictly increasing")
        if centers[0] < self.lambda_low or centers[-1] > self.lambda_high:
            raise ParameterError("band centres must lie inside [lambda_low, lambda_high]")

    @classmethod
    def uniform(cls, lambda_low: float = 600.0, lambda_high: float = 700.0, num_bands: int = 11) -> "WavelengthGrid":
        if num_bands == 1:
            return cls(lambda_low, lambda_high, (0.5 * (lambda_low + lambda_high),))
        return cls(lambda_low, lambda_high, tuple(np.linspace(lambda_low, lambda_high, num_bands)))

    @classmethod
    def single(cls, wavelength: float, width: float = 10.0) -> "WavelengthGrid":
        return cls(wavelength - width / 2, wavelength + width / 2, (wavelength,))

    @property
    def num_bands(self) -> int:
        return len(self.centers)

    @property
    def lambda_c(self) -> float:
        return 0.5 * (self.lambda_low + self.lambda_high)

    @property
    def band_width(self) -> float:
        """Uniform integration weight per band (nm)."""
        if self.num_bands == 1:
            return self.lambda_high - self.lambda_low
        return (self.centers[-1] - self.centers[0]) / (self.num_bands - 1)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.centers)

    def to_dict(self) -> dict:
        return {
            "lambda_low_nm": self.lambda_low,
            "lambda_high_nm": self.lambda_high,
            "num_bands": self.num_bands,
            "centers_nm": list(self.centers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WavelengthGrid":
        return cls(float(d["lambda_low_nm"]), float(d["lambda_high_nm"]), tuple(d["centers_nm"]))


@dataclass(frozen=True)
class Image2D:
    data: np.ndarray

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 2 or a.size == 0:
            raise DimensionError(f"Image2D needs a non-empty 2-D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ParameterError("Image2D values must be finite")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SpectralCube:
    """Non-negative radiance cube stored as (rows, cols, bands)."""

    data: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        a = _frozen(self.data)
        if a.ndim != 3:
            raise DimensionError(f"cube must be 3-D (H, W, bands), got shape {a.shape}")
        if a.shape[2] != self.grid.num_bands:
            raise DimensionError(f"cube has {a.shape[2]} bands, grid has {self.grid.num_bands}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ParameterError("cube values must be finite and non-negative")
        object.__setattr__(self, "data", a)

    @classmethod
    def from_bands(cls, bands: np.ndarray, grid: WavelengthGrid) -> "SpectralCube":
        """Build from a (bands, rows, cols) array."""
        return cls(np.moveaxis(np.asarray(bands), 0, -1), grid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> np.ndarray:
        """View as (bands, rows, cols)."""
        return np.moveaxis(self.data, -1, 0)

    def band_sum(self) -> np.ndarray:
        return self.data.sum(axis=2)


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    sam: float
    dynamic_range: float = float("nan")

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "sam": self.sam, "dynamic_range": self.dynamic_range}


# ------------------------------------------------------------------- metrics

def _as_array(x) -> np.ndarray:
    if isinstance(x, (SpectralCube, Image2D)):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(reference, test, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from ``reference`` only."""
    ref = _as_array(reference)
    tst = _as_array(test)
    _check_shapes(ref, tst)
    peak = float(np.max(np.abs(ref)))
    if peak == 0.0:
        raise DegenerateInputError("reference is all zeros")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(peak * peak / mse))


def sam(reference, test) -> float:
    """Mean spectral angle (radians) over pixels whose spectra are both non-zero."""
    ref = _as_array(reference)
    tst = _as_array(test)
    _check_shapes(ref, tst)
    ref = ref.reshape(-1, ref.shape[-1])
    tst = tst.reshape(-1, tst.shape[-1])
    na = np.linalg.norm(ref, axis=1)
    nb = np.linalg.norm(tst, axis=1)
    ok = (na > 0) & (nb > 0)
    if not np.any(ok):
        raise DegenerateInputError("no pixel has non-zero spectra in both cubes")
    cos = np.einsum("ij,ij->i", ref[ok], tst[ok]) / (na[ok] * nb[ok])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def _box_mean(a: np.ndarray, win: int) -> np.ndarray:
    # valid-mode window mean via an integral image
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    total = s[win:, win:] - s[:-win, win:] - s[win:, :-win] + s[:-win, :-win]
    return total / (win * win)


def ssim(reference, test, window: int = 8) -> float:
    """Mean SSIM over all 8x8 windows (stride 1, uniform weights).

    The stabilisers use ``L = max(range(reference), range(test))`` so the
    index is symmetric in its arguments.
    """
    a = _as_array(reference)
    b = _as_array(test)
    _check_shapes(a, b)
    if a.ndim != 2:
        raise DimensionError("ssim expects 2-D images; use ssim_cube for cubes")
    if a.shape[0] < window or a.shape[1] < window:
        raise DegenerateInputError(f"image {a.shape} smaller than the {window}x{window} window")
    L = max(float(np.ptp(a)), float(np.ptp(b)))
    if L == 0.0:
        L = 1.0
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a**2
    var_b = _box_mean(b * b, window) - mu_b**2
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_cube(reference, test, window: int = 8) -> float:
    """Band-averaged SSIM of two cubes."""
    a = _as_array(reference)
    b = _as_array(test)
    _check_shapes(a, b)
    return float(np.mean([ssim(a[..., k], b[..., k], window) for k in range(a.shape[-1])]))


def dynamic_range_db(image, floor_percentile: float = 0.001) -> float:
    """20 log10(max / low-percentile positive value)."""
    if not 0.0 < floor_percentile < 0.5:
        raise ParameterError("floor_percentile must be in (0, 0.5)")
    a = _as_array(image)
    pos = a[a > 0]
    if pos.size == 0:
        raise DegenerateInputError("image has no positive values")
    floor = np.quantile(pos, floor_percentile, method="lower")
    return float(20.0 * np.log10(pos.max() / floor))


def recoverable_dynamic_range_db(values, variance, valid=None, min_snr: float = 10.0) -> float:
    """Dynamic range over pixels that are valid and estimated at SNR >= ``min_snr``.

    ``variance`` is the per-pixel noise variance of ``values``.  Returns 0 when
    fewer than one pixel qualifies.
    """
    v = _as_array(values)
    var = np.asarray(variance, dtype=np.float64)
    ok = (v > 0) & (v * v >= (min_snr**2) * var)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not np.any(ok):
        return 0.0
    sel = v[ok]
    return float(20.0 * np.log10(sel.max() / sel.min()))


def quality_report(reference: SpectralCube, test: SpectralCube, hdr=None) -> QualityReport:
    dr = dynamic_range_db(hdr) if hdr is not None else float("nan")
    return QualityReport(
        psnr=psnr(reference, test),
        ssim=ssim_cube(reference, test),
        sam=sam(reference, test),
        dynamic_range=dr,
    )


# ---------------------------------------------------------------------- I/O

def _sidecar(path: Path) -> Path:
    # raw arrays: x.raw -> x.json; PNGs keep their suffix so x.png and x.raw can coexist
    if path.suffix.lower() == ".png":
        return path.with_name(path.name + ".json")
    return path.with_suffix(".json")


def write_json(path: Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_cube(cube: SpectralCube, path) -> None:
    """Write ``<path>`` as little-endian float32 (band, row, col) plus a JSON header."""
    path = Path(path)
    np.ascontiguousarray(cube.bands, dtype="<f4").tofile(path)
    header = {"height": cube.height, "width": cube.width, **cube.grid.to_dict()}
    write_json(_sidecar(path), header)


def load_cube(path) -> SpectralCube:
    path = Path(path)
    header = json.loads(_sidecar(path).read_text())
    grid = WavelengthGrid.from_dict(header)
    shape = (header["num_bands"], header["height"], header["width"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != np.prod(shape):
        raise DimensionError(f"{path}: expected {np.prod(shape)} floats, found {raw.size}")
    return SpectralCube.from_bands(raw.reshape(shape).astype(np.float64), grid)


def save_image(image, path, meta: dict | None = None) -> None:
    """Save an image as raw float32 or, for ``.png`` paths, 16-bit PNG.

    PNGs are scaled so the maximum maps to 65535; the scale is recorded in the
    sidecar so :func:`load_image` can undo it.
    """
    path = Path(path)
    a = _as_array(image)
    header = {"height": a.shape[0], "width": a.shape[1], **(meta or {})}
    if path.suffix.lower() == ".png":
        from PIL import Image

        peak = float(a.max())
        scale = peak / 65535.0 if peak > 0 else 1.0
        q = np.clip(np.round(a / scale), 0, 65535).astype(np.uint16)
        Image.fromarray(q).save(path)
        header.update(format="png16", scale=scale)
    else:
        np.ascontiguousarray(a, dtype="<f4").tofile(path)
        header.update(format="float32")
    write_json(_sidecar(path), header)


def load_image(path) -> Image2D:
    path = Path(path)
    header = json.loads(_sidecar(path).read_text())
    if header.get("format") == "png16":
        from PIL import Image

        q = np.asarray(Image.open(path), dtype=np.float64)
        return Image2D(q * header["scale"])
    raw = np.fromfile(path, dtype="<f4").reshape(header["height"], header["width"])
    return Image2D(raw.astype(np.float64))


def save_preview(image, path, gamma: float = 1 / 2.2) -> None:
    """8-bit gamma preview PNG (display only)."""
    from PIL import Image

    a = np.clip(_as_array(image), 0, None)
    peak = a.max()
    if peak > 0:
        a = a / peak
    Image.fromarray(np.round(255 * a**gamma).astype(np.uint8)).save(path)
