"""Chromatic multi-copy PSF, sensor irradiance rendering and far-field checks."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.special import erf

from .core import ConfigurationError, DimensionError, ParameterError, SpectralCube, WavelengthGrid
from .metasurface import MetasurfaceDesign, PhaseLibrary, SplitSpec, default_splits, direction_cosines


@dataclass(frozen=True)
class OpticalConfig:
    """Sensor-side geometry of the camera.

    Positions are in mm on the sensor, measured from the optical axis which
    sits at the centre of the pixel array.  ``scene_shape`` is the size of
    each cropped sub-image (and of the scene cube).
    """

    splits: tuple[SplitSpec, ...] = field(default_factory=lambda: tuple(default_splits()))
    grid: WavelengthGrid = field(default_factory=WavelengthGrid.uniform)
    focal_s: float = 50.0
    pixel_pitch: float = 10.0
    sensor_shape: tuple[int, int] = (512, 512)
    scene_shape: tuple[int, int] = (96, 96)
    psf_kind: str = "airy-gaussian"
    aperture_mm: float = 1.0
    psf_support: int | None = None
    residual_fraction: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "splits", tuple(self.splits))
        object.__setattr__(self, "sensor_shape", tuple(int(x) for x in self.sensor_shape))
        object.__setattr__(self, "scene_shape", tuple(int(x) for x in self.scene_shape))
        rho = np.zeros(self.grid.num_bands) if self.residual_fraction is None else np.asarray(self.residual_fraction, float)
        if rho.shape != (self.grid.num_bands,):
            raise ConfigurationError("residual_fraction needs one value per band")
        if np.any(rho < 0) or np.any(rho >= 1):
            raise ConfigurationError("residual fractions must lie in [0, 1)")
        object.__setattr__(self, "residual_fraction", tuple(float(x) for x in rho))
        if self.psf_kind not in ("airy-gaussian", "delta"):
            raise ConfigurationError(f"unknown PSF kind {self.psf_kind!r}")
        if self.focal_s <= 0 or self.pixel_pitch <= 0:
            raise ConfigurationError("focal distance and pixel pitch must be positive")
        total = sum(s.power_ratio for s in self.splits)
        if np.any(total + rho > 1 + 1e-12):
            raise ConfigurationError("sum of split powers plus residual exceeds 1")
        crop_windows(self)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([s.power_ratio for s in self.splits])

    @property
    def num_splits(self) -> int:
        return len(self.splits)

    def with_splits(self, splits) -> "OpticalConfig":
        from dataclasses import replace

        return replace(self, splits=tuple(splits))

    def to_dict(self) -> dict:
        return {
            "focal_s_mm": self.focal_s,
            "pixel_pitch_um": self.pixel_pitch,
            "sensor_shape": list(self.sensor_shape),
            "scene_shape": list(self.scene_shape),
            "psf_kind": self.psf_kind,
            "aperture_mm": self.aperture_mm,
            "psf_support": self.psf_support,
            "residual_fraction": list(self.residual_fraction),
        }

    @classmethod
    def from_dict(cls, d: dict, splits, grid: WavelengthGrid) -> "OpticalConfig":
        rho = d.get("residual_fraction")
        if rho is not None and len(rho) != grid.num_bands:
            rho = None if not any(rho) else rho
        return cls(
            splits=tuple(splits),
            grid=grid,
            focal_s=float(d.get("focal_s_mm", 50.0)),
            pixel_pitch=float(d.get("pixel_pitch_um", 10.0)),
            sensor_shape=tuple(d.get("sensor_shape", (512, 512))),
            scene_shape=tuple(d.get("scene_shape", (96, 96))),
            psf_kind=d.get("psf_kind", "airy-gaussian"),
            aperture_mm=float(d.get("aperture_mm", 1.0)),
            psf_support=d.get("psf_support"),
            residual_fraction=rho,
        )


# ------------------------------------------------------------------ geometry

def chromatic_shift(split: SplitSpec, wavelength: float, lambda_c: float) -> tuple[float, float]:
    """Sensor position (mm) of a split's copy at ``wavelength``: scales as lambda / lambda_c."""
    k = wavelength / lambda_c
    return k * split.target[0], k * split.target[1]


def sensor_pixel(config: OpticalConfig, position_mm) -> tuple[float, float]:
    """(row, col) on the sensor of a position in mm."""
    rows, cols = config.sensor_shape
    per_mm = 1000.0 / config.pixel_pitch
    return (rows - 1) / 2 + position_mm[1] * per_mm, (cols - 1) / 2 + position_mm[0] * per_mm


def _scene_center(config: OpticalConfig) -> np.ndarray:
    h, w = config.scene_shape
    return np.array([(h - 1) / 2, (w - 1) / 2])


def crop_windows(config: OpticalConfig) -> list[tuple[int, int, int, int]]:
    """(row0, col0, height, width) of each split's sub-image crop, in split order."""
    h, w = config.scene_shape
    rows, cols = config.sensor_shape
    lc = config.grid.lambda_c
    out = []
    for s in config.splits:
        c = np.array(sensor_pixel(config, chromatic_shift(s, lc, lc)))
        r0, c0 = (int(x) for x in np.round(c - _scene_center(config)))
        if r0 < 0 or c0 < 0 or r0 + h > rows or c0 + w > cols:
            raise ConfigurationError(f"crop window of split {s.index} is clipped by the sensor edge")
        out.append((r0, c0, h, w))
    for a in range(len(out)):
        for b in range(a + 1, len(out)):
            ra, ca = out[a][:2]
            rb, cb = out[b][:2]
            if abs(ra - rb) < h and abs(ca - cb) < w:
                raise ConfigurationError(
                    f"crop windows of splits {config.splits[a].index} and {config.splits[b].index} overlap")
    return out


# ---------------------------------------------------------------------- PSF

def psf_sigma_px(config: OpticalConfig) -> float:
    """Gaussian width of the lens PSF: 0.42 lambda_c N in pixels."""
    f_number = config.focal_s / config.aperture_mm
    return 0.42 * (config.grid.lambda_c * 1e-3) * f_number / config.pixel_pitch


def base_psf_kernel(config: OpticalConfig, support: int | None = None) -> np.ndarray:
    """Normalised, rotationally symmetric lens PSF (same for every band)."""
    if config.psf_kind == "delta":
        support = 1 if support is None else support
        if support < 1 or support % 2 == 0:
            raise ParameterError("support must be odd")
        k = np.zeros((support, support))
        k[support // 2, support // 2] = 1.0
        return k
    sigma = psf_sigma_px(config)
    if support is None:
        support = config.psf_support or 2 * int(np.ceil(4 * sigma)) + 1
    if support < 3 or support % 2 == 0:
        raise ParameterError("support must be odd and at least 3")
    half = support // 2
    held = erf((half + 0.5) / (sigma * np.sqrt(2))) ** 2
    if held < 0.99:
        warnings.warn(f"PSF support {support} holds only {held:.1%} of the Gaussian energy", stacklevel=2)
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def _bilinear_splat(kernel: np.ndarray, frac) -> np.ndarray:
    fr, fc = frac
    s = kernel.shape[0]
    out = np.zeros((s + 1, s + 1))
    out[:s, :s] += (1 - fr) * (1 - fc) * kernel
    out[1:, :s] += fr * (1 - fc) * kernel
    out[:s, 1:] += (1 - fr) * fc * kernel
    out[1:, 1:] += fr * fc * kernel
    return out


@dataclass(frozen=True)
class PsfStack:
    """Per split and band: a kernel plus where its convolution lands.

    ``kernels[i, b]`` is the lens PSF bilinearly shifted by the fractional
    part of the copy offset.  Convolving a scene band with it (full linear
    convolution) and pasting the result with its top-left corner at
    ``placement[i, b]`` (sensor pixels) reproduces the copy; ``crop_placement``
    is the same corner relative to the split's crop window.
    """

    kernels: np.ndarray          # (V, bands, k, k)
    placement: np.ndarray        # (V, bands, 2) int, sensor frame
    crop_placement: np.ndarray   # (V, bands, 2) int, crop frame
    centers: np.ndarray          # (V, bands, 2) float, sensor (row, col) of each copy
    weights: np.ndarray          # (V,)
    base: np.ndarray             # lens PSF
    residual_placement: tuple[int, int]
    residual_fraction: np.ndarray
    wavelengths: np.ndarray

    @property
    def num_splits(self) -> int:
        return self.kernels.shape[0]

    @property
    def num_bands(self) -> int:
        return self.kernels.shape[1]


def build_psf_stack(config: OpticalConfig) -> PsfStack:
    base = base_psf_kernel(config)
    c0 = base.shape[0] // 2
    lc = config.grid.lambda_c
    windows = crop_windows(config)
    sc = _scene_center(config)
    rows, cols = config.sensor_shape
    V, B = config.num_splits, config.grid.num_bands
    kernels = np.zeros((V, B, base.shape[0] + 1, base.shape[1] + 1))
    placement = np.zeros((V, B, 2), dtype=np.int64)
    crop_placement = np.zeros((V, B, 2), dtype=np.int64)
    centers = np.zeros((V, B, 2))
    for i, s in enumerate(config.splits):
        for b, lam in enumerate(config.grid.centers):
            c = np.array(sensor_pixel(config, chromatic_shift(s, lam, lc)))
            if not (0 <= c[0] <= rows - 1 and 0 <= c[1] <= cols - 1):
                raise ConfigurationError(f"split {s.index} at {lam:g} nm lands off the sensor")
            offset = c - sc
            n = np.floor(offset)
            kernels[i, b] = _bilinear_splat(base, offset - n)
            centers[i, b] = c
            placement[i, b] = n.astype(np.int64) - c0
            crop_placement[i, b] = placement[i, b] - np.array(windows[i][:2])
    res = np.round(np.array(sensor_pixel(config, (0.0, 0.0))) - sc).astype(np.int64) - c0
    return PsfStack(
        kernels=kernels,
        placement=placement,
        crop_placement=crop_placement,
        centers=centers,
        weights=config.alphas.copy(),
        base=base,
        residual_placement=(int(res[0]), int(res[1])),
        residual_fraction=np.asarray(config.residual_fraction),
        wavelengths=config.grid.array,
    )


def transfer_functions(stack: PsfStack, shape) -> np.ndarray:
    """DFTs (V, bands, H, W) of each kernel circularly placed in a crop of ``shape``.

    The integer placement enters as a linear phase, the sub-pixel part is in
    the bilinear kernel.
    """
    H, W = shape
    V, B, k, _ = stack.kernels.shape
    if k > H or k > W:
        raise DimensionError(f"kernel of size {k} does not fit a {shape} crop")
    padded = np.zeros((V, B, H, W))
    padded[:, :, :k, :k] = stack.kernels
    T = np.fft.fft2(padded)
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    dy = stack.crop_placement[..., 0][..., None, None]
    dx = stack.crop_placement[..., 1][..., None, None]
    return T * np.exp(-2j * np.pi * (fy * dy + fx * dx))


# ------------------------------------------------------------------ render

def _next_pow2(n: int) -> int:
    return 1 << int(np.ceil(np.log2(max(n, 1))))


def _paste(dst: np.ndarray, src: np.ndarray, r0: int, c0: int) -> None:
    rows, cols = dst.shape
    h, w = src.shape
    ra, ca = max(r0, 0), max(c0, 0)
    rb, cb = min(r0 + h, rows), min(c0 + w, cols)
    if ra < rb and ca < cb:
        dst[ra:rb, ca:cb] += src[ra - r0:rb - r0, ca - c0:cb - c0]


def render_irradiance(scene: SpectralCube, stack: PsfStack, config: OpticalConfig) -> np.ndarray:
    """Per-band sensor irradiance, shape (bands, rows, cols).

    Every split adds alpha_i times the scene band convolved with its shifted
    kernel; residual light adds rho(lambda) times the scene convolved with the
    lens PSF at the on-axis position.  Convolutions are linear (zero padded to
    a power of two).  Round-off negatives are clamped to zero.
    """
    if scene.grid != config.grid:
        raise DimensionError("scene wavelength grid differs from the optical configuration")
    if (scene.height, scene.width) != config.scene_shape:
        raise DimensionError(f"scene is {scene.height}x{scene.width}, configuration expects {config.scene_shape}")
    h, w = config.scene_shape
    k = stack.kernels.shape[-1]
    kb = stack.base.shape[0]
    shape = (_next_pow2(h + k - 1), _next_pow2(w + k - 1))
    out = np.zeros((config.grid.num_bands,) + tuple(config.sensor_shape))
    bands = scene.bands
    K = sfft.rfft2(stack.kernels, s=shape, axes=(-2, -1))
    Kb = sfft.rfft2(stack.base, s=shape)
    for b in range(config.grid.num_bands):
        S = sfft.rfft2(bands[b], s=shape)
        for i in range(stack.num_splits):
            copy = sfft.irfft2(S * K[i, b], s=shape)[: h + k - 1, : w + k - 1]
            r0, c0 = stack.placement[i, b]
            _paste(out[b], stack.weights[i] * copy, r0, c0)
        rho = stack.residual_fraction[b]
        if rho > 0:
            copy = sfft.irfft2(S * Kb, s=shape)[: h + kb - 1, : w + kb - 1]
            _paste(out[b], rho * copy, *stack.residual_placement)
    # FFT round-off leaves ~1e-16 negatives where the true irradiance is zero
    return np.maximum(out, 0.0, out=out)


# ---------------------------------------------------------------- far field

@dataclass(frozen=True)
class FarFieldReport:
    wavelength: float
    fractions: np.ndarray            # per split, share of total transmitted power
    residual: float                  # everything outside the split orders
    predicted_cosines: np.ndarray    # (V, 2) direction cosines (x, y) at this wavelength
    centroid_cosines: np.ndarray     # (V, 2) measured
    predicted_mm: np.ndarray         # (V, 2) sensor position (u, v)
    centroid_mm: np.ndarray          # (V, 2)

    def rows(self, splits) -> list[dict]:
        return [
            {
                "index": s.index,
                "wavelength_nm": self.wavelength,
                "fraction": float(self.fractions[i]),
                "predicted_u_mm": float(self.predicted_mm[i, 0]),
                "predicted_v_mm": float(self.predicted_mm[i, 1]),
                "centroid_u_mm": float(self.centroid_mm[i, 0]),
                "centroid_v_mm": float(self.centroid_mm[i, 1]),
            }
            for i, s in enumerate(splits)
        ]


def _window_power(field_: np.ndarray, r_idx: np.ndarray, c_idx: np.ndarray, nr: int, nc: int) -> np.ndarray:
    # zero-padded DFT of ``field_`` evaluated only on the requested bins
    rows, cols = field_.shape
    ur = np.exp(-2j * np.pi * np.outer(r_idx, np.arange(rows)) / nr)
    uc = np.exp(-2j * np.pi * np.outer(np.arange(cols), c_idx) / nc)
    return np.abs(ur @ field_ @ uc) ** 2


def aperture_mask(shape, kind: str = "circle") -> np.ndarray:
    """Transmitting cells of the metasurface: the inscribed disc or the full square."""
    rows, cols = shape
    if kind == "square":
        return np.ones(shape, dtype=bool)
    if kind != "circle":
        raise ParameterError(f"unknown aperture kind {kind!r}")
    y, x = np.ogrid[:rows, :cols]
    ry, rx = rows / 2, cols / 2
    return ((y + 0.5 - ry) / ry) ** 2 + ((x + 0.5 - rx) / rx) ** 2 <= 1.0


def far_field_powers(design: MetasurfaceDesign, library: PhaseLibrary, wavelength: float,
                     pad: int = 2, window_lobes: int = 3, aperture: str = "circle") -> FarFieldReport:
    """Fraunhofer power split of a designed metasurface at one wavelength.

    The aperture field exp(j phi(r, lambda)), restricted to the inscribed disc
    by default, is zero padded ``pad`` times and Fourier transformed.  Power
    is summed in a square window of +/- ``window_lobes`` diffraction lobes
    around each split's grating order, minus the median stray-light level,
    and divided by the share an ideal tilted aperture puts in that window.
    """
    rows, cols = design.grid_shape
    if max(rows, cols) * pad > 8192:
        raise ConfigurationError("design grid too large for a single FFT")
    mask = aperture_mask(design.grid_shape, aperture)
    field_ = np.where(mask, np.exp(1j * library.phase_of(design.radius_map, wavelength)), 0.0)
    nr, nc = rows * pad, cols * pad
    spectrum = sfft.fft2(field_.astype(np.complex64), s=(nr, nc), workers=-1)
    power = spectrum.real**2 + spectrum.imag**2
    del spectrum
    total = float(power.sum(dtype=np.float64))
    # stray light is speckle-like: mean = median / ln 2
    stray_density = float(np.median(power)) / np.log(2.0)

    half = window_lobes * pad
    V = len(design.splits)
    pred_cos = np.zeros((V, 2))
    bins = np.zeros((V, 2))
    for i, s in enumerate(design.splits):
        a, b = direction_cosines(s.target, design.focal_s)
        # the grating frequency is fixed by the lambda_c ramp; the angle scales with lambda
        fx, fy = a / design.lambda_c, b / design.lambda_c
        bins[i] = (fy * nr * design.pitch_w, fx * nc * design.pitch_w)
        pred_cos[i] = (wavelength * fx, wavelength * fy)
    centers = np.round(bins).astype(int)
    for i in range(V):
        for j in range(i + 1, V):
            if np.all(np.abs(centers[i] - centers[j]) <= 2 * half):
                raise ConfigurationError(
                    f"far-field windows of splits {design.splits[i].index} and {design.splits[j].index} overlap")
        if np.any(np.abs(centers[i]) + half >= np.array([nr, nc]) // 2):
            raise ConfigurationError(f"split {design.splits[i].index} order lies outside the sampled far field")

    q, p = np.mgrid[0:rows, 0:cols]
    ideal_total = nr * nc * mask.sum()
    fractions = np.zeros(V)
    cent_cos = np.zeros((V, 2))
    for i in range(V):
        r_idx = np.arange(centers[i, 0] - half, centers[i, 0] + half + 1)
        c_idx = np.arange(centers[i, 1] - half, centers[i, 1] + half + 1)
        win = power[np.ix_(r_idx % nr, c_idx % nc)].astype(np.float64)
        tilt = np.exp(2j * np.pi * (bins[i, 0] * q / nr + bins[i, 1] * p / nc))
        capture = _window_power(mask * tilt, r_idx, c_idx, nr, nc).sum() / ideal_total
        fractions[i] = max(win.sum() - stray_density * win.size, 0.0) / (capture * total)
        excess = np.clip(win - stray_density, 0.0, None)
        wsum = excess.sum()
        if wsum > 0:
            kr = (excess.sum(axis=1) @ r_idx) / wsum
            kc = (excess.sum(axis=0) @ c_idx) / wsum
        else:
            kr, kc = bins[i]
        cent_cos[i] = (wavelength * kc / (nc * design.pitch_w), wavelength * kr / (nr * design.pitch_w))

    def to_mm(cos):
        a, b = cos[:, 0], cos[:, 1]
        cz = np.sqrt(np.clip(1 - a * a - b * b, 1e-12, None))
        return np.stack([design.focal_s * a / cz, design.focal_s * b / cz], axis=1)

    return FarFieldReport(
        wavelength=float(wavelength),
        fractions=fractions,
        residual=float(1.0 - fractions.sum()),
        predicted_cosines=pred_cos,
        centroid_cosines=cent_cos,
        predicted_mm=to_mm(pred_cos),
        centroid_mm=to_mm(cent_cos),
    )
