"""V-beamsplitting metasurface design.

Each split is a linear phase ramp at the central wavelength; the ramps are
quantised to nano-cylinder radii through a phase library and randomly
interleaved cell by cell with probabilities proportional to sqrt(alpha_i).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .core import ConfigurationError, DimensionError, ParameterError, write_json

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SplitSpec:
    """One deflected copy: index (1-based), sensor target at lambda_c (mm), power ratio."""

    index: int
    target: tuple[float, float]
    power_ratio: float

    def __post_init__(self):
        object.__setattr__(self, "target", (float(self.target[0]), float(self.target[1])))
        if self.index < 1:
            raise ParameterError("split indices start at 1")
        if not self.power_ratio > 0:
            raise ParameterError(f"split {self.index}: power ratio must be positive")

    def to_dict(self) -> dict:
        return {"index": self.index, "target_mm": list(self.target), "power_ratio": self.power_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(int(d["index"]), tuple(d["target_mm"]), float(d["power_ratio"]))


def halving_ratios(count: int) -> list[float]:
    return [0.5**i for i in range(1, count + 1)]


def default_splits(count: int = 9, spacing_mm: float = 2.0, ratios=None) -> list[SplitSpec]:
    """Split 1 on-axis, the rest on the 3x3 ring in row-major order."""
    if not 1 <= count <= 9:
        raise ParameterError("the 3x3 layout holds between 1 and 9 splits")
    ratios = halving_ratios(count) if ratios is None else list(ratios)
    if len(ratios) != count:
        raise ParameterError("need one power ratio per split")
    ring = [(u * spacing_mm, v * spacing_mm) for v in (-1, 0, 1) for u in (-1, 0, 1) if (u, v) != (0, 0)]
    targets = [(0.0, 0.0)] + ring
    return [SplitSpec(i + 1, targets[i], ratios[i]) for i in range(count)]


def direction_cosines(target, focal_s: float) -> tuple[float, float]:
    if not focal_s > 0:
        raise ParameterError("focal distance must be positive")
    u, v = target
    norm = np.sqrt(u * u + v * v + focal_s * focal_s)
    return u / norm, v / norm


def deflection_phase(p, q, pitch_w: float, cosines, lambda_c: float):
    """Ramp phase at cell (p, q) = (column, row), wrapped into [0, 2 pi)."""
    if not pitch_w > 0:
        raise ParameterError("nanocell pitch must be positive")
    a, b = cosines
    phase = (TWO_PI / lambda_c) * (a * np.asarray(p, dtype=np.float64) * pitch_w + b * np.asarray(q, dtype=np.float64) * pitch_w)
    wrapped = np.mod(phase, TWO_PI)
    # mod can land exactly on 2 pi for tiny negative inputs
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    return float(wrapped) if wrapped.ndim == 0 else wrapped


# ------------------------------------------------------------- phase library

@dataclass(frozen=True)
class PhaseLibrary:
    """Phase (rad, mod 2 pi) sampled on radii (rows) x wavelengths (columns)."""

    radii: np.ndarray
    wavelengths: np.ndarray
    phase: np.ndarray
    source: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=np.float64)
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        ph = np.mod(np.asarray(self.phase, dtype=np.float64), TWO_PI)
        if ph.shape != (radii.size, wl.size):
            raise DimensionError(f"phase table {ph.shape} does not match {radii.size} radii x {wl.size} wavelengths")
        if np.any(np.diff(radii) <= 0) or np.any(np.diff(wl) <= 0):
            raise ParameterError("radii and wavelengths must be strictly increasing")
        for j, lam in enumerate(wl):
            span = np.ptp(np.unwrap(ph[:, j]))
            if span < TWO_PI * (1 - 1e-9):
                raise ParameterError(f"phase library covers only {span:.3f} rad at {lam:g} nm (needs 2 pi)")
        for name, arr in (("radii", radii), ("wavelengths", wl), ("phase", ph)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def column(self, wavelength: float) -> np.ndarray:
        """Phases at the sampled wavelength nearest to ``wavelength``."""
        return self.phase[:, int(np.argmin(np.abs(self.wavelengths - wavelength)))]

    def phase_of(self, radius, wavelength: float) -> np.ndarray:
        """Phase of the nearest sampled radius at a wavelength."""
        col = self.column(wavelength)
        r = np.asarray(radius, dtype=np.float64)
        hi = np.clip(np.searchsorted(self.radii, r), 1, self.radii.size - 1)
        lo = hi - 1
        idx = np.where(np.abs(self.radii[hi] - r) < np.abs(r - self.radii[lo]), hi, lo)
        return col[idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius_nm"] + [repr(float(x)) for x in self.wavelengths])
            for r, row in zip(self.radii, self.phase):
                w.writerow([repr(float(r))] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "PhaseLibrary":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        wl = [float(x) for x in rows[0][1:]]
        body = np.array([[float(x) for x in row] for row in rows[1:] if row])
        return cls(body[:, 0], wl, body[:, 1:], source={"kind": "csv", "path": str(path)})


def synthetic_library(r_min: float = 40.0, r_max: float = 160.0, n_radii: int = 64,
                      wavelengths=None, n_low: float = 1.0, n_high: float = 2.0) -> PhaseLibrary:
    """Analytic stand-in for a simulated nano-pillar library.

    phi(r, lam) = 2 pi H n_eff(r) / lam (mod 2 pi), n_eff affine in r between
    ``n_low`` and ``n_high``.  H is chosen so the sampled radii cover 5 % more
    than 2 pi at the longest wavelength, hence at every wavelength.  This is
    not an electromagnetic simulation.
    """
    if not r_min < r_max:
        raise ParameterError("r_min must be below r_max")
    if n_radii < 16:
        raise ParameterError("need at least 16 radii")
    if not n_high > n_low:
        raise ParameterError("n_eff must increase with radius")
    wl = np.arange(600.0, 701.0, 5.0) if wavelengths is None else np.asarray(wavelengths, dtype=np.float64)
    radii = np.linspace(r_min, r_max, n_radii)
    n_eff = n_low + (n_high - n_low) * (radii - r_min) / (r_max - r_min)
    height = 1.05 * wl.max() / (n_high - n_low)
    phase = np.mod(TWO_PI * height * n_eff[:, None] / wl[None, :], TWO_PI)
    source = {"kind": "synthetic", "r_min": r_min, "r_max": r_max, "n_radii": n_radii,
              "wavelengths": [float(x) for x in wl], "n_low": n_low, "n_high": n_high}
    return PhaseLibrary(radii, wl, phase, source=source)


def library_from_source(source: dict, base_dir: Path | None = None) -> PhaseLibrary:
    kind = source.get("kind", "synthetic")
    if kind == "synthetic":
        kw = {k: source[k] for k in ("r_min", "r_max", "n_radii", "wavelengths", "n_low", "n_high") if k in source}
        return synthetic_library(**kw)
    if kind == "csv":
        path = Path(source["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return PhaseLibrary.from_csv(path)
    raise ConfigurationError(f"unknown phase library kind {kind!r}")


def lookup_radius(library: PhaseLibrary, target_phase, lambda_c: float):
    """Sampled radius whose phase at lambda_c is circularly closest to the target."""
    col = library.column(lambda_c)
    idx = _kernels.nearest_phase_index(col, np.asarray(target_phase, dtype=np.float64))
    r = library.radii[idx]
    return float(r) if np.ndim(r) == 0 else r


# --------------------------------------------------------------- interleave

def split_probabilities(splits) -> np.ndarray:
    alphas = np.array([s.power_ratio for s in splits], dtype=np.float64)
    if np.any(alphas <= 0):
        raise ParameterError("power ratios must be positive")
    w = np.sqrt(alphas)
    return w / w.sum()


def interleave(splits, grid_shape, seed: int) -> np.ndarray:
    """Assign each nanocell a split index (1-based), i.i.d. with sqrt(alpha) weights.

    The draw uses numpy's PCG64 stream seeded with ``seed`` in row-major cell
    order, so the map is identical across platforms.
    """
    if len(splits) < 1:
        raise ParameterError("need at least one split")
    probs = split_probabilities(splits)
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random(tuple(grid_shape))
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, u, side="right")
    order = np.array([s.index for s in splits], dtype=np.uint8)
    return order[np.minimum(idx, len(splits) - 1)]


# ------------------------------------------------------------------- design

@dataclass(frozen=True)
class MetasurfaceDesign:
    """Radius map (rows = q, cols = p) with the split assignment that produced it."""

    radius_map: np.ndarray
    split_assignment: np.ndarray
    splits: tuple[SplitSpec, ...]
    pitch_w: float
    focal_s: float
    lambda_c: float
    seed: int
    library_source: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.radius_map.shape

    def metadata(self) -> dict:
        rows, cols = self.grid_shape
        return {
            "splits": [s.to_dict() for s in self.splits],
            "seed": self.seed,
            "pitch_nm": self.pitch_w,
            "grid": {"rows": rows, "cols": cols},
            "lambda_c_nm": self.lambda_c,
            "focal_s_mm": self.focal_s,
            "library": self.library_source,
            **self.extra,
        }

    def save(self, path) -> None:
        """``<path>.json`` metadata, ``<path>.raw`` float32 radii, ``<path>.assign.raw`` uint8 splits."""
        base = Path(path)
        write_json(base.with_suffix(".json"), self.metadata())
        np.ascontiguousarray(self.radius_map, dtype="<f4").tofile(base.with_suffix(".raw"))
        np.ascontiguousarray(self.split_assignment, dtype=np.uint8).tofile(base.with_suffix(".assign.raw"))

    @classmethod
    def load(cls, path) -> "MetasurfaceDesign":
        base = Path(path)
        meta = json.loads(base.with_suffix(".json").read_text())
        shape = (meta["grid"]["rows"], meta["grid"]["cols"])
        radius = np.fromfile(base.with_suffix(".raw"), dtype="<f4").reshape(shape)
        assign = np.fromfile(base.with_suffix(".assign.raw"), dtype=np.uint8).reshape(shape)
        known = {"splits", "seed", "pitch_nm", "grid", "lambda_c_nm", "focal_s_mm", "library"}
        return cls(
            radius_map=radius,
            split_assignment=assign,
            splits=tuple(SplitSpec.from_dict(d) for d in meta["splits"]),
            pitch_w=float(meta["pitch_nm"]),
            focal_s=float(meta["focal_s_mm"]),
            lambda_c=float(meta["lambda_c_nm"]),
            seed=int(meta["seed"]),
            library_source=meta.get("library", {}),
            extra={k: v for k, v in meta.items() if k not in known},
        )


def build_design(splits, library: PhaseLibrary, pitch_w: float = 400.0, grid_shape=(1024, 1024),
                 focal_s: float = 50.0, lambda_c: float = 650.0, seed: int = 0, extra=None) -> MetasurfaceDesign:
    splits = tuple(splits)
    if sorted(s.index for s in splits) != list(range(1, len(splits) + 1)):
        raise ParameterError("split indices must be 1..V")
    assign = interleave(splits, grid_shape, seed)
    rows, cols = grid_shape
    q, p = np.mgrid[0:rows, 0:cols]
    target = np.zeros(grid_shape)
    for s in splits:
        sel = assign == s.index
        cos = direction_cosines(s.target, focal_s)
        target[sel] = deflection_phase(p[sel], q[sel], pitch_w, cos, lambda_c)
    radius = np.asarray(lookup_radius(library, target, lambda_c), dtype=np.float32)
    return MetasurfaceDesign(
        radius_map=radius,
        split_assignment=assign,
        splits=splits,
        pitch_w=float(pitch_w),
        focal_s=float(focal_s),
        lambda_c=float(lambda_c),
        seed=int(seed),
        library_source=dict(library.source),
        extra=dict(extra or {}),
    )
