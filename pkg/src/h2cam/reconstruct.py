"""Inversion of the multiplexed sub-images into an HDR image and a spectral cube.

Pipeline: crop -> linearize -> hdr_fuse (HDR output) -> lift_features ->
wiener_multiframe -> refine (cube output).  The learned feature extractor and
refinement network of the original camera are replaced by an identity lift
and a regularised least-squares solve; ``lift_features`` is the seam where a
learned model would plug in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import _kernels
from .core import (H2CamError, IllPosedError, Image2D, ParameterError, SpectralCube, WavelengthGrid)
from .optics import OpticalConfig, PsfStack, build_psf_stack, crop_windows, transfer_functions
from .sensor import SensorConfig, SensorFrame, crop_subimages


class RefinementDiverged(H2CamError, RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class ReconConfig:
    wiener_epsilon: float = 1e-4      # relative to max |H|^2
    refine: str = "tv"                # none | tikhonov | tv
    tau: float = 1e-2
    spectral_weight: float | None = None  # spectral second-difference weight; None: 1 for tikhonov, 0 for tv
    max_iter: int = 500
    tol: float = 1e-6
    fusion_weighting: str = "inverse-variance"  # or "triangle"
    tv_smoothing: float = 1e-3        # relative to the data range
    precondition: bool = True         # frequency-domain preconditioner for CG
    tv_laplace: float = 0.01          # TV curvature proxy in the preconditioner, times 1/beta

    def __post_init__(self):
        if self.refine not in ("none", "tikhonov", "tv"):
            raise ParameterError(f"unknown refine mode {self.refine!r}")
        if self.fusion_weighting not in ("inverse-variance", "triangle"):
            raise ParameterError(f"unknown fusion weighting {self.fusion_weighting!r}")
        if self.wiener_epsilon < 0 or self.tau < 0:
            raise ParameterError("epsilon and tau must be non-negative")
        if self.spectral_weight is None:
            object.__setattr__(self, "spectral_weight", 1.0 if self.refine == "tikhonov" else 0.0)
        if self.spectral_weight < 0 or self.max_iter < 0:
            raise ParameterError("spectral weight and max_iter must be non-negative")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


@dataclass(frozen=True)
class ReconResult:
    hdr: Image2D
    cube: SpectralCube
    hdr_from_cube: Image2D
    wiener: np.ndarray               # (bands, H, W) pre-refinement estimate
    diagnostics: dict = field(default_factory=dict)


# ------------------------------------------------------------- linearize

def radiance_scale(sensor: SensorConfig, alpha: float, grid: WavelengthGrid) -> float:
    """DN per unit scene radiance (summed over bands) for a split of power ``alpha``."""
    eta = float(np.mean(sensor.efficiency(grid.num_bands)))
    return sensor.gain * sensor.exposure * alpha * eta * grid.band_width


def linearize(subimages, masks, sensor: SensorConfig, alphas, grid: WavelengthGrid):
    """Per-split radiance estimates, validity masks and noise variances.

    L_i = I_i / (G t alpha_i eta dlambda).  Pixels flagged saturated, or at
    the top DN code, are invalid.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas <= 0):
        raise ParameterError("power ratios must be positive")
    I = np.stack([s.data if isinstance(s, Image2D) else np.asarray(s, float) for s in subimages])
    M = np.stack([np.asarray(m, dtype=bool) for m in masks])
    scale = np.array([radiance_scale(sensor, a, grid) for a in alphas])[:, None, None]
    L = I / scale
    valid = ~M & (I < sensor.max_dn)
    var_dn = sensor.gain * np.maximum(I, 0) + (sensor.gain * sensor.read_noise) ** 2 + 1.0 / 12.0
    return L, valid, var_dn / scale**2


def _median_fill(values: np.ndarray, ok: np.ndarray) -> tuple[np.ndarray, int]:
    out = values.copy()
    missing = ~ok
    n_missing = int(missing.sum())
    size = 3
    while missing.any() and ok.any():
        masked = np.where(ok, out, np.nan)
        med = ndimage.generic_filter(masked, np.nanmedian, size=size, mode="nearest")
        fill = missing & np.isfinite(med)
        out[fill] = med[fill]
        ok = ok | fill
        missing = ~ok
        size += 2
    return out, n_missing


def fusion_weights(linearized: np.ndarray, valid: np.ndarray, weighting: str = "inverse-variance",
                   alphas=None, raw=None, max_dn=None) -> np.ndarray:
    """Per-pixel split weights summing to one wherever any split is valid."""
    V = linearized.shape[0]
    if weighting == "inverse-variance":
        a = np.ones(V) if alphas is None else np.asarray(alphas, dtype=np.float64)
        w = a[:, None, None] * valid
    elif weighting == "triangle":
        if raw is None or max_dn is None:
            raise ParameterError("triangle weighting needs the raw DN values and max_dn")
        x = np.asarray(raw, dtype=np.float64) / max_dn
        w = np.maximum(1.0 - np.abs(2.0 * x - 1.0), 1e-3) * valid
    else:
        raise ParameterError(f"unknown weighting {weighting!r}")
    total = w.sum(axis=0)
    return np.divide(w, total, out=np.zeros_like(w), where=total > 0)


def hdr_fuse(linearized, valid, weighting: str = "inverse-variance", alphas=None, raw=None, max_dn=None,
             variance=None):
    """Weighted mean of the valid per-split estimates.

    Returns ``(image, info)``; ``info`` carries the weights, the number of
    pixels with no valid split (filled by a growing-window median) and, when
    ``variance`` is given, the fused variance.
    """
    L = np.asarray(linearized, dtype=np.float64)
    ok = np.asarray(valid, dtype=bool)
    w = fusion_weights(L, ok, weighting, alphas, raw, max_dn)
    fused = (w * L).sum(axis=0)
    covered = ok.any(axis=0)
    fused, n_filled = _median_fill(fused, covered)
    info = {"weights": w, "filled_pixels": n_filled}
    if variance is not None:
        fvar = (w * w * np.asarray(variance)).sum(axis=0)
        fvar[~covered] = np.inf
        info["variance"] = fvar
    return Image2D(fused), info


# ------------------------------------------------------------- deconvolution

def lift_features(linearized, num_bands: int) -> np.ndarray:
    """Identity lift: each sub-image repeated across all bands, shape (V, bands, H, W)."""
    L = np.asarray(linearized, dtype=np.float64)
    return np.broadcast_to(L[:, None], (L.shape[0], num_bands) + L.shape[1:])


def model_transfers(stack: PsfStack, config: OpticalConfig, sensor: SensorConfig | None = None) -> np.ndarray:
    """Transfer functions from scene radiance to linearised sub-images.

    Kernel DFTs with the chromatic placement as a linear phase, scaled by the
    relative photon efficiency of each band and, for the on-axis split, by
    the residual light it also collects.
    """
    shape = config.scene_shape
    T = transfer_functions(stack, shape)
    if sensor is not None:
        eta = sensor.efficiency(config.grid.num_bands)
        T = T * (eta / eta.mean())[None, :, None, None]
    rho = np.asarray(config.residual_fraction)
    if np.any(rho > 0):
        H, W = shape
        r0, c0 = crop_windows(config)[0][:2]
        k = stack.base.shape[0]
        pad = np.zeros(shape)
        pad[:k, :k] = stack.base
        dy = stack.residual_placement[0] - r0
        dx = stack.residual_placement[1] - c0
        fy = np.fft.fftfreq(H)[:, None]
        fx = np.fft.fftfreq(W)[None, :]
        T_res = np.fft.fft2(pad) * np.exp(-2j * np.pi * (fy * dy + fx * dx))
        if sensor is not None:
            T_res = T_res[None] * (eta / eta.mean())[:, None, None]
        T = T.copy()
        T[0] += (rho / stack.weights[0])[:, None, None] * T_res
    return T


def wiener_multiframe(features, transfers, epsilon: float = 1e-4) -> np.ndarray:
    """Multi-frame Wiener estimate, shape (bands, H, W).

    f(lambda) = IDFT[sum_i conj(H_i) DFT(F_i) / (sum_i |H_i|^2 + eps)], with
    ``eps = epsilon * max |H|^2``.  ``epsilon=0`` gives the plain ratio and
    raises if the denominator drops below 1e-12.
    """
    F = sfft.fft2(np.asarray(features, dtype=np.float64), axes=(-2, -1))
    T = np.asarray(transfers)
    if T.shape != F.shape:
        raise ParameterError(f"transfer shape {T.shape} does not match features {F.shape}")
    num = np.sum(np.conj(T) * F, axis=0)
    power = np.abs(T) ** 2
    den = power.sum(axis=0)
    if epsilon == 0:
        if np.min(den) < 1e-12:
            raise IllPosedError("transfer functions share near-zeros; use a positive epsilon")
    else:
        den = den + epsilon * power.max()
    return sfft.ifft2(num / den, axes=(-2, -1)).real


def condition_proxy(transfers, epsilon: float) -> np.ndarray:
    """Per band: max |H|^2 / min(sum_i |H|^2 + eps)."""
    power = np.abs(np.asarray(transfers)) ** 2
    eps = epsilon * power.max()
    den = power.sum(axis=0) + eps
    return power.max(axis=(0, 2, 3)) / den.min(axis=(1, 2))


# ------------------------------------------------------------------ refine

class SpectralForward:
    """y_i = sum_lambda h_{i,lambda} * f_lambda (circular), with data weights."""

    def __init__(self, transfers: np.ndarray, weights: np.ndarray | None = None):
        T = np.asarray(transfers)
        self.V, self.B, self.H, self.W = T.shape
        self.T = T[..., : self.W // 2 + 1]
        self.Tc = np.conj(self.T)
        self.weights = np.ones((self.V, self.H, self.W)) if weights is None else np.asarray(weights, float)

    def apply(self, f: np.ndarray) -> np.ndarray:
        Fh = sfft.rfft2(f, axes=(-2, -1))
        return sfft.irfft2(np.einsum("vbyx,byx->vyx", self.T, Fh), s=(self.H, self.W), axes=(-2, -1))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        Yh = sfft.rfft2(y, axes=(-2, -1))
        return sfft.irfft2(np.einsum("vbyx,vyx->byx", self.Tc, Yh), s=(self.H, self.W), axes=(-2, -1))


def _d2(f: np.ndarray) -> np.ndarray:
    return f[2:] - 2 * f[1:-1] + f[:-2]


def _d2t(g: np.ndarray, nb: int) -> np.ndarray:
    out = np.zeros((nb,) + g.shape[1:])
    out[2:] += g
    out[1:-1] -= 2 * g
    out[:-2] += g
    return out


def _d2_matrix(nb: int) -> np.ndarray:
    D = np.zeros((max(nb - 2, 0), nb))
    for k in range(nb - 2):
        D[k, k:k + 3] = (1.0, -2.0, 1.0)
    return D


class FrequencyPreconditioner:
    """Inverse of a shift-invariant approximation of the normal operator.

    At every spatial frequency, sum_i w_i H_i^H H_i + tau (c I + s D2^T D2 +
    g |grad|^2) is a bands x bands Hermitian matrix; all of them are inverted
    once.  With per-split constant data weights and ``g = 0`` this is the
    exact inverse of the Tikhonov normal operator.
    """

    def __init__(self, transfers: np.ndarray, split_weights, tau: float, identity: float = 1.0,
                 spectral: float = 0.0, laplace: float = 0.0, floor: float = 1e-9):
        T = np.asarray(transfers)
        V, B, H, W = T.shape
        self.shape = (H, W)
        A = np.moveaxis(T[..., : W // 2 + 1], (0, 1), (-2, -1))           # (H, W//2+1, V, B)
        w = np.asarray(split_weights, dtype=np.float64)
        N = np.einsum("yxvb,yxvc->yxbc", np.conj(A) * w[:, None], A)
        eye = np.eye(B)
        R = identity * eye
        if spectral > 0 and B >= 3:
            D = _d2_matrix(B)
            R = R + spectral * D.T @ D
        fy = np.fft.fftfreq(H)[:, None]
        fx = np.fft.rfftfreq(W)[None, :]
        lap = (2 - 2 * np.cos(2 * np.pi * fy)) + (2 - 2 * np.cos(2 * np.pi * fx))
        N = N + tau * (R + laplace * lap[..., None, None] * eye)
        diag = np.einsum("yxbb->yxb", N).real
        N = N + floor * max(float(diag.max()), 1e-300) * eye
        self.P = np.linalg.inv(N)

    def apply(self, r: np.ndarray) -> np.ndarray:
        R = sfft.rfft2(r, axes=(-2, -1))
        Z = np.einsum("yxbc,cyx->byx", self.P, R)
        return sfft.irfft2(Z, s=self.shape, axes=(-2, -1))


@dataclass
class RefineProblem:
    """J(f) = 1/2 sum_i ||sqrt(w_i) (A_i f - y_i)||^2 + tau R(f).

    tikhonov: R = 1/2 (||f||^2 + s ||D2 f||^2), D2 the second difference
    along wavelength.  tv: R = sum sqrt(|grad f|^2 + beta^2) per band plus
    the same spectral term with weight s.
    """

    op: SpectralForward
    data: np.ndarray
    tau: float
    mode: str = "tikhonov"
    spectral_weight: float = 1.0
    beta: float = 1e-3

    def regularizer(self, f: np.ndarray) -> tuple[float, np.ndarray]:
        s = self.spectral_weight
        val, grad = 0.0, np.zeros_like(f)
        if self.mode == "tikhonov":
            val += 0.5 * float(np.sum(f * f))
            grad += f
        else:
            tv, g = _kernels.tv_value_grad(f, self.beta)
            val += tv
            grad += g
        if s > 0 and f.shape[0] >= 3:
            d = _d2(f)
            val += 0.5 * s * float(np.sum(d * d))
            grad += s * _d2t(d, f.shape[0])
        return val, grad

    def objective_and_gradient(self, f: np.ndarray) -> tuple[float, np.ndarray]:
        r = self.op.apply(f) - self.data
        wr = self.op.weights * r
        val = 0.5 * float(np.sum(r * wr))
        grad = self.op.adjoint(wr)
        if self.tau > 0:
            rv, rg = self.regularizer(f)
            val += self.tau * rv
            grad = grad + self.tau * rg
        return val, grad

    def normal_apply(self, f: np.ndarray) -> np.ndarray:
        # (A^T W A + tau (I + s D2^T D2)) f, tikhonov only
        out = self.op.adjoint(self.op.weights * self.op.apply(f))
        if self.tau > 0:
            reg = f.copy()
            if self.spectral_weight > 0 and f.shape[0] >= 3:
                reg += self.spectral_weight * _d2t(_d2(f), f.shape[0])
            out += self.tau * reg
        return out

    def preconditioner(self, laplace: float = 0.0) -> FrequencyPreconditioner:
        split_w = self.op.weights.mean(axis=(1, 2))
        identity = 1.0 if self.mode == "tikhonov" else 0.0
        return FrequencyPreconditioner(_full_spectrum(self.op), split_w, self.tau,
                                       identity, self.spectral_weight, laplace)


def _full_spectrum(op: SpectralForward) -> np.ndarray:
    # FrequencyPreconditioner slices the half spectrum itself; rebuild a full-width array view
    H, W = op.H, op.W
    full = np.zeros((op.V, op.B, H, W), dtype=op.T.dtype)
    full[..., : W // 2 + 1] = op.T
    return full


def _check_divergence(history: list[float], patience: int = 5) -> None:
    if len(history) > patience and all(history[-k] > history[-k - 1] for k in range(1, patience + 1)):
        raise RefinementDiverged(f"objective grew for {patience} consecutive iterations", history)


def _identity(r):
    return r


def _cg_linear(problem: RefineProblem, x0: np.ndarray, max_iter: int, tol: float, precond=None):
    """Preconditioned CG on the Tikhonov normal equations."""
    M = _identity if precond is None else precond.apply
    b = problem.op.adjoint(problem.op.weights * problem.data)
    x = x0.copy()
    r = b - problem.normal_apply(x)
    z = M(r)
    p = z.copy()
    rz = float(np.sum(r * z))
    bnorm = np.sqrt(float(np.sum(b * b))) or 1.0
    history = [problem.objective_and_gradient(x)[0]]
    residuals = [np.sqrt(float(np.sum(r * r))) / bnorm]
    it = 0
    while it < max_iter and residuals[-1] > tol:
        Ap = problem.normal_apply(p)
        pAp = float(np.sum(p * Ap))
        if pAp <= 0:
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        z = M(r)
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        history.append(problem.objective_and_gradient(x)[0])
        residuals.append(np.sqrt(float(np.sum(r * r))) / bnorm)
        _check_divergence(history)
    return x, it, history, residuals


def _cg_nonlinear(problem: RefineProblem, x0: np.ndarray, max_iter: int, tol: float, precond=None,
                  restart: int = 50, patience: int = 3):
    """Preconditioned Polak-Ribiere+ CG with a backtracking Armijo line search.

    Stops when the preconditioned gradient norm falls below ``tol`` times its
    initial value, or when the relative objective decrease stays below
    ``tol`` for ``patience`` iterations in a row.
    """
    M = _identity if precond is None else precond.apply
    x = x0.copy()
    val, g = problem.objective_and_gradient(x)
    s = M(g)
    gs = float(np.sum(g * s))
    d = -s
    history = [val]
    g0 = np.sqrt(max(gs, 1e-300))
    residuals = [1.0]
    t_last = 1.0
    quiet = 0
    it = 0
    while it < max_iter and residuals[-1] > tol:
        slope = float(np.sum(g * d))
        if slope >= 0:
            d, slope = -s, -gs
        t = min(1.0, 4.0 * t_last)
        while True:
            x_new = x + t * d
            val_new, g_new = problem.objective_and_gradient(x_new)
            if val_new <= val + 1e-4 * t * slope or t < 1e-20:
                break
            # safeguarded quadratic interpolation
            curv = val_new - val - slope * t
            t_q = -slope * t * t / (2.0 * curv) if curv > 0 else 0.5 * t
            t = min(max(t_q, 0.1 * t), 0.5 * t)
        if val_new > val:
            break
        t_last = t
        it += 1
        s_new = M(g_new)
        beta = max(0.0, float(np.sum(g_new * (s_new - s))) / max(gs, 1e-300))
        if it % restart == 0:
            beta = 0.0
        d = -s_new + beta * d
        rel = (val - val_new) / max(abs(val), 1e-300)
        x, val, g, s = x_new, val_new, g_new, s_new
        gs = float(np.sum(g * s))
        history.append(val)
        residuals.append(np.sqrt(max(gs, 0.0)) / g0)
        _check_divergence(history)
        quiet = quiet + 1 if rel < tol else 0
        if quiet >= patience:
            break
    return x, it, history, residuals


def refine(f_tilde: np.ndarray, measurements: np.ndarray, transfers: np.ndarray, config: ReconConfig,
           weights: np.ndarray | None = None):
    """Regularised least-squares refinement started from the Wiener estimate.

    ``measurements`` are the linearised sub-images (V, H, W); the data term
    uses the joint model in which every sub-image sums all bands.  Returns
    ``(cube_array, diagnostics)`` with the final estimate projected onto
    f >= 0.
    """
    if config.refine == "none":
        raise ParameterError("refine called with refine='none'")
    y = np.asarray(measurements, dtype=np.float64)
    op = SpectralForward(transfers, weights)
    beta = config.tv_smoothing * max(float(np.ptp(y)), 1e-12)
    problem = RefineProblem(op, y, config.tau, config.refine, config.spectral_weight, beta)
    x0 = np.asarray(f_tilde, dtype=np.float64)
    if config.refine == "tikhonov":
        pc = problem.preconditioner() if config.precondition else None
        x, it, hist, res = _cg_linear(problem, x0, config.max_iter, config.tol, pc)
    else:
        pc = problem.preconditioner(laplace=config.tv_laplace / beta) if config.precondition else None
        x, it, hist, res = _cg_nonlinear(problem, x0, config.max_iter, config.tol, pc)
    return np.maximum(x, 0.0), {"iterations": it, "objective": hist, "residual": res}


# ---------------------------------------------------------------- pipeline

def data_weights(valid: np.ndarray, alphas) -> np.ndarray:
    """Inverse-variance proxy per split (alpha / max alpha), zero where invalid."""
    a = np.asarray(alphas, dtype=np.float64)
    return (a / a.max())[:, None, None] * valid


def reconstruct_pipeline(frame: SensorFrame, optics: OpticalConfig, recon: ReconConfig = ReconConfig(),
                         stack: PsfStack | None = None) -> ReconResult:
    """Full inversion of one sensor frame.

    ``hdr`` is the direct fusion of the linearised sub-images (saturated
    pixels excluded); it also fills saturated pixels before the Wiener step.
    ``hdr_from_cube`` is the band sum of the reconstructed cube.
    """
    sensor = frame.config
    grid = optics.grid
    alphas = optics.alphas
    subs, masks = crop_subimages(frame, optics)
    L, valid, var = linearize(subs, masks, sensor, alphas, grid)
    raw = np.stack([s.data for s in subs])
    hdr, finfo = hdr_fuse(L, valid, recon.fusion_weighting, alphas, raw, sensor.max_dn, variance=var)

    # deconvolution needs complete fields: saturated pixels take the fused value
    filled = np.where(valid, L, hdr.data[None])
    stack = build_psf_stack(optics) if stack is None else stack
    T = model_transfers(stack, optics, sensor)
    features = lift_features(filled, grid.num_bands)
    # each lifted channel holds the band sum, i.e. num_bands times one band's share
    f_tilde = wiener_multiframe(features, T * grid.num_bands, recon.wiener_epsilon)

    diagnostics = {
        "condition_proxy": condition_proxy(T, recon.wiener_epsilon).tolist(),
        "unfilled_pixels": finfo["filled_pixels"],
        "saturated_fraction": [float(1 - v.mean()) for v in valid],
    }
    if recon.refine == "none":
        est = np.maximum(f_tilde, 0.0)
    else:
        est, rinfo = refine(f_tilde, L, T, recon, weights=data_weights(valid, alphas))
        diagnostics.update(rinfo)
    cube = SpectralCube.from_bands(est, grid)
    return ReconResult(
        hdr=hdr,
        cube=cube,
        hdr_from_cube=Image2D(cube.band_sum()),
        wiener=f_tilde,
        diagnostics={**diagnostics, "hdr_variance": finfo["variance"]},
    )
