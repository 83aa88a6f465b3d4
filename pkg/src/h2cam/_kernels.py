"""Hot inner loops, with a numba path and a pure numpy/scipy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``H2CAM_DISABLE_NUMBA`` is unset (or ``0``).  Both implementations are
always importable as ``*_numpy`` / ``*_numba`` so tests and the benchmark can
compare them directly.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy import special

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------- numpy path

def nearest_phase_index_numpy(phases: np.ndarray, targets: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Index of the sampled phase closest to each target on the circle.

    Ties resolve to the lowest index (the library is sorted by radius, so the
    smaller radius wins).
    """
    phases = np.asarray(phases, dtype=np.float64)
    flat = np.asarray(targets, dtype=np.float64).ravel()
    out = np.empty(flat.size, dtype=np.int64)
    for start in range(0, flat.size, chunk):
        t = flat[start:start + chunk, None]
        d = np.mod(phases[None, :] - t, TWO_PI)
        d = np.minimum(d, TWO_PI - d)
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out.reshape(np.shape(targets))


def poisson_icdf_numpy(mu: np.ndarray, u: np.ndarray, z: np.ndarray, gauss_above: float) -> np.ndarray:
    """Inverse-CDF Poisson draw driven by supplied uniforms ``u``.

    Pixels with ``mu > gauss_above`` use ``round(mu + sqrt(mu) * z)`` instead,
    where ``z`` holds the matching standard normal quantiles.
    """
    mu = np.asarray(mu, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros(mu.shape, dtype=np.float64)

    big = mu > gauss_above
    out[big] = np.maximum(np.floor(mu[big] + np.sqrt(mu[big]) * z[big] + 0.5), 0.0)

    small = (~big) & (mu > 0)
    if np.any(small):
        m = mu[small]
        uu = u[small]
        lo = np.zeros_like(m)
        hi = np.ceil(m + 12.0 * np.sqrt(m) + 20.0)
        # smallest k with P(X <= k) >= u
        while np.any(hi > lo):
            mid = np.floor(0.5 * (lo + hi))
            ok = special.pdtr(mid, m) >= uu
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid + 1.0)
        out[small] = lo
    return out


def tv_value_grad_numpy(f: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Smoothed isotropic TV summed over bands, and its gradient.

    ``f`` has shape (bands, rows, cols); forward differences with a zero
    difference across the last row/column.
    """
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    dx[:, :, :-1] = f[:, :, 1:] - f[:, :, :-1]
    dy[:, :-1, :] = f[:, 1:, :] - f[:, :-1, :]
    mag = np.sqrt(dx * dx + dy * dy + beta * beta)
    value = float(mag.sum())
    px = dx / mag
    py = dy / mag
    grad = np.zeros_like(f)
    grad[:, :, :-1] -= px[:, :, :-1]
    grad[:, :, 1:] += px[:, :, :-1]
    grad[:, :-1, :] -= py[:, :-1, :]
    grad[:, 1:, :] += py[:, :-1, :]
    return value, grad


# ---------------------------------------------------------------- numba path

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _nearest_phase_index_nb(phases, targets):
        n = targets.size
        out = np.empty(n, dtype=np.int64)
        two_pi = 2.0 * np.pi
        for k in prange(n):
            t = targets[k]
            best = 0
            best_d = np.inf
            for j in range(phases.size):
                d = (phases[j] - t) % two_pi
                if two_pi - d < d:
                    d = two_pi - d
                if d < best_d:
                    best_d = d
                    best = j
            out[k] = best
        return out

    @njit(cache=True)
    def _poisson_icdf_one(m, u):
        if m <= 0.0:
            return 0.0
        mode = math.floor(m)
        logm = math.log(m)
        p_mode = math.exp(mode * logm - m - math.lgamma(mode + 1.0))
        # CDF at the mode, summed downward until the terms vanish
        cdf = p_mode
        p = p_mode
        k = mode
        while k > 0.0:
            p = p * k / m
            k -= 1.0
            cdf += p
            if p < 1e-18 * cdf:
                break
        if cdf >= u:
            # walk down: largest drop that still keeps CDF >= u
            k = mode
            p = p_mode
            while k > 0.0:
                if cdf - p < u:
                    break
                cdf -= p
                p = p * k / m
                k -= 1.0
            return k
        k = mode
        p = p_mode
        while cdf < u:
            k += 1.0
            p = p * m / k
            if p == 0.0:
                break
            cdf += p
        return k

    @njit(parallel=True, cache=True)
    def _poisson_icdf_nb(mu, u, z, gauss_above):
        n = mu.size
        out = np.empty(n, dtype=np.float64)
        for k in prange(n):
            m = mu[k]
            if m > gauss_above:
                v = math.floor(m + math.sqrt(m) * z[k] + 0.5)
                out[k] = v if v > 0.0 else 0.0
            else:
                out[k] = _poisson_icdf_one(m, u[k])
        return out

    @njit(parallel=True, cache=True)
    def _tv_value_grad_nb(f, beta):
        nb, nr, nc = f.shape
        grad = np.zeros_like(f)
        px = np.empty_like(f)
        py = np.empty_like(f)
        totals = np.zeros(nb)
        b2 = beta * beta
        for b in prange(nb):
            acc = 0.0
            for r in range(nr):
                for c in range(nc):
                    dx = f[b, r, c + 1] - f[b, r, c] if c + 1 < nc else 0.0
                    dy = f[b, r + 1, c] - f[b, r, c] if r + 1 < nr else 0.0
                    mag = math.sqrt(dx * dx + dy * dy + b2)
                    acc += mag
                    px[b, r, c] = dx / mag
                    py[b, r, c] = dy / mag
            totals[b] = acc
            for r in range(nr):
                for c in range(nc):
                    g = 0.0
                    if c + 1 < nc:
                        g -= px[b, r, c]
                    if c > 0:
                        g += px[b, r, c - 1]
                    if r + 1 < nr:
                        g -= py[b, r, c]
                    if r > 0:
                        g += py[b, r - 1, c]
                    grad[b, r, c] = g
        return totals.sum(), grad

    def nearest_phase_index_numba(phases, targets):
        t = np.ascontiguousarray(targets, dtype=np.float64)
        idx = _nearest_phase_index_nb(np.ascontiguousarray(phases, dtype=np.float64), t.ravel())
        return idx.reshape(t.shape)

    def poisson_icdf_numba(mu, u, z, gauss_above):
        mu = np.ascontiguousarray(mu, dtype=np.float64)
        shape = mu.shape
        out = _poisson_icdf_nb(
            mu.ravel(),
            np.ascontiguousarray(u, dtype=np.float64).ravel(),
            np.ascontiguousarray(z, dtype=np.float64).ravel(),
            float(gauss_above),
        )
        return out.reshape(shape)

    def tv_value_grad_numba(f, beta):
        value, grad = _tv_value_grad_nb(np.ascontiguousarray(f, dtype=np.float64), float(beta))
        return float(value), grad


def _use_numba() -> bool:
    flag = os.environ.get("H2CAM_DISABLE_NUMBA", "").strip().lower()
    return HAVE_NUMBA and flag in ("", "0", "false", "no")


if _use_numba():
    BACKEND = "numba"
    nearest_phase_index = nearest_phase_index_numba
    poisson_icdf = poisson_icdf_numba
    tv_value_grad = tv_value_grad_numba
else:
    BACKEND = "numpy"
    nearest_phase_index = nearest_phase_index_numpy
    poisson_icdf = poisson_icdf_numpy
    tv_value_grad = tv_value_grad_numpy
