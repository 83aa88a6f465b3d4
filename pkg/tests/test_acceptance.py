"""Acceptance suite: one test (or group of tests) per criterion.

Every test records a PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``conftest.py``) and immediately on stderr.
Run stand-alone with ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import filecmp
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from h2cam import bench, cli
from h2cam.core import SpectralCube, WavelengthGrid, psnr, sam
from h2cam.metasurface import build_design, default_splits, halving_ratios, interleave, split_probabilities, \
    synthetic_library
from h2cam.optics import OpticalConfig, build_psf_stack, chromatic_shift, crop_windows, far_field_powers, \
    render_irradiance
from h2cam.reconstruct import RefineProblem, SpectralForward, lift_features, model_transfers, \
    wiener_multiframe
from h2cam.sensor import SensorConfig, expose

TITLES = {
    "C1": "power-halving law in the far field",
    "C2": "dispersion scaling of far-field spots",
    "C3": "multi-frame Wiener equals per-frequency least squares",
    "C4": "forward-inverse consistency, single band",
    "C5": "HDR: sub-images < 50 dB, fused >= 58 dB",
    "C6": "spectral resolution (noiseless 10 nm, noisy <= 20 nm)",
    "C7": "median PSNR increases with sub-image count",
    "C8": "sensor mean/variance statistics",
    "C9": "byte-identical CLI reruns",
    "C10": "invariant suite",
}
RESULTS: dict[str, list[tuple[str, bool, str]]] = {}


@contextmanager
def criterion(cid: str, part: str = ""):
    """Record PASS/FAIL for ``cid``; put a summary string in ``state['detail']``."""
    state = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield state
    except BaseException as exc:
        detail = state["detail"] or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        _record(cid, part, False, detail, time.perf_counter() - t0)
        raise
    _record(cid, part, True, state["detail"], time.perf_counter() - t0)


def _record(cid, part, ok, detail, seconds):
    RESULTS.setdefault(cid, []).append((part, ok, detail))
    label = f"{cid}{'/' + part if part else ''}"
    print(f"[acceptance] {label:<24} {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)", file=sys.stderr)


def summary_lines() -> list[str]:
    lines = []
    for cid, title in TITLES.items():
        parts = RESULTS.get(cid)
        if not parts:
            lines.append(f"{cid:<4} NOT RUN  {title}")
            continue
        ok = all(p[1] for p in parts)
        details = "; ".join(f"{p[0] + ': ' if p[0] else ''}{p[2]}" for p in parts if p[2] or p[0])
        lines.append(f"{cid:<4} {'PASS' if ok else 'FAIL'}     {title} -- {details}")
    return lines


# ------------------------------------------------------------------ C1, C2

@pytest.fixture(scope="module")
def farfield_design():
    lib = synthetic_library()
    t0 = time.perf_counter()
    design = build_design(default_splits(), lib, grid_shape=(2048, 2048), seed=0)
    return design, lib, time.perf_counter() - t0


def test_c1_power_halving(farfield_design):
    design, lib, t_build = farfield_design
    with criterion("C1") as st:
        t0 = time.perf_counter()
        rep = far_field_powers(design, lib, 650.0)
        runtime = t_build + time.perf_counter() - t0
        alpha = np.array(halving_ratios(9))
        k = rep.fractions.sum() / alpha.sum()
        rel = np.abs(rep.fractions / (k * alpha) - 1.0)
        st["detail"] = f"max rel err {rel.max():.3f} (split {rel.argmax() + 1}), {runtime:.1f} s"
        assert np.all(rel <= 0.15)
        assert np.all(np.diff(rep.fractions) < 0)
        assert runtime <= 30.0


def test_c2_dispersion_scaling(farfield_design):
    design, lib, _ = farfield_design
    with criterion("C2") as st:
        worst = 0.0
        for lam in (600.0, 650.0, 700.0):
            rep = far_field_powers(design, lib, lam)
            for i, s in enumerate(design.splits):
                if s.index == 1:
                    continue
                expected = np.array(chromatic_shift(s, lam, design.lambda_c))
                err = np.linalg.norm(rep.centroid_mm[i] - expected) / np.linalg.norm(expected)
                worst = max(worst, err)
        st["detail"] = f"max centroid deviation {100 * worst:.2f} %"
        assert worst <= 0.02


# ---------------------------------------------------------------------- C3

def _dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def _brute_force_wiener(Y, T):
    """Per-frequency least squares with explicit DFT matrices."""
    V, B, H, W = Y.shape
    Fh, Fw = _dft_matrix(H), _dft_matrix(W)
    out = np.zeros((B, H, W))
    for b in range(B):
        Yf = np.stack([Fh @ Y[i, b] @ Fw.T for i in range(V)])
        X = np.zeros((H, W), complex)
        for u in range(H):
            for v in range(W):
                a = T[:, b, u, v][:, None]
                X[u, v] = np.linalg.lstsq(a, Yf[:, u, v], rcond=None)[0][0]
        out[b] = (np.conj(Fh) @ X @ np.conj(Fw).T).real / (H * W)
    return out


def test_c3_wiener_oracle():
    with criterion("C3") as st:
        passed, worst = 0, 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            kernels = np.zeros((3, 3, 16, 16))
            kernels[..., :5, :5] = rng.random((3, 3, 5, 5))
            T = np.fft.fft2(kernels)
            Y = rng.standard_normal((3, 3, 16, 16))
            got = wiener_multiframe(Y, T, 0.0)
            ref = _brute_force_wiener(Y, T)
            err = np.linalg.norm(got - ref) / np.linalg.norm(ref)
            worst = max(worst, err)
            passed += err <= 1e-8
        st["detail"] = f"{passed}/100 seeds, worst rel err {worst:.1e}"
        assert passed == 100


# ---------------------------------------------------------------------- C4

def smooth_blob_scene(grid, shape, margin, seed, n_blobs=40, sigma=(3.0, 6.0)):
    """Sum of Gaussian blobs kept 5 sigma inside the margin (band-limited, zero at the border)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    img = np.zeros(shape)
    for _ in range(n_blobs):
        s = rng.uniform(*sigma)
        cy = rng.uniform(margin + 5 * s, shape[0] - 1 - margin - 5 * s)
        cx = rng.uniform(margin + 5 * s, shape[1] - 1 - margin - 5 * s)
        img += rng.uniform(0.2, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return SpectralCube(img[..., None], grid)


def test_c4_forward_inverse():
    with criterion("C4") as st:
        grid = WavelengthGrid.single(650.0)
        # 7.5 um pixels put the 2 mm split spacing at 266.7 px, room for 256 px sub-images
        opt = OpticalConfig(splits=default_splits(), grid=grid, pixel_pitch=7.5, scene_shape=(256, 256),
                            sensor_shape=(800, 800))
        t0 = time.perf_counter()
        stack = build_psf_stack(opt)
        scene = smooth_blob_scene(grid, (256, 256), bench.scene_margin(opt, stack), seed=0)
        E = render_irradiance(scene, stack, opt)
        L = np.stack([E[0, r0:r0 + h, c0:c0 + w] / a for (r0, c0, h, w), a in zip(crop_windows(opt), opt.alphas)])
        f = wiener_multiframe(lift_features(L, 1), model_transfers(stack, opt), 1e-6)
        runtime = time.perf_counter() - t0
        value = psnr(scene.data[..., 0], f[0])
        st["detail"] = f"PSNR {value:.1f} dB at 256x256, {runtime:.2f} s"
        assert value >= 40.0
        assert runtime <= 5.0


# ---------------------------------------------------------------------- C5

@pytest.mark.slow
def test_c5_hdr_range():
    with criterion("C5") as st:
        reps = [bench.hdr_range_test(60.0, seed=s) for s in range(5)]
        sub = max(max(r.subimage_db) for r in reps)
        fused = min(r.fused_db for r in reps)
        st["detail"] = f"max sub-image {sub:.1f} dB, min fused {fused:.1f} dB over 5 seeds"
        assert all(max(r.subimage_db) < 50.0 for r in reps)
        assert all(r.fused_db >= 58.0 for r in reps)


# ---------------------------------------------------------------------- C6

@pytest.mark.slow
@pytest.mark.parametrize("noise", [False, True], ids=["noiseless", "noisy"])
def test_c6_spectral_resolution(noise):
    with criterion("C6", "noisy" if noise else "noiseless") as st:
        rep = bench.spectral_resolution_test(noise=noise)
        fr = ", ".join(f"{s:g}:{f:.2f}" for s, f in zip(rep.separations, rep.fractions))
        st["detail"] = f"min resolved {rep.min_resolved_nm:g} nm (limit {rep.limit_nm:g}); fractions {fr}"
        assert rep.passed
        assert rep.min_resolved_nm <= (20.0 if noise else 10.0)


# ---------------------------------------------------------------------- C7

@pytest.mark.slow
def test_c7_ablation_trend():
    with criterion("C7") as st:
        rep = bench.ablate_subimages(counts=(1, 2, 9), seeds=(0, 1, 2, 3, 4))
        med = [rep.summary[str(k)]["median_psnr_db"] for k in (1, 2, 9)]
        mean = [rep.summary[str(k)]["mean_psnr_db"] for k in (1, 2, 9)]
        st["detail"] = ("median PSNR " + " < ".join(f"{m:.2f}" for m in med) + " dB, mean "
                        + " < ".join(f"{m:.2f}" for m in mean) + " dB (1, 2, 9 sub-images)")
        assert med[0] < med[1] < med[2]
        assert mean[0] < mean[1] < mean[2]


# ---------------------------------------------------------------------- C8

@pytest.mark.parametrize("gain,sigma", [(1.0, 5.0), (4095.0 / 15000.0, 3.0)], ids=["G1", "Gdefault"])
def test_c8_sensor_statistics(gain, sigma):
    with criterion("C8", f"G={gain:.3g}") as st:
        mu = 1000.0
        grid = WavelengthGrid.single(650.0, width=1.0)
        frame = expose(np.full((1, 250, 400), mu), SensorConfig(gain=gain, read_noise=sigma, seed=21), grid)
        x = frame.image.data
        m_rel = x.mean() / (gain * mu) - 1
        v_rel = x.var() / (gain**2 * (mu + sigma**2)) - 1
        st["detail"] = f"mean {100 * m_rel:+.2f} %, variance {100 * v_rel:+.2f} % ({x.size} px)"
        assert abs(m_rel) <= 0.05 and abs(v_rel) <= 0.05


# ---------------------------------------------------------------------- C9

def _cli_pipeline(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "design.json").write_text(json.dumps({
        "splits": {"count": 9, "spacing_mm": 2.0}, "library": {"kind": "synthetic"},
        "grid": {"rows": 512, "cols": 512}, "seed": 7, "optics": {}}))
    (root / "scene.json").write_text(json.dumps({"kind": "gaussian-peaks", "seed": 4, "margin": "auto"}))
    (root / "sensor.json").write_text(json.dumps({"seed": 4, "auto_exposure": {"split": 1, "fill": 0.8}}))
    (root / "recon.json").write_text(json.dumps({"max_iter": 30}))
    steps = [
        ["design", "--config", root / "design.json", "--out", root / "design"],
        ["farfield", "--design", root / "design", "--lambda", "650", "--out", root / "farfield.csv"],
        ["psf", "--config", root / "design.json", "--out", root / "psf"],
        ["scene", "--spec", root / "scene.json", "--design", root / "design", "--out", root / "scene.raw"],
        ["simulate", "--scene", root / "scene.raw", "--design", root / "design", "--sensor", root / "sensor.json",
         "--out", root / "frame.raw"],
        ["reconstruct", "--frame", root / "frame.raw", "--design", root / "design", "--recon", root / "recon.json",
         "--out", root / "recon"],
        ["bench", "ablate", "--seeds", "0", "--counts", "1", "2", "--recon", root / "recon.json",
         "--out", root / "ablate.csv"],
        ["bench", "plot", "--input", root / "ablate.csv", "--out", root / "ablate_series.csv"],
    ]
    for step in steps:
        assert cli.main([str(s) for s in step]) == 0, step


def _tree(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_c9_determinism(tmp_path):
    with criterion("C9") as st:
        _cli_pipeline(tmp_path / "a")
        _cli_pipeline(tmp_path / "b")
        files_a, files_b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
        assert files_a == files_b
        differ = [str(p) for p in files_a if not filecmp.cmp(tmp_path / "a" / p, tmp_path / "b" / p, shallow=False)]
        st["detail"] = f"{len(files_a)} files compared, {len(differ)} differ"
        assert not differ, differ[:5]


# --------------------------------------------------------------------- C10

def test_c10_render_linearity(rng):
    with criterion("C10", "linearity") as st:
        opt = OpticalConfig()
        stack = build_psf_stack(opt)
        f = SpectralCube(rng.random((96, 96, 11)), opt.grid)
        g = SpectralCube(rng.random((96, 96, 11)), opt.grid)
        lhs = render_irradiance(SpectralCube(0.3 * f.data + 1.7 * g.data, opt.grid), stack, opt)
        rhs = 0.3 * render_irradiance(f, stack, opt) + 1.7 * render_irradiance(g, stack, opt)
        r_err = np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)
        T = np.fft.fft2(rng.random((3, 4, 16, 16)))
        X, Y = rng.random((2, 3, 4, 16, 16))
        w_lhs = wiener_multiframe(2 * X - 0.5 * Y, T, 1e-4)
        w_rhs = 2 * wiener_multiframe(X, T, 1e-4) - 0.5 * wiener_multiframe(Y, T, 1e-4)
        w_err = np.abs(w_lhs - w_rhs).max() / np.abs(w_rhs).max()
        st["detail"] = f"render {r_err:.1e}, wiener {w_err:.1e}"
        assert r_err <= 1e-9 and w_err <= 1e-9


def test_c10_shift_consistency():
    with criterion("C10", "shift") as st:
        opt = OpticalConfig()
        stack = build_psf_stack(opt)
        worst = 0.0
        for dy, dx in [(0, 3), (4, 0), (-5, 2)]:
            a = np.zeros((96, 96, 11))
            b = np.zeros((96, 96, 11))
            a[48, 48] = 1.0
            b[48 + dy, 48 + dx] = 1.0
            Ea = render_irradiance(SpectralCube(a, opt.grid), stack, opt)
            Eb = render_irradiance(SpectralCube(b, opt.grid), stack, opt)
            worst = max(worst, np.abs(np.roll(Ea, (dy, dx), axis=(1, 2)) - Eb).max())
        st["detail"] = f"max deviation {worst:.1e}"
        assert worst <= 1e-12


def test_c10_interleave_fractions():
    with criterion("C10", "interleave") as st:
        splits = default_splits()
        probs = split_probabilities(splits)
        worst = 0.0
        for seed in range(3):
            m = interleave(splits, (512, 512), seed)
            worst = max(worst, max(abs((m == s.index).mean() - p) for s, p in zip(splits, probs)))
        st["detail"] = f"max |fraction - p| {worst:.4f}"
        assert worst < 0.01


def test_c10_sam_scale_invariance(rng):
    with criterion("C10", "sam") as st:
        grid = WavelengthGrid.uniform()
        a = SpectralCube(rng.random((12, 12, 11)) + 1e-3, grid)
        vals = [sam(a, SpectralCube(c * a.data, grid)) for c in (1e-3, 0.5, 3.0, 1e4)]
        st["detail"] = f"max {max(vals):.1e} rad"
        assert max(vals) <= 1e-6


@pytest.mark.parametrize("mode", ["tikhonov", "tv"])
def test_c10_gradient_check(mode):
    with criterion("C10", f"gradient-{mode}") as st:
        rng = np.random.default_rng(99)
        T = np.fft.fft2(rng.random((3, 3, 8, 8)))
        problem = RefineProblem(SpectralForward(T, rng.uniform(0.5, 1, (3, 8, 8))), rng.random((3, 8, 8)), 0.1,
                                mode, 0.5, beta=0.05)
        f = rng.random((3, 8, 8))
        _, g = problem.objective_and_gradient(f)
        worst, h = 0.0, 1e-6
        for _ in range(10):
            idx = tuple(int(rng.integers(0, n)) for n in f.shape)
            e = np.zeros_like(f)
            e[idx] = h
            fd = (problem.objective_and_gradient(f + e)[0] - problem.objective_and_gradient(f - e)[0]) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(g[idx]), 1e-12))
        st["detail"] = f"max rel err {worst:.1e}"
        assert worst <= 1e-4


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
