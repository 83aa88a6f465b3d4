import numpy as np
import pytest

from h2cam.core import ConfigurationError, DimensionError, SpectralCube, WavelengthGrid
from h2cam.metasurface import build_design, default_splits, synthetic_library
from h2cam.optics import (OpticalConfig, base_psf_kernel, build_psf_stack, chromatic_shift, crop_windows,
                          far_field_powers, psf_sigma_px, render_irradiance, sensor_pixel, transfer_functions)


@pytest.fixture(scope="module")
def optics():
    return OpticalConfig()


@pytest.fixture(scope="module")
def stack(optics):
    return build_psf_stack(optics)


def point_scene(grid, shape=(96, 96), at=(48, 40), band=None, value=1.0):
    data = np.zeros((*shape, grid.num_bands))
    if band is None:
        data[at[0], at[1], :] = value
    else:
        data[at[0], at[1], band] = value
    return SpectralCube(data, grid)


# --------------------------------------------------------- chromatic shift

def test_chromatic_shift_examples():
    s = default_splits()
    assert chromatic_shift(s[4], 650, 650) == s[4].target
    for lam in (600, 650, 700):
        assert chromatic_shift(s[0], lam, 650) == (0.0, 0.0)
    from h2cam.metasurface import SplitSpec
    u, v = chromatic_shift(SplitSpec(2, (2.0, 0.0), 0.25), 700, 650)
    assert u == pytest.approx(2.1538, abs=1e-4) and v == 0.0


def test_sensor_pixel_axis_at_center(optics):
    assert sensor_pixel(optics, (0, 0)) == (255.5, 255.5)
    r, c = sensor_pixel(optics, (2.0, -1.0))   # u -> columns, v -> rows
    assert c - 255.5 == pytest.approx(200) and r - 255.5 == pytest.approx(-100)


# -------------------------------------------------------------- base PSF

def test_delta_kernel_is_identity():
    k = base_psf_kernel(OpticalConfig(psf_kind="delta"), 5)
    assert k.sum() == 1.0 and k[2, 2] == 1.0


def test_gaussian_kernel_normalized_and_centered(optics):
    k = base_psf_kernel(optics)
    assert k.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.unravel_index(np.argmax(k), k.shape) == (k.shape[0] // 2, k.shape[1] // 2)
    np.testing.assert_allclose(k, k.T)


def test_gaussian_second_moment(optics):
    sigma = psf_sigma_px(optics)
    support = 2 * int(np.ceil(5 * sigma)) + 1
    assert support >= 8 * sigma
    k = base_psf_kernel(optics, support)
    x = np.arange(support) - support // 2
    var = float((k.sum(axis=0) * x**2).sum())
    assert var == pytest.approx(sigma**2, rel=0.02)


def test_gaussian_sigma_formula(optics):
    # 0.42 * 0.65 um * f/50 / 10 um
    assert psf_sigma_px(optics) == pytest.approx(0.42 * 0.65 * 50 / 10)


def test_small_support_warns(optics):
    with pytest.warns(UserWarning, match="holds only"):
        base_psf_kernel(optics, 3)


# ------------------------------------------------------------- PSF stack

def test_single_delta_stack():
    cfg = OpticalConfig(splits=default_splits(1), psf_kind="delta", sensor_shape=(96, 96))
    st = build_psf_stack(cfg)
    assert st.kernels.shape[:2] == (1, 11)
    for b in range(11):
        k = st.kernels[0, b]
        assert k.sum() == 1.0 and np.count_nonzero(k) == 1
    np.testing.assert_array_equal(st.crop_placement[0], 0)


def test_stack_energy_bookkeeping(stack, optics):
    np.testing.assert_allclose(stack.kernels.sum(axis=(-2, -1)), 1.0, atol=1e-12)
    assert np.all(stack.kernels >= 0)
    np.testing.assert_allclose((stack.weights[:, None] * stack.kernels.sum(axis=(-2, -1))).sum(0),
                               optics.alphas.sum())


def test_chromatic_collinearity(stack, optics):
    axis = np.array(sensor_pixel(optics, (0, 0)))
    np.testing.assert_allclose(stack.centers[0], np.broadcast_to(axis, stack.centers[0].shape))
    for i in range(1, optics.num_splits):
        d = stack.centers[i] - axis
        cross = d[:, 0] * d[0, 1] - d[:, 1] * d[0, 0]
        np.testing.assert_allclose(cross, 0, atol=1e-9)
        # distance from the axis grows with wavelength, proportional to lambda
        r = np.hypot(*d.T)
        np.testing.assert_allclose(r / optics.grid.array, r[0] / optics.grid.array[0])


def test_crop_windows_disjoint(optics):
    wins = crop_windows(optics)
    masks = np.zeros(optics.sensor_shape, dtype=int)
    for r0, c0, h, w in wins:
        masks[r0:r0 + h, c0:c0 + w] += 1
    assert masks.max() == 1


def test_clipped_window_rejected():
    with pytest.raises(ConfigurationError, match="clipped"):
        OpticalConfig(sensor_shape=(400, 400))


def test_overlapping_windows_rejected():
    with pytest.raises(ConfigurationError, match="overlap"):
        OpticalConfig(scene_shape=(256, 256), sensor_shape=(1024, 1024))


def test_energy_budget_rejected():
    with pytest.raises(ConfigurationError):
        OpticalConfig(residual_fraction=[0.5] * 11)


def test_off_sensor_copy_rejected():
    splits = default_splits(9, spacing_mm=2.0)
    # long wavelengths push the outer copies past a tight sensor edge
    grid = WavelengthGrid.uniform(600, 1500, 10)
    with pytest.raises(ConfigurationError, match="off the sensor"):
        build_psf_stack(OpticalConfig(splits=splits, grid=grid, sensor_shape=(512, 512), scene_shape=(64, 64)))


# ---------------------------------------------------------------- render

def test_point_source_reproduces_stack(optics, stack, grid11):
    b = 3
    scene = point_scene(grid11, band=b, value=2.0)
    E = render_irradiance(scene, stack, optics)
    assert np.all(E[np.arange(11) != b] == 0)
    k = stack.kernels.shape[-1]
    expected = np.zeros(optics.sensor_shape)
    for i in range(optics.num_splits):
        r0, c0 = stack.placement[i, b] + np.array([48, 40])
        expected[r0:r0 + k, c0:c0 + k] += 2.0 * stack.weights[i] * stack.kernels[i, b]
    np.testing.assert_allclose(E[b], expected, atol=1e-12)


def test_render_linearity(optics, stack, rng, grid11):
    f = SpectralCube(rng.random((96, 96, 11)), grid11)
    g = SpectralCube(rng.random((96, 96, 11)), grid11)
    a, b = 0.7, 2.5
    lhs = render_irradiance(SpectralCube(a * f.data + b * g.data, grid11), stack, optics)
    rhs = a * render_irradiance(f, stack, optics) + b * render_irradiance(g, stack, optics)
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * np.linalg.norm(rhs)


def test_render_energy_with_residual(rng):
    grid = WavelengthGrid.uniform()
    rho = np.linspace(0.0, 0.2, 11)
    cfg = OpticalConfig(splits=default_splits(2), residual_fraction=rho)
    st = build_psf_stack(cfg)
    data = np.zeros((96, 96, 11))
    data[30:66, 30:66] = rng.random((36, 36, 11))   # interior source
    scene = SpectralCube(data, grid)
    E = render_irradiance(scene, st, cfg)
    expected = (cfg.alphas.sum() + rho) * data.sum(axis=(0, 1))
    np.testing.assert_allclose(E.sum(axis=(1, 2)), expected, rtol=1e-3)


@pytest.mark.parametrize("shift", [(0, 5), (7, 0), (-3, 4)])
def test_render_shift_consistency(optics, stack, grid11, shift):
    a = render_irradiance(point_scene(grid11, at=(48, 48)), stack, optics)
    b = render_irradiance(point_scene(grid11, at=(48 + shift[0], 48 + shift[1])), stack, optics)
    np.testing.assert_allclose(np.roll(a, shift, axis=(1, 2)), b, atol=1e-12)


def test_render_dimension_checks(optics, stack):
    with pytest.raises(DimensionError):
        render_irradiance(SpectralCube(np.zeros((64, 64, 11)), WavelengthGrid.uniform()), stack, optics)
    with pytest.raises(DimensionError):
        render_irradiance(SpectralCube(np.zeros((96, 96, 5)), WavelengthGrid.uniform(num_bands=5)), stack, optics)


def test_transfer_functions_match_crop_convolution(optics, stack, grid11):
    """Circular model in crop coordinates agrees with the rendered crop away from borders."""
    data = np.zeros((96, 96, 11))
    data[40:56, 40:56, 5] = 1.0
    scene = SpectralCube(data, grid11)
    E = render_irradiance(scene, stack, optics)
    T = transfer_functions(stack, (96, 96))
    for i, (r0, c0, h, w) in enumerate(crop_windows(optics)):
        crop = E[5, r0:r0 + h, c0:c0 + w]
        model = stack.weights[i] * np.real(np.fft.ifft2(T[i, 5] * np.fft.fft2(data[..., 5])))
        np.testing.assert_allclose(crop, model, atol=1e-12)


# ------------------------------------------------------------- far field

def test_far_field_single_split_zeroth_order():
    d = build_design(default_splits(1), synthetic_library(), grid_shape=(256, 256))
    rep = far_field_powers(d, synthetic_library(), 650)
    assert rep.fractions[0] >= 0.99


def test_far_field_two_split_ratio():
    lib = synthetic_library()
    d = build_design(default_splits(2), lib, grid_shape=(512, 512), seed=0)
    rep = far_field_powers(d, lib, 650)
    assert rep.fractions[0] / rep.fractions[1] == pytest.approx(2.0, rel=0.15)


def test_far_field_rejects_overlap():
    from h2cam.metasurface import SplitSpec
    lib = synthetic_library()
    splits = [SplitSpec(1, (0, 0), 0.5), SplitSpec(2, (0.01, 0), 0.25)]
    d = build_design(splits, lib, grid_shape=(128, 128))
    with pytest.raises(ConfigurationError, match="overlap"):
        far_field_powers(d, lib, 650)


@pytest.mark.slow
def test_far_field_seed_invariance():
    lib = synthetic_library()
    fr = [far_field_powers(build_design(default_splits(), lib, grid_shape=(1024, 1024), seed=s), lib, 650).fractions
          for s in (0, 1, 2)]
    fr = np.array(fr)
    # +/-2 percentage points of total power
    assert np.all(np.ptp(fr, axis=0) <= 0.04)
