import math

import numpy as np
import pytest

from lensforge.imaging import (
    PsfError,
    accumulate_psf,
    build_patch_kernels,
    build_patch_layout,
    build_psf_grid,
    combine_channel,
    compute_psf,
    degrade,
    degrade_raw,
    interpolation_weights,
    patch_convolve,
    patch_psf,
    psf_sigma_mm,
    rotate_psf,
)
from lensforge.isp import SensorModel, forward_isp, inverse_isp
from lensforge.lens import Glass, LensSystem, Surface
from tests.conftest import smooth_image


@pytest.fixture
def singlet():
    return LensSystem(
        surfaces=(
            Surface(0.0, 3.0, None, is_stop=True),
            Surface(0.012, 5.0, Glass(1.5168, 64.17)),
            Surface(-0.012, 0.0, None),
        ),
        image_distance=80.0,
        entrance_pupil_diameter=10.0,
    )


# ---------------------------------------------------------------------------
# PSF accumulation
# ---------------------------------------------------------------------------

def test_psf_unit_sum_and_center_anchor(singlet, small_sensor):
    psf, chief = compute_psf(singlet, 0.0, 550.0, 1e10, size=21,
                             sensor=small_sensor, rings=6)
    assert psf.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(psf >= 0)
    # on-axis: chief at the origin, map peak at the center pixel
    assert chief == pytest.approx((0.0, 0.0), abs=1e-9)
    assert np.unravel_index(psf.argmax(), psf.shape) == (10, 10)


def test_single_point_psf_is_discretized_gaussian(small_sensor):
    # all rays at the anchor: the map is the separable Gaussian evaluated on
    # the pixel grid
    anchor = (0.7, -0.3)
    psf = accumulate_psf([anchor[0]] * 4, [anchor[1]] * 4, anchor, 9, small_sensor)
    dx, dy = small_sensor.pitch_mm
    sigma = psf_sigma_mm(small_sensor)
    c = 9 // 2
    gx = np.exp(-(((np.arange(9) - c) * dx) ** 2) / (2 * sigma**2))
    gy = np.exp(-(((np.arange(9) - c) * dy) ** 2) / (2 * sigma**2))
    expected = np.outer(gy, gx)
    expected /= expected.sum()
    np.testing.assert_allclose(psf, expected, atol=1e-12)


def test_ray_at_three_sigma_contributes_e_minus_45(small_sensor):
    # sigma = sqrt(dx^2 + dy^2)/3, so the diagonal neighbor of the anchored
    # pixel sits at exactly 3 sigma: weight ratio e^-4.5.
    psf = accumulate_psf([0.0], [0.0], (0.0, 0.0), 7, small_sensor)
    c = 7 // 2
    ratio = psf[c + 1, c + 1] / psf[c, c]
    assert ratio == pytest.approx(math.exp(-4.5), rel=1e-12)


def test_psf_error_without_rays(small_sensor):
    with pytest.raises(PsfError):
        accumulate_psf([], [], (0.0, 0.0), 9, small_sensor)


# ---------------------------------------------------------------------------
# Channel synthesis
# ---------------------------------------------------------------------------

def test_combine_channel_identical_inputs():
    rng = np.random.default_rng(0)
    base = rng.uniform(0, 1, (9, 9))
    base /= base.sum()
    psfs = np.stack([base] * 5)
    out = combine_channel(psfs, [0.15, 0.25, 0.25, 0.2, 0.15])
    np.testing.assert_allclose(out, base, atol=1e-15)


def test_combine_channel_degenerate_weights():
    rng = np.random.default_rng(1)
    psfs = rng.uniform(0, 1, (5, 7, 7))
    out = combine_channel(psfs, [1.0, 0.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(out, psfs[0])


def test_combine_channel_offset_pair_direct_sum():
    a = np.zeros((7, 7))
    a[3, 3] = 1.0
    b = np.zeros((7, 7))
    b[3, 4] = 1.0   # one pixel lateral offset
    out = combine_channel(np.stack([a, b]), [0.5, 0.5])
    expected = 0.5 * a + 0.5 * b
    np.testing.assert_array_equal(out, expected)
    assert out[3, 3] == 0.5 and out[3, 4] == 0.5


def test_combine_channel_rejects_unnormalized():
    with pytest.raises(ValueError):
        combine_channel(np.ones((2, 3, 3)) / 9.0, [0.7, 0.7])


def test_grid_channel_offsets_recorded(singlet, small_sensor):
    grid = build_psf_grid(singlet, [0.0, 4.0], 1e10, small_sensor, size=17, rings=5)
    assert grid.psfs.shape == (2, 3, 17, 17)
    np.testing.assert_allclose(grid.psfs.sum(axis=(2, 3)), 1.0, atol=1e-9)
    # green channel is the reference: zero offset
    np.testing.assert_allclose(grid.channel_offsets[:, 1, :], 0.0, atol=1e-12)
    # off-axis red/blue offsets are nonzero (lateral color) and opposite
    assert abs(grid.channel_offsets[1, 0, 0]) > 1e-5
    assert np.sign(grid.channel_offsets[1, 0, 0]) != np.sign(grid.channel_offsets[1, 2, 0])


# ---------------------------------------------------------------------------
# Patch interpolation and rotation
# ---------------------------------------------------------------------------

def test_interpolation_weights_snap():
    w = interpolation_weights(2.0, np.array([0.0, 2.0, 4.0]))
    np.testing.assert_array_equal(w, [0.0, 1.0, 0.0])


def test_interpolation_weights_equidistant():
    w = interpolation_weights(1.0, np.array([0.0, 2.0]))
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-15)


def test_interpolation_weights_sum_to_one():
    rng = np.random.default_rng(2)
    radii = np.sort(rng.uniform(0, 10, 7))
    for r in rng.uniform(0, 12, 50):
        w = interpolation_weights(r, radii)
        assert abs(w.sum() - 1.0) < 1e-12


def test_rotation_90_matches_transpose_flip():
    rng = np.random.default_rng(3)
    psf = rng.uniform(0, 1, (15, 15))
    out = rotate_psf(psf, math.pi / 2)
    oracle = psf.T[:, ::-1]
    np.testing.assert_allclose(out, oracle, atol=1e-6)


def test_rotation_zero_is_identity():
    rng = np.random.default_rng(4)
    psf = rng.uniform(0, 1, (11, 11))
    np.testing.assert_allclose(rotate_psf(psf, 0.0), psf, atol=1e-12)


def test_patch_psf_unit_sum(singlet, small_sensor):
    grid = build_psf_grid(singlet, [0.0, 2.0, 4.0], 1e10, small_sensor, size=13, rings=4)
    layout = build_patch_layout(small_sensor, grid.field_radii_mm, patch_px=16)
    for hi in range(layout.n_h):
        for wi in range(layout.n_w):
            k = patch_psf(grid, layout, hi, wi)
            np.testing.assert_allclose(k.sum(axis=(1, 2)), 1.0, atol=1e-6)


def test_patch_rotation_angle_convention(small_sensor):
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    # patch centers relative to the image center; rightmost middle-row patch
    # sits on the +x axis within half a patch
    n_h, n_w = layout.shape
    dx, dy = small_sensor.pitch_mm
    cy = ((0 + 0.5) * 16 - small_sensor.height / 2.0) * dy
    cx = ((n_w - 0.5) * 16 - small_sensor.width / 2.0) * dx
    assert layout.rotation_rad[0, n_w - 1] == pytest.approx(math.atan2(cy, cx))


def test_patch_partition_is_exact(small_sensor):
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    cover = np.zeros((small_sensor.height, small_sensor.width), dtype=int)
    s = layout.patch_px
    for hi in range(layout.n_h):
        for wi in range(layout.n_w):
            cover[hi * s:(hi + 1) * s, wi * s:(wi + 1) * s] += 1
    assert np.all(cover == 1)


def test_indivisible_patch_grid_rejected(small_sensor):
    with pytest.raises(ValueError):
        build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=13)


# ---------------------------------------------------------------------------
# Degradation pipeline
# ---------------------------------------------------------------------------

def _delta_kernels(layout, size):
    k = np.zeros((layout.n_h, layout.n_w, 3, size, size))
    k[..., size // 2, size // 2] = 1.0
    return k


def test_delta_kernels_identity_on_constant(small_sensor):
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    kernels = _delta_kernels(layout, 9)
    img = np.full((small_sensor.height, small_sensor.width, 3), 0.55)
    out = degrade(img, kernels, layout, small_sensor)
    assert np.abs(out - img).max() <= 1.0 / 65535.0


def test_uniform_gray_interior_unchanged_any_kernel(singlet, small_sensor):
    grid = build_psf_grid(singlet, [0.0, 3.0], 1e10, small_sensor, size=9, rings=4)
    layout = build_patch_layout(small_sensor, grid.field_radii_mm, patch_px=16)
    kernels = build_patch_kernels(grid, layout)
    img = np.full((small_sensor.height, small_sensor.width, 3), 0.42)
    out = degrade(img, kernels, layout, small_sensor)
    # unit-sum kernels convolve a constant to itself; edge replication keeps
    # the borders constant as well
    np.testing.assert_allclose(out, img, atol=2e-6)


def test_degrade_raw_linearity(small_sensor):
    rng = np.random.default_rng(8)
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    kernels = rng.uniform(0, 1, (layout.n_h, layout.n_w, 3, 9, 9))
    kernels /= kernels.sum(axis=(-2, -1), keepdims=True)
    a = rng.uniform(0, 1, (small_sensor.height, small_sensor.width, 3))
    b = rng.uniform(0, 1, (small_sensor.height, small_sensor.width, 3))
    lhs = degrade_raw(0.4 * a + 1.7 * b, kernels, layout, small_sensor)
    rhs = 0.4 * degrade_raw(a, kernels, layout, small_sensor) + 1.7 * degrade_raw(
        b, kernels, layout, small_sensor
    )
    assert np.abs(lhs - rhs).max() < 1e-9


def test_patch_convolution_matches_direct_convolution(small_sensor):
    # single interior patch compared against an explicit dense convolution
    rng = np.random.default_rng(9)
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    kernels = rng.uniform(0, 1, (layout.n_h, layout.n_w, 3, 5, 5))
    kernels /= kernels.sum(axis=(-2, -1), keepdims=True)
    img = rng.uniform(0, 1, (small_sensor.height, small_sensor.width, 3))
    out = patch_convolve(img, kernels, layout)
    k = 2
    patch_h, patch_w = 1, 1
    window = np.pad(img, ((k, k), (k, k), (0, 0)), mode="edge")[
        patch_h * 16:patch_h * 16 + 16 + 2 * k, patch_w * 16:patch_w * 16 + 16 + 2 * k
    ]
    kernel = kernels[patch_h, patch_w, 0]
    direct = np.zeros((16, 16))
    for i in range(16):
        for j in range(16):
            acc = 0.0
            for u in range(5):
                for v in range(5):
                    acc += kernel[u, v] * window[i + 4 - u, j + 4 - v, 0]
            direct[i, j] = acc
    np.testing.assert_allclose(
        out[patch_h * 16:(patch_h + 1) * 16, patch_w * 16:(patch_w + 1) * 16, 0],
        direct, atol=1e-12,
    )


def test_noise_flag_changes_output_deterministically(small_sensor):
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    kernels = _delta_kernels(layout, 5)
    img = smooth_image(5, small_sensor.height, small_sensor.width)
    a = degrade(img, kernels, layout, small_sensor, noise_rng=np.random.default_rng(1))
    b = degrade(img, kernels, layout, small_sensor, noise_rng=np.random.default_rng(1))
    c = degrade(img, kernels, layout, small_sensor)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0


def test_degrade_shape_mismatch_rejected(small_sensor):
    layout = build_patch_layout(small_sensor, np.array([0.0, 1.0]), patch_px=16)
    kernels = _delta_kernels(layout, 5)
    with pytest.raises(ValueError):
        degrade(np.zeros((8, 8, 3)), kernels, layout, small_sensor)
