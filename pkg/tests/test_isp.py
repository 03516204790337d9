import numpy as np
import pytest

from lensforge.isp import (
    SensorConfigError,
    SensorModel,
    add_sensor_noise,
    apply_ccm,
    apply_wb,
    demosaic_bilinear,
    forward_isp,
    gamma_decode,
    gamma_encode,
    inverse_isp,
    invert_ccm,
    invert_wb,
    mosaic_rggb,
)


@pytest.fixture
def sensor():
    return SensorModel(
        width=64, height=48,
        ccm=((0.9, 0.08, 0.02), (0.05, 0.9, 0.05), (0.02, 0.08, 0.9)),
    )


def test_gamma_round_trip():
    x = np.linspace(1e-4, 1.0, 500)
    np.testing.assert_allclose(gamma_decode(gamma_encode(x)), x, atol=1e-12)


def test_wb_ccm_gamma_inverse_round_trip(sensor):
    rng = np.random.default_rng(0)
    img = rng.uniform(1e-3, 1.0, (48, 64, 3))
    # forward then inverse, and inverse then forward
    fwd = forward_isp(inverse_isp(img, sensor), sensor)
    np.testing.assert_allclose(fwd, img, atol=1e-6)
    inv = inverse_isp(forward_isp(img, sensor), sensor)
    np.testing.assert_allclose(inv, img, atol=1e-6)


def test_wb_and_ccm_individually_invertible(sensor):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (8, 8, 3))
    np.testing.assert_allclose(invert_wb(apply_wb(img, sensor), sensor), img, atol=1e-14)
    np.testing.assert_allclose(invert_ccm(apply_ccm(img, sensor), sensor), img, atol=1e-12)


def test_mosaic_pattern_is_rggb():
    img = np.zeros((4, 4, 3))
    img[..., 0] = 1.0    # R plane
    img[..., 1] = 2.0    # G
    img[..., 2] = 3.0    # B
    raw = mosaic_rggb(img)
    assert raw[0, 0] == 1.0 and raw[0, 1] == 2.0
    assert raw[1, 0] == 2.0 and raw[1, 1] == 3.0


def test_mosaic_demosaic_exact_on_constant():
    img = np.full((32, 40, 3), 0.4187)
    out = demosaic_bilinear(mosaic_rggb(img))
    np.testing.assert_array_equal(out, img)


def test_demosaic_linear():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (16, 16))
    b = rng.uniform(0, 1, (16, 16))
    lhs = demosaic_bilinear(0.3 * a + 0.7 * b)
    rhs = 0.3 * demosaic_bilinear(a) + 0.7 * demosaic_bilinear(b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_noise_statistics(sensor):
    rng = np.random.default_rng(7)
    raw = np.full((256, 256), 0.5)
    noisy = add_sensor_noise(raw, sensor, rng)
    resid = noisy - raw
    expected_var = sensor.read_sigma**2 + sensor.shot_gain * 0.5
    assert resid.var() == pytest.approx(expected_var, rel=0.05)
    assert abs(resid.mean()) < 5 * np.sqrt(expected_var / raw.size)


def test_sensor_invariants_enforced():
    with pytest.raises(SensorConfigError):
        SensorModel(channel_weights=((0.5, 0.2, 0.1, 0.1, 0.05),) * 3)  # sums to 0.95
    with pytest.raises(SensorConfigError):
        SensorModel(wb_gains=(1.0, 0.0, 1.0))
    with pytest.raises(SensorConfigError):
        SensorModel(ccm=((1, 0, 0), (1, 0, 0), (0, 0, 1)))   # singular


def test_sensor_dict_round_trip(sensor):
    back = SensorModel.from_dict(sensor.to_dict())
    assert back == sensor
