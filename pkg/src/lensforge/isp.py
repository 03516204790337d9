"""Sensor model and the forward/inverse ISP chain.

The forward chain (sensor raw to display sRGB) is white balance, color
correction matrix, then gamma encoding; scene images are pulled back into
the raw domain with the exact inverses in reverse order. Mosaicking uses an
RGGB Bayer pattern; demosaicking is bilinear via fixed 3x3 kernels on
parity-masked planes with reflection padding (reflection preserves pixel
parity, so constant images survive the mosaic round trip exactly, borders
included). Noise is Gaussian with variance ``read_sigma^2 + shot_gain *
signal`` added to the mosaicked raw.

All operations besides gamma and noise are linear in the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SensorConfigError(ValueError):
    pass


# Default per-channel spectral samples (nm) and normalized weights, a smooth
# Bayer-like response: 5 lines per channel.
DEFAULT_CHANNEL_WAVELENGTHS = (
    (598.0, 620.0, 640.0, 660.0, 680.0),   # R
    (500.0, 520.0, 540.0, 560.0, 580.0),   # G
    (440.0, 460.0, 480.0, 500.0, 520.0),   # B
)
DEFAULT_CHANNEL_WEIGHTS = (
    (0.15, 0.25, 0.25, 0.20, 0.15),
    (0.15, 0.25, 0.25, 0.20, 0.15),
    (0.15, 0.25, 0.25, 0.20, 0.15),
)


@dataclass(frozen=True)
class SensorModel:
    """Pixel grid, spectral response, and ISP parameters of the sensor."""

    width: int = 1920
    height: int = 1280
    pixel_pitch_um: tuple[float, float] = (12.394, 12.394)
    channel_wavelengths: tuple = DEFAULT_CHANNEL_WAVELENGTHS
    channel_weights: tuple = DEFAULT_CHANNEL_WEIGHTS
    wb_gains: tuple[float, float, float] = (2.0, 1.0, 1.8)
    ccm: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    read_sigma: float = 1e-3
    shot_gain: float = 1e-4

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SensorConfigError("sensor resolution must be positive")
        for c, (wls, ws) in enumerate(zip(self.channel_wavelengths, self.channel_weights)):
            if len(wls) != len(ws):
                raise SensorConfigError(f"channel {c}: wavelength/weight length mismatch")
            if abs(sum(ws) - 1.0) > 1e-9:
                raise SensorConfigError(
                    f"channel {c}: response weights must sum to 1, got {sum(ws)}"
                )
        if any(g <= 0 for g in self.wb_gains):
            raise SensorConfigError("white balance gains must be positive")
        m = np.asarray(self.ccm, dtype=float)
        if m.shape != (3, 3) or abs(np.linalg.det(m)) < 1e-12:
            raise SensorConfigError("CCM must be an invertible 3x3 matrix")

    @property
    def pitch_mm(self) -> tuple[float, float]:
        return (self.pixel_pitch_um[0] * 1e-3, self.pixel_pitch_um[1] * 1e-3)

    @property
    def ccm_array(self) -> np.ndarray:
        return np.asarray(self.ccm, dtype=float)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "width": self.width,
            "height": self.height,
            "pixel_pitch_um": list(self.pixel_pitch_um),
            "channel_wavelengths_nm": [list(w) for w in self.channel_wavelengths],
            "channel_weights": [list(w) for w in self.channel_weights],
            "wb_gains": list(self.wb_gains),
            "ccm": [list(r) for r in self.ccm],
            "read_sigma": self.read_sigma,
            "shot_gain": self.shot_gain,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensorModel":
        return cls(
            width=int(data["width"]),
            height=int(data["height"]),
            pixel_pitch_um=tuple(data.get("pixel_pitch_um", (12.394, 12.394))),
            channel_wavelengths=tuple(
                tuple(float(x) for x in row)
                for row in data.get("channel_wavelengths_nm", DEFAULT_CHANNEL_WAVELENGTHS)
            ),
            channel_weights=tuple(
                tuple(float(x) for x in row)
                for row in data.get("channel_weights", DEFAULT_CHANNEL_WEIGHTS)
            ),
            wb_gains=tuple(data.get("wb_gains", (2.0, 1.0, 1.8))),
            ccm=tuple(tuple(float(x) for x in r) for r in data.get("ccm", np.eye(3).tolist())),
            read_sigma=float(data.get("read_sigma", 1e-3)),
            shot_gain=float(data.get("shot_gain", 1e-4)),
        )


# ---------------------------------------------------------------------------
# Gamma (sRGB transfer curve)
# ---------------------------------------------------------------------------

def gamma_encode(linear: np.ndarray) -> np.ndarray:
    """Linear -> sRGB-encoded, elementwise (negative values pass linearly)."""
    x = np.asarray(linear, dtype=float)
    a = 0.055
    safe = np.maximum(x, 0.0)
    return np.where(
        x <= 0.0031308, 12.92 * x, (1 + a) * np.power(safe, 1 / 2.4) - a
    )


def gamma_decode(encoded: np.ndarray) -> np.ndarray:
    """sRGB-encoded -> linear, exact inverse of :func:`gamma_encode`."""
    x = np.asarray(encoded, dtype=float)
    a = 0.055
    safe = np.maximum((x + a) / (1 + a), 0.0)
    return np.where(x <= 0.0031308 * 12.92, x / 12.92, np.power(safe, 2.4))


# ---------------------------------------------------------------------------
# WB / CCM
# ---------------------------------------------------------------------------

def apply_wb(img: np.ndarray, sensor: SensorModel) -> np.ndarray:
    return img * np.asarray(sensor.wb_gains)[None, None, :]


def invert_wb(img: np.ndarray, sensor: SensorModel) -> np.ndarray:
    return img / np.asarray(sensor.wb_gains)[None, None, :]


def apply_ccm(img: np.ndarray, sensor: SensorModel) -> np.ndarray:
    return np.einsum("ij,hwj->hwi", sensor.ccm_array, img)


def invert_ccm(img: np.ndarray, sensor: SensorModel) -> np.ndarray:
    return np.einsum("ij,hwj->hwi", np.linalg.inv(sensor.ccm_array), img)


def forward_isp(raw_rgb: np.ndarray, sensor: SensorModel) -> np.ndarray:
    """Raw RGB -> display sRGB: WB, then CCM, then gamma."""
    return gamma_encode(apply_ccm(apply_wb(raw_rgb, sensor), sensor))


def inverse_isp(srgb: np.ndarray, sensor: SensorModel) -> np.ndarray:
    """Display sRGB -> raw RGB: inverse gamma, inverse CCM, inverse WB."""
    return invert_wb(invert_ccm(gamma_decode(srgb), sensor), sensor)


# ---------------------------------------------------------------------------
# Bayer mosaic / demosaic
# ---------------------------------------------------------------------------

def _bayer_masks(height: int, width: int) -> np.ndarray:
    """(3, H, W) RGGB site masks."""
    masks = np.zeros((3, height, width))
    masks[0, 0::2, 0::2] = 1.0                      # R
    masks[1, 0::2, 1::2] = 1.0                      # G on R rows
    masks[1, 1::2, 0::2] = 1.0                      # G on B rows
    masks[2, 1::2, 1::2] = 1.0                      # B
    return masks


# Bilinear interpolation kernels on masked planes.
_KERNEL_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0
_KERNEL_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0


def _conv3_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid 3x3 convolution of a padded plane via shifted sums."""
    h, w = img.shape[0] - 2, img.shape[1] - 2
    out = np.zeros((h, w))
    for di in range(3):
        for dj in range(3):
            k = kernel[di, dj]
            if k != 0.0:
                out += k * img[di:di + h, dj:dj + w]
    return out


def mosaic_rggb(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) -> single-plane RGGB raw."""
    h, w = rgb.shape[:2]
    masks = _bayer_masks(h, w)
    return (
        masks[0] * rgb[..., 0] + masks[1] * rgb[..., 1] + masks[2] * rgb[..., 2]
    )


def demosaic_bilinear(raw: np.ndarray) -> np.ndarray:
    """Single-plane RGGB raw -> (H, W, 3) by bilinear interpolation.

    Reflection padding preserves the Bayer parity across the border, so the
    operation is linear and exact for channel-constant images."""
    h, w = raw.shape
    masks = _bayer_masks(h, w)
    out = np.empty((h, w, 3))
    for c, kernel in ((0, _KERNEL_RB), (1, _KERNEL_G), (2, _KERNEL_RB)):
        plane = np.pad(raw * masks[c], 1, mode="reflect")
        out[..., c] = _conv3_valid(plane, kernel)
    return out


def add_sensor_noise(raw: np.ndarray, sensor: SensorModel,
                     rng: np.random.Generator) -> np.ndarray:
    """Gaussian shot+read noise: variance read_sigma^2 + shot_gain * signal."""
    std = np.sqrt(sensor.read_sigma**2 + sensor.shot_gain * np.maximum(raw, 0.0))
    return raw + std * rng.standard_normal(raw.shape)
