"""Ray-traced PSF simulation and the image degradation pipeline.

PSF formation: rays are aimed to fill the stop for a (field, wavelength)
cell and traced to the image plane; each intersection deposits a Gaussian of
width ``sigma = sqrt(dx^2 + dy^2) / 3`` (dx, dy the pixel pitch, so the
nearest pixel captures essentially all of a ray's energy) onto a t x t pixel
grid anchored at the chief-ray intersection. Maps are normalized to unit
sum.

Channel synthesis: per-channel PSFs are response-weighted sums of per
-wavelength PSFs. All maps of a field share one anchor, the chief-ray
intersection of the green channel's central wavelength, so the red/blue
lateral color offsets are baked into the map content and recorded as
metadata.

Patch model: the image is split into an exact grid of s x s patches; each
patch uses a single PSF interpolated over the sampled field radii with
normalized inverse-square-distance weights (snapping when a patch sits on a
sampled radius) and rotated to the patch azimuth about the map center.

The degradation chain is: inverse ISP, per-patch convolution (patches are
padded from neighboring image content, edge-replicated at borders), stitch,
RGGB mosaic, optional Gaussian shot/read noise, bilinear demosaic, forward
ISP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lensforge.isp import (
    SensorModel,
    add_sensor_noise,
    demosaic_bilinear,
    forward_isp,
    inverse_isp,
    mosaic_rggb,
)
from lensforge.lens import LensSystem
from lensforge.raytrace import (
    aim_batch,
    expand_chromatic,
    hexapolar_grid,
    launch_from_q,
    marginal_stop_radius,
    systems_from_lens,
    trace_batch,
)

DEFAULT_PSF_SIZE = 33
DEFAULT_PSF_RINGS = 10
DEFAULT_FIELD_SAMPLES = 7
DEFAULT_PATCH_PX = 64

# A patch radius within this of a sampled field radius snaps to that field
# (the inverse-square weight diverges at zero distance).
SNAP_TOL_MM = 1e-6


class PsfError(RuntimeError):
    """PSF could not be formed (unphysical configuration, no valid rays)."""


# ---------------------------------------------------------------------------
# PSF formation
# ---------------------------------------------------------------------------

def psf_sigma_mm(sensor: SensorModel) -> float:
    dx, dy = sensor.pitch_mm
    return math.sqrt(dx * dx + dy * dy) / 3.0


def accumulate_psf(hits_x, hits_y, anchor, size: int, sensor: SensorModel) -> np.ndarray:
    """Deposit ray intersections onto a unit-sum t x t map anchored so the
    center pixel sits at ``anchor`` (mm on the image plane)."""
    hits_x = np.asarray(hits_x, dtype=float)
    hits_y = np.asarray(hits_y, dtype=float)
    if hits_x.size == 0:
        raise PsfError("no valid rays reached the image plane")
    dx, dy = sensor.pitch_mm
    sigma = psf_sigma_mm(sensor)
    c = size // 2
    px = anchor[0] + (np.arange(size) - c) * dx   # columns
    py = anchor[1] + (np.arange(size) - c) * dy   # rows
    ddx = hits_x[:, None] - px[None, :]
    ddy = hits_y[:, None] - py[None, :]
    ex = np.exp(-(ddx**2) / (2 * sigma**2))
    ey = np.exp(-(ddy**2) / (2 * sigma**2))
    psf = ey.T @ ex   # (size_rows, size_cols): sum_k exp(-d^2/(2 sigma^2))
    total = psf.sum()
    if not np.isfinite(total) or total <= 0:
        raise PsfError("PSF accumulation produced no energy")
    return psf / total


def compute_psf(
    lens: LensSystem,
    field_deg: float,
    wavelength_nm: float,
    depth_mm: float,
    size: int = DEFAULT_PSF_SIZE,
    sensor: SensorModel | None = None,
    rings: int = DEFAULT_PSF_RINGS,
    anchor: tuple[float, float] | None = None,
) -> tuple[np.ndarray, tuple[float, float]]:
    """Single (field, wavelength) PSF. Returns (map, chief-ray intersection).

    The map is anchored at the chief-ray intersection unless ``anchor`` is
    given (used to express several wavelengths on a common grid)."""
    sensor = sensor or SensorModel()
    hits, valid, chief = _trace_field(lens, [field_deg], [wavelength_nm], depth_mm, rings)
    x = hits[0, 0, valid[0, 0], 0]
    y = hits[0, 0, valid[0, 0], 1]
    if not valid[0, 0, 0]:
        raise PsfError(f"chief ray failed for field {field_deg} deg")
    use_anchor = anchor if anchor is not None else (chief[0, 0, 0], chief[0, 0, 1])
    return accumulate_psf(x, y, use_anchor, size, sensor), (
        float(chief[0, 0, 0]),
        float(chief[0, 0, 1]),
    )


def _trace_field(lens, fields_deg, wavelengths_nm, depth_mm, rings):
    """Aim and trace (W, F, R) bundles. Returns hits (W,F,R,2), valid mask,
    and chief intersections (W,F,2)."""
    systems = systems_from_lens(lens)
    systems.semi_diameters = None
    r_stop, ok = marginal_stop_radius(systems)
    if not ok[0]:
        raise PsfError("marginal ray cannot define the stop aperture")
    sysx = expand_chromatic(systems, wavelengths_nm)
    nw = len(wavelengths_nm)
    r_stop_x = np.tile(r_stop, nw)
    pupil = hexapolar_grid(rings)
    aim = aim_batch(sysx, 587.6, fields_deg, depth_mm, pupil, r_stop_x)
    origin, direction = launch_from_q(sysx, aim.q, fields_deg, depth_mm)
    origin = np.where(aim.converged[..., None], origin, np.nan)
    tr = trace_batch(sysx, 587.6, origin, direction)
    valid = tr.valid & aim.converged
    hits = tr.position[..., :2]
    chief = hits[:, :, 0, :]
    return hits, valid, chief


def combine_channel(psfs: np.ndarray, weights) -> np.ndarray:
    """Response-weighted sum of per-wavelength PSF maps (common anchor)."""
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"channel weights must sum to 1, got {weights.sum()}")
    psfs = np.asarray(psfs, dtype=float)
    return np.tensordot(weights, psfs, axes=(0, 0))


@dataclass
class PSFGrid:
    """Per-field, per-channel PSFs with a common per-field anchor."""

    psfs: np.ndarray             # (F, 3, t, t), each map unit-sum
    anchors: np.ndarray          # (F, 2) green-channel chief intersection, mm
    channel_offsets: np.ndarray  # (F, 3, 2) chief offset per channel vs green
    field_angles_deg: np.ndarray  # (F,)
    size: int
    pitch_mm: tuple[float, float]

    @property
    def field_radii_mm(self) -> np.ndarray:
        return np.hypot(self.anchors[:, 0], self.anchors[:, 1])

    @property
    def center_index(self) -> tuple[int, int]:
        return (self.size // 2, self.size // 2)


def rgb_psf(
    lens: LensSystem,
    field_deg: float,
    depth_mm: float,
    sensor: SensorModel | None = None,
    size: int = DEFAULT_PSF_SIZE,
    rings: int = DEFAULT_PSF_RINGS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three-channel PSF of one field. Returns (psf (3,t,t), anchor (2,),
    channel offsets (3,2) relative to the green anchor)."""
    grid = build_psf_grid(lens, [field_deg], depth_mm, sensor, size, rings)
    return grid.psfs[0], grid.anchors[0], grid.channel_offsets[0]


def build_psf_grid(
    lens: LensSystem,
    fields_deg,
    depth_mm: float,
    sensor: SensorModel | None = None,
    size: int = DEFAULT_PSF_SIZE,
    rings: int = DEFAULT_PSF_RINGS,
) -> PSFGrid:
    """Trace all (field, channel wavelength) cells and build the PSF grid.

    All wavelengths of a field accumulate on the grid anchored at the chief
    ray of the green channel's central wavelength, so red/blue lateral color
    is visible in the maps themselves."""
    sensor = sensor or SensorModel()
    fields_deg = np.atleast_1d(np.asarray(fields_deg, dtype=float))
    wavelengths: list[float] = []
    spans: list[tuple[int, int]] = []   # per channel: slice into wavelengths
    for c in range(3):
        start = len(wavelengths)
        wavelengths.extend(sensor.channel_wavelengths[c])
        spans.append((start, len(wavelengths)))
    hits, valid, chief = _trace_field(lens, fields_deg, wavelengths, depth_mm, rings)

    g_lams = sensor.channel_wavelengths[1]
    g_mid = spans[1][0] + len(g_lams) // 2
    F = fields_deg.size
    psfs = np.empty((F, 3, size, size))
    anchors = np.empty((F, 2))
    offsets = np.empty((F, 3, 2))
    for fi in range(F):
        if not valid[g_mid, fi, 0]:
            raise PsfError(
                f"green-channel chief ray failed for field {fields_deg[fi]} deg"
            )
        anchor = (chief[g_mid, fi, 0], chief[g_mid, fi, 1])
        anchors[fi] = anchor
        for c in range(3):
            lo, hi = spans[c]
            weights = np.asarray(sensor.channel_weights[c])
            acc = np.zeros((size, size))
            for k, wi in enumerate(range(lo, hi)):
                sel = valid[wi, fi]
                if not sel.any():
                    raise PsfError(
                        f"no valid rays for field {fields_deg[fi]} deg at "
                        f"{wavelengths[wi]} nm"
                    )
                acc += weights[k] * accumulate_psf(
                    hits[wi, fi, sel, 0], hits[wi, fi, sel, 1], anchor, size, sensor
                )
            psfs[fi, c] = acc / acc.sum()
            mid = lo + (hi - lo) // 2
            offsets[fi, c] = chief[mid, fi] - np.asarray(anchor)
    return PSFGrid(
        psfs=psfs,
        anchors=anchors,
        channel_offsets=offsets,
        field_angles_deg=fields_deg,
        size=size,
        pitch_mm=sensor.pitch_mm,
    )


# ---------------------------------------------------------------------------
# Patch layout: interpolation weights and rotation angles
# ---------------------------------------------------------------------------

def interpolation_weights(radius_mm: float, field_radii_mm: np.ndarray,
                          snap_tol: float = SNAP_TOL_MM) -> np.ndarray:
    """Normalized inverse-square-distance weights over the sampled field
    radii; snaps to a sample when the patch sits on it."""
    d = np.abs(radius_mm - np.asarray(field_radii_mm, dtype=float))
    w = np.zeros_like(d)
    if d.min() < snap_tol:
        w[int(np.argmin(d))] = 1.0
        return w
    w = 1.0 / d**2
    return w / w.sum()


def rotate_psf(psf: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rotate a map about its center pixel by ``angle_rad`` (x toward y) with
    bilinear resampling, zero fill outside, no renormalization."""
    t = psf.shape[-1]
    c = t // 2
    j, i = np.meshgrid(np.arange(t), np.arange(t))
    x = j - c
    y = i - c
    cos_b, sin_b = math.cos(angle_rad), math.sin(angle_rad)
    src_x = cos_b * x + sin_b * y + c
    src_y = -sin_b * x + cos_b * y + c
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx = src_x - x0
    fy = src_y - y0

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < t) & (xx >= 0) & (xx < t)
        vals = psf[..., np.clip(yy, 0, t - 1), np.clip(xx, 0, t - 1)]
        return np.where(inside, vals, 0.0)

    out = (
        sample(y0, x0) * (1 - fx) * (1 - fy)
        + sample(y0, x0 + 1) * fx * (1 - fy)
        + sample(y0 + 1, x0) * (1 - fx) * fy
        + sample(y0 + 1, x0 + 1) * fx * fy
    )
    return out


@dataclass
class PatchLayout:
    """Partition of the sensor into s x s patches with per-patch PSF
    interpolation weights and rotation angles."""

    patch_px: int
    n_h: int
    n_w: int
    rotation_rad: np.ndarray   # (n_h, n_w)
    weights: np.ndarray        # (n_h, n_w, F), each row sums to 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_h, self.n_w)


def build_patch_layout(sensor: SensorModel, field_radii_mm,
                       patch_px: int = DEFAULT_PATCH_PX) -> PatchLayout:
    """Compute per-patch rotation (the patch-center azimuth, measured from
    the +x sampling axis via atan2) and interpolation weights from the patch
    center's radial position."""
    if sensor.height % patch_px or sensor.width % patch_px:
        raise ValueError(
            f"sensor {sensor.width}x{sensor.height} is not divisible into "
            f"{patch_px}px patches"
        )
    n_h = sensor.height // patch_px
    n_w = sensor.width // patch_px
    dx, dy = sensor.pitch_mm
    radii = np.asarray(field_radii_mm, dtype=float)
    rotation = np.zeros((n_h, n_w))
    weights = np.zeros((n_h, n_w, len(radii)))
    for hi in range(n_h):
        for wi in range(n_w):
            cx = ((wi + 0.5) * patch_px - sensor.width / 2.0) * dx
            cy = ((hi + 0.5) * patch_px - sensor.height / 2.0) * dy
            rotation[hi, wi] = math.atan2(cy, cx)
            weights[hi, wi] = interpolation_weights(math.hypot(cx, cy), radii)
    return PatchLayout(
        patch_px=patch_px, n_h=n_h, n_w=n_w, rotation_rad=rotation, weights=weights
    )


def patch_psf(grid: PSFGrid, layout: PatchLayout, h: int, w: int) -> np.ndarray:
    """The (3, t, t) kernel of patch (h, w): field-interpolated, rotated to
    the patch azimuth, renormalized to unit sum per channel."""
    mix = np.tensordot(layout.weights[h, w], grid.psfs, axes=(0, 0))   # (3,t,t)
    out = rotate_psf(mix, layout.rotation_rad[h, w])
    sums = out.sum(axis=(-2, -1), keepdims=True)
    return out / np.maximum(sums, 1e-300)


def build_patch_kernels(grid: PSFGrid, layout: PatchLayout) -> np.ndarray:
    """(n_h, n_w, 3, t, t) kernels for every patch."""
    out = np.empty((layout.n_h, layout.n_w, 3, grid.size, grid.size))
    for hi in range(layout.n_h):
        for wi in range(layout.n_w):
            out[hi, wi] = patch_psf(grid, layout, hi, wi)
    return out


def kernels_from_psfs(psfs: np.ndarray, grid: PSFGrid, layout: PatchLayout) -> np.ndarray:
    """Patch kernels for externally supplied per-field maps (same layout).

    Used by the joint-refinement stage, which perturbs PSF values while
    keeping the interpolation/rotation structure."""
    tmp = PSFGrid(
        psfs=psfs,
        anchors=grid.anchors,
        channel_offsets=grid.channel_offsets,
        field_angles_deg=grid.field_angles_deg,
        size=grid.size,
        pitch_mm=grid.pitch_mm,
    )
    return build_patch_kernels(tmp, layout)


# ---------------------------------------------------------------------------
# Patch-wise convolution and the degradation pipeline
# ---------------------------------------------------------------------------

def _conv_valid_fft(window: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Linear convolution of ``window`` with ``kernel``, 'valid' region."""
    m0, m1 = window.shape
    t0, t1 = kernel.shape
    n0, n1 = m0 + t0 - 1, m1 + t1 - 1
    fw = np.fft.rfft2(window, s=(n0, n1))
    fk = np.fft.rfft2(kernel, s=(n0, n1))
    full = np.fft.irfft2(fw * fk, s=(n0, n1))
    return full[t0 - 1:m0, t1 - 1:m1]


def patch_convolve(raw: np.ndarray, kernels: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Convolve each s x s patch of a raw RGB image with its own per-channel
    kernel. Patches are padded by the kernel half-width with neighboring
    image pixels (edge replication at the borders) to suppress seams."""
    h, w, _ = raw.shape
    s = layout.patch_px
    t = kernels.shape[-1]
    k = t // 2
    padded = np.pad(raw, ((k, k), (k, k), (0, 0)), mode="edge")
    out = np.empty_like(raw)
    for hi in range(layout.n_h):
        for wi in range(layout.n_w):
            window = padded[hi * s:hi * s + s + 2 * k, wi * s:wi * s + s + 2 * k]
            for c in range(3):
                out[hi * s:(hi + 1) * s, wi * s:(wi + 1) * s, c] = _conv_valid_fft(
                    window[..., c], kernels[hi, wi, c]
                )
    return out


def degrade_raw(raw: np.ndarray, kernels: np.ndarray, layout: PatchLayout,
                sensor: SensorModel,
                noise_rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw-domain degradation: patch convolution, mosaic, optional noise,
    demosaic. Linear in the input when noise is off."""
    blurred = patch_convolve(raw, kernels, layout)
    mos = mosaic_rggb(blurred)
    if noise_rng is not None:
        mos = add_sensor_noise(mos, sensor, noise_rng)
    return demosaic_bilinear(mos)


def degrade(image_srgb: np.ndarray, kernels: np.ndarray, layout: PatchLayout,
            sensor: SensorModel,
            noise_rng: np.random.Generator | None = None) -> np.ndarray:
    """Full degradation of a scene sRGB image (values in [0, 1])."""
    if image_srgb.shape[:2] != (sensor.height, sensor.width):
        raise ValueError(
            f"image {image_srgb.shape[:2]} does not match sensor "
            f"{(sensor.height, sensor.width)}"
        )
    raw = inverse_isp(image_srgb, sensor)
    raw_deg = degrade_raw(raw, kernels, layout, sensor, noise_rng)
    return np.clip(forward_isp(raw_deg, sensor), 0.0, 1.0)
