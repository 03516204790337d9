"""Sequential spherical ray tracing.

The engine is vectorized over a batch of systems sharing one design form, so
a whole population can be traced in single numpy calls. Rays live in arrays
of shape (..., 3) and carry a validity mask; a ray goes invalid when it
misses a surface, suffers total internal reflection, or (when apertures are
enforced) lands beyond a clear semi-diameter. Invalid rays never raise.

Surface intersection uses Newton iteration on the axial ray parameter with
the closed-form sphere sag ``z(r^2) = c r^2 / (1 + sqrt(1 - c^2 r^2))`` and
its derivative ``dz/dr^2 = c / (2 sqrt(1 - c^2 r^2))``. Refraction is the
vector Snell law. Ray aiming solves, per ray, for the launch point on the
first-vertex plane that makes the ray cross the stop surface at a prescribed
point, via Broyden iteration seeded from a paraxial pupil solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from lensforge.lens import (
    D_LINE_NM,
    INFINITE_OBJECT_MM,
    Glass,
    LensSystem,
    ParamSchema,
    Surface,
    dispersion_coefficients,
)

# Newton intersection control.
INTERSECT_TOL_MM = 1e-10
INTERSECT_MAX_ITER = 50

# Ray aiming control. All rays are driven below AIM_TOL; the public contract
# is 1e-8 mm for the chief ray and 1e-6 mm for pupil-edge rays.
AIM_TOL_MM = 1e-9
AIM_MAX_ITER = 20

# Object distances at/above this are traced as exact parallel bundles.
_PARALLEL_THRESHOLD_MM = 1e8

# Margin applied when assigning clear semi-diameters from traced heights.
SEMI_DIAMETER_MARGIN = 1.02


class RayTraceError(RuntimeError):
    pass


class FieldUnreachableError(RayTraceError):
    """Ray aiming failed to converge for a field point."""


class DegeneratePowerError(RayTraceError):
    """System has (near) zero paraxial power; first-order quantities undefined."""


# ---------------------------------------------------------------------------
# Batched system representation
# ---------------------------------------------------------------------------

@dataclass
class SystemArrays:
    """A batch of same-form systems, stored column-wise for vector tracing.

    ``thickness[:, -1]`` is the image gap. ``disp_a``/``disp_b`` hold the
    dispersion coefficients of the medium after each surface (air: 1, 0).
    """

    curvature: np.ndarray      # (B, S)
    thickness: np.ndarray      # (B, S)
    disp_a: np.ndarray         # (B, S)
    disp_b: np.ndarray         # (B, S)
    stop_index: int
    entrance_pupil_diameter: float
    semi_diameters: np.ndarray | None = None   # (B, S)

    @property
    def batch(self) -> int:
        return self.curvature.shape[0]

    @property
    def num_surfaces(self) -> int:
        return self.curvature.shape[1]

    @cached_property
    def z_vertex(self) -> np.ndarray:
        z = np.zeros_like(self.thickness)
        np.cumsum(self.thickness[:, :-1], axis=1, out=z[:, 1:])
        return z

    @cached_property
    def z_image(self) -> np.ndarray:
        return self.z_vertex[:, -1] + self.thickness[:, -1]

    @property
    def total_track(self) -> np.ndarray:
        return self.thickness.sum(axis=1)

    def index_profile(self, wavelength_nm: float) -> np.ndarray:
        """(B, S+1) refractive indices: object space air, then after each surface."""
        lam_um = wavelength_nm * 1e-3
        n_after = self.disp_a + self.disp_b / lam_um**2
        profile = np.empty((self.batch, self.num_surfaces + 1))
        profile[:, 0] = 1.0
        profile[:, 1:] = n_after
        return profile

    def launch_backoff(self) -> float:
        """Axial clearance in front of the first vertex for ray launch."""
        return max(10.0, 1.5 * self.entrance_pupil_diameter)


_DISPERSION_K = (1.0 / (486.1e-3) ** 2) - (1.0 / (656.3e-3) ** 2)
_LAMBDA_D_UM_SQ = (587.6e-3) ** 2


def systems_from_normalized(schema: ParamSchema, x: np.ndarray) -> SystemArrays:
    """Vectorized denormalization of (B, n) coordinates into SystemArrays."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    phys = schema.lo + np.clip(x, 0.0, 1.0) * (schema.hi - schema.lo)
    B = phys.shape[0]
    S = schema.num_surfaces
    curv = np.zeros((B, S))
    has_curv = schema.curvature_index >= 0
    curv[:, has_curv] = phys[:, schema.curvature_index[has_curv]]
    thick = phys[:, schema.spacing_index]
    disp_a = np.ones((B, S))
    disp_b = np.zeros((B, S))
    if schema.num_elements:
        nd = phys[:, schema.glass_indices[:, 0]]   # (B, E)
        vd = phys[:, schema.glass_indices[:, 1]]
        b = (nd - 1.0) / (vd * _DISPERSION_K)
        a = nd - b / _LAMBDA_D_UM_SQ
        glass_after = schema.element_after >= 0
        elems = schema.element_after[glass_after]
        disp_a[:, glass_after] = a[:, elems]
        disp_b[:, glass_after] = b[:, elems]
    return SystemArrays(
        curvature=curv,
        thickness=thick,
        disp_a=disp_a,
        disp_b=disp_b,
        stop_index=schema.stop_index,
        entrance_pupil_diameter=schema.entrance_pupil_diameter,
    )


def expand_chromatic(systems: SystemArrays, wavelengths_nm) -> SystemArrays:
    """Replicate a batch once per wavelength with the index profile baked in
    (``disp_b = 0``), so all wavelengths trace in one call. Copies are
    wavelength-major: copy ``w * B + i`` is system ``i`` at wavelength ``w``."""
    lam_um = np.asarray(wavelengths_nm, dtype=float) * 1e-3
    nw = lam_um.size
    B, S = systems.curvature.shape
    n_after = (
        systems.disp_a[None, :, :]
        + systems.disp_b[None, :, :] / lam_um[:, None, None] ** 2
    )
    return SystemArrays(
        curvature=np.tile(systems.curvature, (nw, 1)),
        thickness=np.tile(systems.thickness, (nw, 1)),
        disp_a=n_after.reshape(nw * B, S),
        disp_b=np.zeros((nw * B, S)),
        stop_index=systems.stop_index,
        entrance_pupil_diameter=systems.entrance_pupil_diameter,
        semi_diameters=(
            np.tile(systems.semi_diameters, (nw, 1))
            if systems.semi_diameters is not None
            else None
        ),
    )


def systems_from_lens(lens: LensSystem) -> SystemArrays:
    """Wrap a single LensSystem as a batch of one."""
    S = len(lens.surfaces)
    curv = np.array([[s.curvature for s in lens.surfaces]])
    thick = np.array(
        [[s.thickness_after for s in lens.surfaces[:-1]] + [lens.image_distance]]
    )
    disp_a = np.ones((1, S))
    disp_b = np.zeros((1, S))
    for i, s in enumerate(lens.surfaces):
        if s.material_after is not None:
            a, b = dispersion_coefficients(s.material_after.n_d, s.material_after.v_d)
            disp_a[0, i] = a
            disp_b[0, i] = b
    sd = None
    if all(s.semi_diameter is not None for s in lens.surfaces):
        sd = np.array([[s.semi_diameter for s in lens.surfaces]])
    return SystemArrays(
        curvature=curv,
        thickness=thick,
        disp_a=disp_a,
        disp_b=disp_b,
        stop_index=lens.stop_index,
        entrance_pupil_diameter=lens.entrance_pupil_diameter,
        semi_diameters=sd,
    )


# ---------------------------------------------------------------------------
# Geometric primitives (vectorized)
# ---------------------------------------------------------------------------

def _sphere_intersect(pos, direction, valid, curvature, vertex_z,
                      tol=INTERSECT_TOL_MM, max_iter=INTERSECT_MAX_ITER):
    """Advance rays to a spherical surface. Shapes broadcast: rays (..., 3),
    curvature and vertex_z broadcastable to the ray batch shape.

    Newton iteration on the axial parameter with the sag function and its
    derivative, seeded from the closed-form root of the sphere equation
    ``c (x^2+y^2+z'^2) - 2 z' = 0`` so that rays with no real intersection
    are rejected immediately instead of iterating.

    Returns (new_pos, valid, r2) where r2 is the squared height at the hit.
    """
    dz = direction[..., 2]
    ok = valid & (dz > 1e-12) & np.isfinite(pos[..., 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(ok, (vertex_z - pos[..., 2]) / np.where(dz > 1e-12, dz, 1.0), 0.0)
    p0 = pos + t0[..., None] * direction
    x0 = np.nan_to_num(p0[..., 0])
    y0 = np.nan_to_num(p0[..., 1])
    r0sq = x0**2 + y0**2
    pd = x0 * direction[..., 0] + y0 * direction[..., 1]
    c = np.broadcast_to(curvature, t0.shape)
    # Quadratic c s^2 + 2 bq s + cq = 0 along the ray from the vertex plane.
    bq = c * pd - dz
    cq = c * r0sq
    disc = bq**2 - c * cq
    has_root = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    qq = -(bq + np.where(bq >= 0, 1.0, -1.0) * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_a = np.where(np.abs(c) > 0, qq / np.where(c != 0, c, 1.0), 0.0)
        s_b = np.where(np.abs(qq) > 1e-300, cq / np.where(qq != 0, qq, 1.0), 0.0)
    # The surface is only the cap through the vertex (|z'| <= |R|, i.e.
    # c z' in [0, 1]); far-hemisphere hits are not on the surface. Among
    # cap roots that lie forward, take the earlier one.
    is_plane = np.abs(c) < 1e-14
    cz_a = c * s_a * dz
    cz_b = c * s_b * dz
    t_a = t0 + s_a
    t_b = t0 + s_b
    good_a = (cz_a >= -1e-12) & (cz_a <= 1.0 + 1e-12) & (t_a > -1e-9)
    good_b = (cz_b >= -1e-12) & (cz_b <= 1.0 + 1e-12) & (t_b > -1e-9)
    s = np.where(good_a & (~good_b | (t_a <= t_b)), s_a, s_b)
    s = np.where(is_plane, 0.0, s)
    on_cap = good_a | good_b | (is_plane & (t0 > -1e-9))
    ok = ok & has_root & on_cap
    t = t0 + np.where(ok, s, 0.0)

    f_val = np.zeros_like(t)
    arg = np.ones_like(t)
    r2 = r0sq
    for _ in range(max_iter):
        p = pos + t[..., None] * direction
        r2 = p[..., 0] ** 2 + p[..., 1] ** 2
        arg = 1.0 - curvature**2 * r2
        root = np.sqrt(np.maximum(arg, 0.0))
        sag = curvature * r2 / (1.0 + root)
        f_val = p[..., 2] - vertex_z - sag
        if np.all(~ok | (np.abs(f_val) <= tol)):
            break
        # dF/dt with dsag/dr2 = c / (2 sqrt(1 - c^2 r^2))
        g = curvature / (2.0 * np.maximum(root, 1e-12))
        dr2_dt = 2.0 * (p[..., 0] * direction[..., 0] + p[..., 1] * direction[..., 1])
        df = direction[..., 2] - g * dr2_dt
        step_ok = np.abs(df) > 1e-15
        t = np.where(ok & step_ok, t - f_val / np.where(step_ok, df, 1.0), t)
    new_pos = pos + t[..., None] * direction
    hit_ok = ok & (np.abs(f_val) <= tol) & (arg >= 0.0) & (t > -1e-9)
    new_pos = np.where(hit_ok[..., None], new_pos, np.nan)
    return new_pos, hit_ok, r2


def _surface_normal(pos, curvature, vertex_z):
    """Unit normal of the sphere at the hit point, oriented toward +z."""
    r2 = pos[..., 0] ** 2 + pos[..., 1] ** 2
    root = np.sqrt(np.maximum(1.0 - curvature**2 * r2, 1e-24))
    g = curvature / (2.0 * root)
    n = np.stack(
        [-2.0 * g * pos[..., 0], -2.0 * g * pos[..., 1], np.ones_like(r2)], axis=-1
    )
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _snell(direction, normal, valid, n1, n2):
    """Vector Snell refraction. n1/n2 broadcast to the ray batch shape.

    Returns (new_direction, valid); total internal reflection invalidates.
    """
    d_dot_n = np.sum(direction * normal, axis=-1)
    # Orient the normal against the incoming ray so cos(theta_i) >= 0.
    sign = np.where(d_dot_n > 0, -1.0, 1.0)
    n_eff = normal * sign[..., None]
    cos_i = -np.sum(direction * n_eff, axis=-1)
    mu = n1 / n2
    sin2_t = mu**2 * (1.0 - cos_i**2)
    tir = sin2_t > 1.0
    cos_t = np.sqrt(np.maximum(1.0 - sin2_t, 0.0))
    new_dir = mu[..., None] * direction + (mu * cos_i - cos_t)[..., None] * n_eff
    ok = valid & ~tir
    new_dir = np.where(ok[..., None], new_dir, np.nan)
    return new_dir, ok


# ---------------------------------------------------------------------------
# Batched tracing
# ---------------------------------------------------------------------------

@dataclass
class TraceBatch:
    """Result of tracing a bundle through a system batch."""

    position: np.ndarray    # (..., 3) at the final plane
    direction: np.ndarray   # (..., 3)
    valid: np.ndarray       # (...,)
    heights: np.ndarray | None = None       # (..., S) radial height per surface
    max_heights: np.ndarray | None = None   # (B, S) max height over rays


def trace_batch(
    systems: SystemArrays,
    wavelength_nm: float,
    origin: np.ndarray,
    direction: np.ndarray,
    *,
    last_surface: int | None = None,
    to_image: bool = True,
    collect_heights: str | None = None,    # None | "max" | "full"
    use_apertures: bool = False,
) -> TraceBatch:
    """Trace rays of shape (B, ..., 3) surface by surface.

    ``last_surface`` stops after intersecting that surface (no refraction
    there); otherwise all surfaces are refracted and, if ``to_image``, rays
    are advanced to the image plane.
    """
    B = systems.batch
    S = systems.num_surfaces
    n_profile = systems.index_profile(wavelength_nm)
    pos = np.asarray(origin, dtype=float)
    dirn = np.asarray(direction, dtype=float)
    extra = pos.shape[1:-1]
    pad = (1,) * len(extra)
    valid = np.isfinite(pos[..., 2]) & np.isfinite(dirn[..., 2])

    heights = np.full(pos.shape[:-1] + (S,), np.nan) if collect_heights == "full" else None
    max_heights = np.zeros((B, S)) if collect_heights == "max" else None

    stop_at = last_surface if last_surface is not None else S - 1
    for s in range(stop_at + 1):
        c = systems.curvature[:, s].reshape((B,) + pad)
        zv = systems.z_vertex[:, s].reshape((B,) + pad)
        pos, valid, r2 = _sphere_intersect(pos, dirn, valid, c, zv)
        if use_apertures and systems.semi_diameters is not None:
            sd = systems.semi_diameters[:, s].reshape((B,) + pad)
            valid = valid & (np.sqrt(r2) <= sd + 1e-9)
        if heights is not None:
            heights[..., s] = np.where(valid, np.sqrt(r2), np.nan)
        if max_heights is not None:
            r = np.where(valid, np.sqrt(r2), 0.0)
            max_heights[:, s] = np.maximum(
                max_heights[:, s], r.reshape(B, -1).max(axis=1)
            )
        if last_surface is not None and s == stop_at:
            break
        n1 = n_profile[:, s].reshape((B,) + pad)
        n2 = n_profile[:, s + 1].reshape((B,) + pad)
        normal = _surface_normal(pos, c, zv)
        dirn, valid = _snell(dirn, normal, valid, n1, n2)

    if last_surface is None and to_image:
        z_img = systems.z_image.reshape((B,) + pad)
        dz = dirn[..., 2]
        fwd = valid & (dz > 1e-12)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(fwd, (z_img - pos[..., 2]) / np.where(fwd, dz, 1.0), np.nan)
        pos = pos + t[..., None] * dirn
        valid = fwd & np.isfinite(pos[..., 0])
    return TraceBatch(pos, dirn, valid, heights, max_heights)


# ---------------------------------------------------------------------------
# Ray generation and aiming
# ---------------------------------------------------------------------------

def hexapolar_grid(rings: int) -> np.ndarray:
    """Unit-disk pupil samples: center point plus ``rings`` hexapolar rings.

    Point 0 is the chief ray; the outermost ring lies exactly on the rim.
    Total count is 1 + 3 r (r + 1).
    """
    if rings < 0:
        raise ValueError("rings must be non-negative")
    pts = [(0.0, 0.0)]
    for r in range(1, rings + 1):
        rho = r / rings
        for j in range(6 * r):
            phi = 2.0 * math.pi * j / (6 * r)
            pts.append((rho * math.cos(phi), rho * math.sin(phi)))
    return np.array(pts)


def _launch_rays(q, fields_rad, object_distance_mm, backoff):
    """Build origins/directions for launch points ``q`` (B, F, R, 2) on the
    z=0 plane, one field angle per F slot. Distances at/past the parallel
    threshold are traced as exact parallel bundles."""
    fields_rad = np.atleast_1d(np.asarray(fields_rad, dtype=float))
    tan_f = np.tan(fields_rad)[None, :, None]
    shape = q.shape[:-1]
    origin = np.empty(shape + (3,))
    direction = np.empty(shape + (3,))
    if object_distance_mm >= _PARALLEL_THRESHOLD_MM:
        sin_f = np.sin(fields_rad)[None, :, None]
        cos_f = np.cos(fields_rad)[None, :, None]
        direction[..., 0] = sin_f
        direction[..., 1] = 0.0
        direction[..., 2] = cos_f
        origin[..., 0] = q[..., 0] - backoff * tan_f
        origin[..., 1] = q[..., 1]
        origin[..., 2] = -backoff
    else:
        x_obj = -object_distance_mm * tan_f
        origin[..., 0] = x_obj
        origin[..., 1] = 0.0
        origin[..., 2] = -object_distance_mm
        direction[..., 0] = q[..., 0] - x_obj
        direction[..., 1] = q[..., 1]
        direction[..., 2] = object_distance_mm
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    return origin, direction


def marginal_stop_radius(systems: SystemArrays, wavelength_nm: float = D_LINE_NM):
    """Stop-surface height of the axial marginal ray launched parallel at
    half the entrance pupil diameter. Defines the physical stop aperture that
    realizes the requested pupil. Returns (radius (B,), ok (B,))."""
    B = systems.batch
    h = systems.entrance_pupil_diameter / 2.0
    backoff = systems.launch_backoff()
    origin = np.broadcast_to(np.array([h, 0.0, -backoff]), (B, 1, 3)).copy()
    direction = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (B, 1, 3)).copy()
    res = trace_batch(
        systems, wavelength_nm, origin, direction, last_surface=systems.stop_index
    )
    r = np.abs(res.position[..., 0][:, 0])
    ok = res.valid[:, 0] & (r > 1e-9)
    return np.where(ok, r, np.nan), ok


def paraxial_basis(systems: SystemArrays, wavelength_nm: float = D_LINE_NM) -> dict:
    """Paraxial trace of the two basis rays (y=1, u=0) and (y=0, u=1) from the
    first vertex plane. Returns the linear coefficients needed for first-order
    analysis and aim initialization. All entries are (B,) or (B, 2) arrays."""
    n = systems.index_profile(wavelength_nm)
    B = systems.batch
    S = systems.num_surfaces
    y = np.zeros((B, 2))
    u = np.zeros((B, 2))
    y[:, 0] = 1.0
    u[:, 1] = 1.0
    y_stop = np.zeros((B, 2))
    y_surf = np.zeros((B, 2, S))
    for s in range(S):
        y_surf[:, :, s] = y
        if s == systems.stop_index:
            y_stop = y.copy()
        phi = (systems.curvature[:, s] * (n[:, s + 1] - n[:, s]))[:, None]
        u = (n[:, s, None] * u - y * phi) / n[:, s + 1, None]
        if s == S - 1:
            u_exit = u.copy()
            y_last = y_surf[:, :, s].copy()
        y = y + systems.thickness[:, s, None] * u
    return {
        "y_stop": y_stop,       # (B, 2): y at stop for each basis ray
        "y_image": y,           # (B, 2): y at the image plane
        "u_exit": u_exit,       # (B, 2): slope in image space
        "y_last": y_last,       # (B, 2): y at the last surface
        "y_surf": y_surf,       # (B, 2, S)
    }


def paraxial_first_order(systems: SystemArrays, wavelength_nm: float = D_LINE_NM):
    """EFL, BFL, TTL from the paraxial marginal ray. Returns dict of (B,)."""
    basis = paraxial_basis(systems, wavelength_nm)
    u_img = basis["u_exit"][:, 0]
    ok = np.abs(u_img) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        efl = np.where(ok, -1.0 / u_img, np.nan)
        bfl = np.where(ok, -basis["y_last"][:, 0] / u_img, np.nan)
    return {
        "efl": efl,
        "bfl": bfl,
        "ttl": systems.total_track,
        "ok": ok,
        "basis": basis,
    }


def paraxial_chief(
    systems: SystemArrays,
    wavelength_nm: float,
    field_rad: float,
    object_distance_mm: float,
    basis: dict | None = None,
):
    """Paraxial chief-ray solve for one field: the launch height on the z=0
    plane that crosses the stop center, the stop-height sensitivity to launch
    height (the aim Jacobian seed), and the paraxial image height.

    Returns (q_chief (B,), j0 (B,), x_image (B,), ok (B,))."""
    if basis is None:
        basis = paraxial_basis(systems, wavelength_nm)
    a_stop, b_stop = basis["y_stop"][:, 0], basis["y_stop"][:, 1]
    a_img, b_img = basis["y_image"][:, 0], basis["y_image"][:, 1]
    tan_f = math.tan(field_rad)
    if object_distance_mm >= _PARALLEL_THRESHOLD_MM:
        # u0 fixed at tan(field); y_stop = a q + b tan_f
        j0 = a_stop
        ok = np.abs(j0) > 1e-12
        q = np.where(ok, -b_stop * tan_f / np.where(ok, j0, 1.0), 0.0)
        u0 = np.full_like(q, tan_f)
    else:
        d = object_distance_mm
        x_obj = -d * tan_f
        # u0 = (q - x_obj)/d; y_stop = (a + b/d) q - b x_obj / d
        j0 = a_stop + b_stop / d
        ok = np.abs(j0) > 1e-12
        q = np.where(ok, (b_stop * x_obj / d) / np.where(ok, j0, 1.0), 0.0)
        u0 = (q - x_obj) / d
    x_img = a_img * q + b_img * u0
    return q, j0, x_img, ok


@dataclass
class AimBatch:
    """Converged launch points on the z=0 plane plus convergence bookkeeping."""

    q: np.ndarray            # (B, F, R, 2)
    converged: np.ndarray    # (B, F, R) residual below AIM_TOL and traceable
    residual: np.ndarray     # (B, F, R) final |stop hit - target|
    targets: np.ndarray      # (B, F, R, 2)


def aim_batch(
    systems: SystemArrays,
    wavelength_nm: float,
    fields_deg,
    object_distance_mm: float,
    pupil: np.ndarray,
    r_stop: np.ndarray,
    q_init: np.ndarray | None = None,
    max_iter: int = AIM_MAX_ITER,
    tol: float = AIM_TOL_MM,
) -> AimBatch:
    """Aim one pupil grid per field so each ray crosses the stop surface at
    ``pupil * r_stop``. Pupil point (0, 0) is the chief ray."""
    fields_deg = np.atleast_1d(np.asarray(fields_deg, dtype=float))
    B, F, R = systems.batch, fields_deg.size, pupil.shape[0]
    backoff = min(systems.launch_backoff(), 0.5 * object_distance_mm)
    targets = (
        np.broadcast_to(pupil[None, None], (B, F, R, 2))
        * np.nan_to_num(r_stop)[:, None, None, None]
    )

    basis = paraxial_basis(systems, wavelength_nm)
    q = np.zeros((B, F, R, 2))
    j0 = np.ones((B,))
    for fi, fdeg in enumerate(fields_deg):
        qc, j, _, ok = paraxial_chief(
            systems, wavelength_nm, math.radians(fdeg), object_distance_mm, basis
        )
        j0 = np.where(ok, j, 1.0)
        q[:, fi, :, 0] = qc[:, None] + targets[:, fi, :, 0] / j0[:, None]
        q[:, fi, :, 1] = targets[:, fi, :, 1] / j0[:, None]
    q_par = q.copy()
    if q_init is not None:
        good = np.isfinite(q_init).all(axis=-1, keepdims=True)
        q = np.where(good, q_init, q)

    jac = np.zeros((B, F, R, 2, 2))
    jac[..., 0, 0] = j0[:, None, None]
    jac[..., 1, 1] = j0[:, None, None]

    fields_rad = np.radians(fields_deg)

    def residual(q_arr):
        o, d = _launch_rays(q_arr, fields_rad, object_distance_mm, backoff)
        tr = trace_batch(
            systems, wavelength_nm, o, d, last_surface=systems.stop_index
        )
        return tr.position[..., :2] - targets, tr.valid

    res, ok = residual(q)
    err = np.abs(res).max(axis=-1)
    # Last traceable point per ray; rays that start untraceable fall back to
    # the paraxial initialization.
    q_good = np.where(ok[..., None], q, q_par)
    r_stop_max = float(np.max(np.nan_to_num(r_stop, nan=0.0)))
    step_cap = max(2.0 * r_stop_max, 0.25 * systems.entrance_pupil_diameter) + 1.0
    # Rays that stay untraceable, or stop making progress, are abandoned;
    # without this, unreachable pupil points burn the full iteration budget.
    fail_count = np.where(ok, 0, 1)
    no_progress = np.zeros_like(fail_count)
    for _ in range(max_iter):
        done = (ok & (err < tol)) | (fail_count >= 4) | (no_progress >= 3)
        if done.all():
            break
        active = ~done
        # Newton step from the current Jacobian estimate (2x2 closed form).
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        degenerate = np.abs(det) < 1e-20
        jac[..., 0, 0] = np.where(degenerate, j0[:, None, None], jac[..., 0, 0])
        jac[..., 1, 1] = np.where(degenerate, j0[:, None, None], jac[..., 1, 1])
        jac[..., 0, 1] = np.where(degenerate, 0.0, jac[..., 0, 1])
        jac[..., 1, 0] = np.where(degenerate, 0.0, jac[..., 1, 0])
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        r0 = np.nan_to_num(res[..., 0])
        r1 = np.nan_to_num(res[..., 1])
        dq = np.empty_like(res)
        dq[..., 0] = -(jac[..., 1, 1] * r0 - jac[..., 0, 1] * r1) / det
        dq[..., 1] = -(-jac[..., 1, 0] * r0 + jac[..., 0, 0] * r1) / det
        # Invalid rays return to their last traceable point (or the paraxial
        # start); the no-progress counter bounds any oscillation.
        dq = np.where(ok[..., None], dq, q_good - q)
        norm = np.linalg.norm(dq, axis=-1, keepdims=True)
        dq = np.where(norm > step_cap, dq * (step_cap / np.maximum(norm, 1e-30)), dq)
        dq = np.where(active[..., None], dq, 0.0)
        q_new = q + dq
        res_new, ok_new = residual(q_new)
        # Broyden rank-1 update where both endpoints traced.
        upd = ok & ok_new & active & (np.sum(dq * dq, axis=-1) > 1e-28)
        dres = res_new - res
        jdq = np.einsum("...ij,...j->...i", jac, dq)
        corr = np.where(
            upd[..., None, None],
            (dres - jdq)[..., :, None]
            * dq[..., None, :]
            / np.maximum(np.sum(dq * dq, axis=-1), 1e-28)[..., None, None],
            0.0,
        )
        jac = jac + corr
        q_good = np.where(ok_new[..., None], q_new, q_good)
        fail_count = np.where(ok_new | ~active, np.where(ok_new, 0, fail_count), fail_count + 1)
        err_new = np.where(ok_new, np.abs(res_new).max(axis=-1), np.inf)
        improved = err_new < 0.5 * err
        no_progress = np.where(active & ~improved, no_progress + 1, np.where(improved, 0, no_progress))
        q, res, ok, err = q_new, res_new, ok_new, err_new
    converged = ok & (err < tol)
    return AimBatch(q=q, converged=converged, residual=err, targets=targets)


def launch_from_q(systems: SystemArrays, q: np.ndarray, fields_deg, object_distance_mm):
    """Origins/directions (B, F, R, 3) for launch points on the z=0 plane."""
    fields_rad = np.radians(np.atleast_1d(np.asarray(fields_deg, dtype=float)))
    backoff = min(systems.launch_backoff(), 0.5 * object_distance_mm)
    return _launch_rays(q, fields_rad, object_distance_mm, backoff)


def launch_aimed(systems: SystemArrays, aim: AimBatch, fields_deg, object_distance_mm):
    """Origins/directions (B, F, R, 3) for a converged aim result."""
    return launch_from_q(systems, aim.q, fields_deg, object_distance_mm)


# ---------------------------------------------------------------------------
# Single-system public API
# ---------------------------------------------------------------------------

@dataclass
class Ray:
    """A single ray: origin (mm), unit direction cosines, wavelength."""

    origin: np.ndarray
    direction: np.ndarray
    wavelength_nm: float = D_LINE_NM
    valid: bool = True

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", d)


@dataclass
class RayBundle:
    """An aimed pupil bundle for one field point."""

    origins: np.ndarray      # (R, 3)
    directions: np.ndarray   # (R, 3)
    wavelength_nm: float
    valid: np.ndarray        # (R,)
    pupil: np.ndarray        # (R, 2) unit-disk coordinates, chief first

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, k: int) -> Ray:
        return Ray(
            self.origins[k], self.directions[k], self.wavelength_nm, bool(self.valid[k])
        )

    def chief(self) -> Ray:
        return self[0]


@dataclass
class TraceResult:
    """Image-plane hits of a traced bundle."""

    image_hits: np.ndarray        # (R, 2)
    valid: np.ndarray             # (R,)
    chief_hit: np.ndarray | None  # (2,) if the chief ray survived
    surface_heights: np.ndarray   # (R, S) radial height at each surface


@dataclass
class ParaxialSummary:
    efl: float
    bfl: float
    ttl: float
    image_height: float | None
    distortion_percent: float | None
    marginal_heights: np.ndarray
    chief_heights: np.ndarray | None


def intersect_surface(ray: Ray, surface: Surface, vertex_z: float = 0.0) -> Ray:
    """Advance a ray to a surface whose vertex sits at ``vertex_z``.

    The returned ray is invalid if there is no forward real intersection or
    the hit lies beyond the surface's semi-diameter (when assigned)."""
    pos = ray.origin[None, None, :]
    dirn = ray.direction[None, None, :]
    valid = np.array([[ray.valid]])
    new_pos, ok, r2 = _sphere_intersect(
        pos, dirn, valid, np.array([[surface.curvature]]), np.array([[vertex_z]])
    )
    is_ok = bool(ok[0, 0])
    if is_ok and surface.semi_diameter is not None:
        is_ok = math.sqrt(float(r2[0, 0])) <= surface.semi_diameter + 1e-9
    return Ray(
        origin=new_pos[0, 0] if is_ok else np.full(3, np.nan),
        direction=ray.direction,
        wavelength_nm=ray.wavelength_nm,
        valid=is_ok,
    )


def refract(ray: Ray, normal: np.ndarray, n1: float, n2: float) -> Ray:
    """Refract a ray through an interface with the given unit normal."""
    if n1 <= 0 or n2 <= 0:
        raise RayTraceError("refractive indices must be positive")
    d, ok = _snell(
        ray.direction[None, :],
        np.asarray(normal, dtype=float)[None, :],
        np.array([ray.valid]),
        np.array([n1]),
        np.array([n2]),
    )
    return Ray(ray.origin, d[0] if ok[0] else np.full(3, np.nan), ray.wavelength_nm, bool(ok[0]))


def surface_normal_at(surface: Surface, point: np.ndarray, vertex_z: float = 0.0) -> np.ndarray:
    """Unit surface normal (oriented toward +z) at a point on the surface."""
    return _surface_normal(
        np.asarray(point, dtype=float)[None, :],
        np.array([surface.curvature]),
        np.array([vertex_z]),
    )[0]


def aim_rays(
    lens: LensSystem,
    field_deg: float,
    wavelength_nm: float,
    object_distance_mm: float = INFINITE_OBJECT_MM,
    rings: int = 6,
) -> RayBundle:
    """Aim a hexapolar pupil bundle that fills the stop aperture for one field.

    The chief ray crosses the stop center to better than 1e-8 mm; rim rays
    graze the stop edge to better than 1e-6 mm. Raises FieldUnreachableError
    when the chief ray cannot be aimed."""
    systems = systems_from_lens(lens)
    r_stop, ok = marginal_stop_radius(systems)
    if not ok[0]:
        raise FieldUnreachableError(
            "marginal ray cannot reach the stop; pupil undefined"
        )
    pupil = hexapolar_grid(rings)
    aim = aim_batch(
        systems, wavelength_nm, [field_deg], object_distance_mm, pupil, r_stop
    )
    if not aim.converged[0, 0, 0]:
        raise FieldUnreachableError(
            f"chief-ray aiming did not converge for field {field_deg} deg "
            f"(residual {aim.residual[0, 0, 0]:.3e} mm)"
        )
    origin, direction = launch_aimed(systems, aim, [field_deg], object_distance_mm)
    return RayBundle(
        origins=origin[0, 0],
        directions=direction[0, 0],
        wavelength_nm=wavelength_nm,
        valid=aim.converged[0, 0],
        pupil=pupil,
    )


def trace_system(lens: LensSystem, rays: RayBundle | list[Ray]) -> TraceResult:
    """Trace aimed rays to the image plane, honoring assigned semi-diameters."""
    if isinstance(rays, RayBundle):
        origins = rays.origins[None, ...]
        directions = rays.directions[None, ...]
        valid_in = rays.valid
        wavelength = rays.wavelength_nm
    else:
        origins = np.stack([r.origin for r in rays])[None, ...]
        directions = np.stack([r.direction for r in rays])[None, ...]
        valid_in = np.array([r.valid for r in rays])
        wavelength = rays[0].wavelength_nm if rays else D_LINE_NM
    systems = systems_from_lens(lens)
    origins = np.where(valid_in[None, :, None], origins, np.nan)
    res = trace_batch(
        systems,
        wavelength,
        origins,
        directions,
        collect_heights="full",
        use_apertures=systems.semi_diameters is not None,
    )
    valid = res.valid[0] & valid_in
    hits = res.position[0, :, :2]
    chief = hits[0] if valid[0] else None
    return TraceResult(
        image_hits=hits,
        valid=valid,
        chief_hit=chief,
        surface_heights=res.heights[0],
    )


def paraxial_analysis(
    lens: LensSystem,
    object_distance_mm: float = INFINITE_OBJECT_MM,
    max_field_deg: float | None = None,
) -> ParaxialSummary:
    """First-order summary: EFL/BFL from the y-nu trace, TTL by summation,
    and (when a field is given) real-chief image height and distortion at the
    d line."""
    systems = systems_from_lens(lens)
    first = paraxial_first_order(systems)
    if not first["ok"][0]:
        raise DegeneratePowerError("system has zero paraxial power")
    basis = first["basis"]
    marginal_heights = basis["y_surf"][0, 0, :].copy()

    image_height = None
    distortion = None
    chief_heights = None
    if max_field_deg is not None and max_field_deg > 0:
        field_rad = math.radians(max_field_deg)
        _, _, x_par, ok = paraxial_chief(
            systems, D_LINE_NM, field_rad, object_distance_mm, basis
        )
        if not ok[0] or abs(float(x_par[0])) < 1e-12:
            raise DegeneratePowerError("paraxial chief ray undefined for this field")
        bundle = aim_rays(lens, max_field_deg, D_LINE_NM, object_distance_mm, rings=1)
        traced = trace_system(lens, bundle)
        if traced.chief_hit is None:
            raise FieldUnreachableError("chief ray did not reach the image plane")
        x_real = float(traced.chief_hit[0])
        image_height = abs(x_real)
        distortion = 100.0 * (x_real - float(x_par[0])) / float(x_par[0])
        chief_heights = traced.surface_heights[0].copy()

    return ParaxialSummary(
        efl=float(first["efl"][0]),
        bfl=float(first["bfl"][0]),
        ttl=float(first["ttl"][0]),
        image_height=image_height,
        distortion_percent=distortion,
        marginal_heights=marginal_heights,
        chief_heights=chief_heights,
    )


def sphere_sag(curvature: float, r) -> np.ndarray:
    """Axial sag of a spherical surface at radial height(s) r."""
    r2 = np.asarray(r, dtype=float) ** 2
    arg = np.maximum(1.0 - curvature**2 * r2, 0.0)
    return curvature * r2 / (1.0 + np.sqrt(arg))


def auto_semi_diameters(
    lens: LensSystem,
    fields_deg,
    object_distances_mm=(INFINITE_OBJECT_MM,),
    wavelengths_nm=(D_LINE_NM,),
    rings: int = 6,
) -> LensSystem:
    """Assign clear semi-diameters from traced ray clearances: the maximum
    ray height per surface over all sampled bundles with a small margin, the
    stop at exactly its aperture radius. The result passes every aimed ray
    (no vignetting)."""
    systems = systems_from_lens(lens)
    systems.semi_diameters = None
    r_stop, ok = marginal_stop_radius(systems)
    if not ok[0]:
        raise FieldUnreachableError("marginal ray cannot define the stop aperture")
    pupil = hexapolar_grid(rings)
    max_h = np.zeros(systems.num_surfaces)
    for dist in object_distances_mm:
        for wl in wavelengths_nm:
            aim = aim_batch(systems, wl, fields_deg, dist, pupil, r_stop)
            origin, direction = launch_from_q(systems, aim.q, fields_deg, dist)
            origin = np.where(aim.converged[..., None], origin, np.nan)
            tr = trace_batch(systems, wl, origin, direction, collect_heights="max")
            max_h = np.maximum(max_h, tr.max_heights[0])
    semi = SEMI_DIAMETER_MARGIN * max_h
    semi[systems.stop_index] = r_stop[0]
    return lens.with_semi_diameters(semi)
