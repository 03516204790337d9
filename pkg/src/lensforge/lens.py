"""Lens system model: glasses, surfaces, design specifications, and the
normalized parameter vector used by the optimizers.

Conventions used throughout the package:

- Lengths are millimeters, wavelengths nanometers, angles degrees at API
  boundaries (radians internally where noted).
- The optical axis is +z. Surface 0 has its vertex at z = 0 and object space
  lies at negative z. Field points are sampled along the +x axis.
- A design form string describes the element sequence, e.g. ``"GAGASAGA"``:
  ``G`` is a glass element (two spherical surfaces), ``A`` an air gap, and
  ``S`` the aperture stop (a flat surface in air). The final ``A`` is the
  air gap from the last surface to the image plane.

Every class here is an immutable value and safe to share between threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

# Fraunhofer line wavelengths (nm) anchoring the dispersion model.
D_LINE_NM = 587.6
F_LINE_NM = 486.1
C_LINE_NM = 656.3

# Object distances at or beyond this are treated as "at infinity". Keeping a
# finite sentinel lets spec files and loss aggregation treat all distances
# uniformly; ray generation switches to exact parallel bundles past it.
INFINITE_OBJECT_MM = 1e10

SCHEMA_VERSION = 1


class LensModelError(ValueError):
    """Malformed lens, schema, or spec input."""


class DispersionError(LensModelError):
    """Glass parameters cannot define a dispersion curve."""


class SchemaError(LensModelError):
    """Parameter vector and lens/schema shapes do not agree."""


# ---------------------------------------------------------------------------
# Glass and dispersion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Glass:
    """Optical glass described by its d-line index and Abbe number.

    The wavelength dependence is the two-coefficient model
    ``n(lambda) = A + B / lambda^2`` with A, B fixed by requiring
    ``n(587.6nm) = n_d`` and ``(n_d - 1)/(n_F - n_C) = v_d`` at the F and C
    lines.
    """

    n_d: float
    v_d: float
    name: str | None = None

    def __post_init__(self):
        if not self.n_d > 1.0:
            raise LensModelError(f"glass index must exceed 1, got {self.n_d}")
        if not self.v_d > 0.0:
            raise DispersionError(f"Abbe number must be positive, got {self.v_d}")


def dispersion_coefficients(n_d: float, v_d: float) -> tuple[float, float]:
    """Solve for (A, B) of n(lambda) = A + B/lambda^2, lambda in micrometers."""
    if v_d == 0:
        raise DispersionError("Abbe number of zero gives a degenerate dispersion fit")
    lam_d = D_LINE_NM * 1e-3
    lam_f = F_LINE_NM * 1e-3
    lam_c = C_LINE_NM * 1e-3
    k = 1.0 / lam_f**2 - 1.0 / lam_c**2
    b = (n_d - 1.0) / (v_d * k)
    a = n_d - b / lam_d**2
    return a, b


def refractive_index(glass: Glass | None, wavelength_nm):
    """Refractive index at the given wavelength(s); air (None) is exactly 1."""
    lam_um = np.asarray(wavelength_nm, dtype=float) * 1e-3
    if np.any(lam_um <= 0):
        raise LensModelError("wavelength must be positive")
    if glass is None:
        return np.ones_like(lam_um) if lam_um.ndim else 1.0
    a, b = dispersion_coefficients(glass.n_d, glass.v_d)
    n = a + b / lam_um**2
    return n if lam_um.ndim else float(n)


# ---------------------------------------------------------------------------
# Surfaces and lens systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Surface:
    """One spherical interface.

    ``thickness_after`` is the axial distance to the next surface vertex. For
    the last surface it is unused (the image gap lives on the LensSystem).
    ``material_after`` is the medium between this surface and the next; None
    means air. ``semi_diameter`` of None means "not assigned yet"; evaluation
    assigns clear apertures from traced ray heights.
    """

    curvature: float
    thickness_after: float
    material_after: Glass | None = None
    semi_diameter: float | None = None
    is_stop: bool = False


@dataclass(frozen=True)
class LensSystem:
    """An ordered stack of spherical surfaces plus the image-plane gap."""

    surfaces: tuple[Surface, ...]
    image_distance: float
    entrance_pupil_diameter: float
    design_form: str = ""

    def __post_init__(self):
        if not self.surfaces:
            raise LensModelError("lens system needs at least one surface")
        stops = [i for i, s in enumerate(self.surfaces) if s.is_stop]
        if len(stops) > 1:
            raise LensModelError(f"at most one stop surface allowed, found {len(stops)}")
        for i, s in enumerate(self.surfaces[:-1]):
            if s.thickness_after <= 0:
                raise LensModelError(f"surface {i} has non-positive spacing {s.thickness_after}")
        for i, s in enumerate(self.surfaces):
            if s.semi_diameter is not None and s.semi_diameter <= 0:
                raise LensModelError(f"surface {i} has non-positive semi-diameter")

    @property
    def stop_index(self) -> int:
        for i, s in enumerate(self.surfaces):
            if s.is_stop:
                return i
        raise LensModelError("lens system has no stop surface")

    @property
    def num_surfaces(self) -> int:
        return len(self.surfaces)

    @property
    def num_elements(self) -> int:
        return sum(1 for s in self.surfaces if s.material_after is not None)

    @property
    def total_track(self) -> float:
        """First surface vertex to image plane, mm."""
        return sum(s.thickness_after for s in self.surfaces[:-1]) + self.image_distance

    def vertex_positions(self) -> np.ndarray:
        z = np.zeros(len(self.surfaces))
        acc = 0.0
        for i, s in enumerate(self.surfaces):
            z[i] = acc
            acc += s.thickness_after if i < len(self.surfaces) - 1 else 0.0
        return z

    def with_semi_diameters(self, semi_diameters: Sequence[float]) -> "LensSystem":
        if len(semi_diameters) != len(self.surfaces):
            raise SchemaError("semi-diameter count does not match surface count")
        surfs = tuple(
            replace(s, semi_diameter=float(sd))
            for s, sd in zip(self.surfaces, semi_diameters)
        )
        return replace(self, surfaces=surfs)


# ---------------------------------------------------------------------------
# Design forms and parameter schemas
# ---------------------------------------------------------------------------

# Roles a single normalized coordinate can play.
ROLE_CURVATURE = "curvature"
ROLE_SPACING = "spacing"
ROLE_N = "n_d"
ROLE_V = "v_d"

# Spacing sub-kinds, used to pick the right physical range.
SPACING_GLASS = "glass"
SPACING_AIR = "air"
SPACING_IMAGE = "image"


@dataclass(frozen=True)
class SchemaEntry:
    role: str
    surface: int          # surface index (curvature/spacing) or element index (n_d/v_d)
    lo: float
    hi: float
    kind: str = ""        # spacing sub-kind, empty otherwise

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise SchemaError(f"range [{self.lo}, {self.hi}] is inverted")


@dataclass(frozen=True)
class ParamRanges:
    """Physical box ranges for each parameter class (all [lo, hi], mm where dimensional)."""

    curvature: tuple[float, float] = (-0.1, 0.1)
    air_spacing: tuple[float, float] = (1.0, 15.0)
    glass_thickness: tuple[float, float] = (4.0, 15.0)
    image_distance: tuple[float, float] = (15.0, 50.0)
    refractive_index: tuple[float, float] = (1.51, 1.76)
    abbe_number: tuple[float, float] = (27.5, 71.3)


@dataclass(frozen=True)
class _SurfaceLayout:
    """Per-surface structural info derived from a design form."""

    is_stop: bool
    element_after: int   # element index of the medium after this surface, -1 = air
    spacing_kind: str    # glass / air / image


def parse_design_form(form: str) -> tuple[_SurfaceLayout, ...]:
    """Expand a design form string into a per-surface layout.

    Supported forms: any sequence of G/A/S with exactly one S, every G and S
    followed by an A, no cemented interfaces (GG), and a trailing A for the
    image gap. The stop is a flat surface inside an air space.
    """
    form = form.strip().upper()
    if not form or any(ch not in "GAS" for ch in form):
        raise LensModelError(f"design form {form!r} must use only G, A, S")
    if form.count("S") != 1:
        raise LensModelError(f"design form {form!r} must contain exactly one stop")
    if form[0] == "A" or form[-1] != "A":
        raise LensModelError(f"design form {form!r} must start with G or S and end with A")
    for bad in ("GG", "AA", "GS", "SG", "SS"):
        if bad in form:
            raise LensModelError(f"design form {form!r} contains unsupported pair {bad!r}")

    layout: list[_SurfaceLayout] = []
    element = 0
    air_positions: list[int] = []  # surface index receiving each A's spacing
    for tok in form:
        if tok == "G":
            layout.append(_SurfaceLayout(False, element, SPACING_GLASS))
            layout.append(_SurfaceLayout(False, -1, SPACING_AIR))
            air_positions.append(len(layout) - 1)
            element += 1
        elif tok == "S":
            layout.append(_SurfaceLayout(True, -1, SPACING_AIR))
            air_positions.append(len(layout) - 1)
        # A tokens are consumed by the surface registered in air_positions
    # The final air gap reaches the image plane.
    last = layout[air_positions[-1]]
    layout[air_positions[-1]] = replace(last, spacing_kind=SPACING_IMAGE)
    return tuple(layout)


@dataclass(frozen=True)
class ParamSchema:
    """Maps between a normalized vector in [0,1]^n and a LensSystem.

    The coordinate layout is: all curvatures in surface order, then all
    spacings in surface order (the last one is the image gap), then
    (n_d, v_d) pairs per element.
    """

    design_form: str
    entries: tuple[SchemaEntry, ...]
    entrance_pupil_diameter: float

    @property
    def n(self) -> int:
        return len(self.entries)

    @cached_property
    def layout(self) -> tuple[_SurfaceLayout, ...]:
        return parse_design_form(self.design_form)

    @property
    def num_surfaces(self) -> int:
        return len(self.layout)

    @cached_property
    def stop_index(self) -> int:
        return next(i for i, s in enumerate(self.layout) if s.is_stop)

    @cached_property
    def num_elements(self) -> int:
        return max((s.element_after for s in self.layout), default=-1) + 1

    @cached_property
    def lo(self) -> np.ndarray:
        return np.array([e.lo for e in self.entries])

    @cached_property
    def hi(self) -> np.ndarray:
        return np.array([e.hi for e in self.entries])

    @cached_property
    def roles(self) -> tuple[str, ...]:
        return tuple(e.role for e in self.entries)

    # Index arrays for vectorized construction of traced systems.
    @cached_property
    def curvature_index(self) -> np.ndarray:
        """Per surface: coordinate index of its curvature, -1 for the stop."""
        idx = np.full(self.num_surfaces, -1, dtype=int)
        for k, e in enumerate(self.entries):
            if e.role == ROLE_CURVATURE:
                idx[e.surface] = k
        return idx

    @cached_property
    def spacing_index(self) -> np.ndarray:
        """Per surface: coordinate index of the gap after it (last = image gap)."""
        idx = np.full(self.num_surfaces, -1, dtype=int)
        for k, e in enumerate(self.entries):
            if e.role == ROLE_SPACING:
                idx[e.surface] = k
        return idx

    @cached_property
    def glass_indices(self) -> np.ndarray:
        """(num_elements, 2) coordinate indices of (n_d, v_d) per element."""
        idx = np.full((self.num_elements, 2), -1, dtype=int)
        for k, e in enumerate(self.entries):
            if e.role == ROLE_N:
                idx[e.surface, 0] = k
            elif e.role == ROLE_V:
                idx[e.surface, 1] = k
        return idx

    @cached_property
    def element_after(self) -> np.ndarray:
        return np.array([s.element_after for s in self.layout], dtype=int)

    @cached_property
    def spacing_kinds(self) -> tuple[str, ...]:
        return tuple(s.spacing_kind for s in self.layout)


def schema_for_form(
    form: str,
    ranges: ParamRanges,
    entrance_pupil_diameter: float,
) -> ParamSchema:
    """Build the parameter schema for a design form with the given box ranges."""
    layout = parse_design_form(form)
    entries: list[SchemaEntry] = []
    for i, surf in enumerate(layout):
        if not surf.is_stop:
            lo, hi = ranges.curvature
            entries.append(SchemaEntry(ROLE_CURVATURE, i, lo, hi))
    for i, surf in enumerate(layout):
        if surf.spacing_kind == SPACING_GLASS:
            lo, hi = ranges.glass_thickness
        elif surf.spacing_kind == SPACING_IMAGE:
            lo, hi = ranges.image_distance
        else:
            lo, hi = ranges.air_spacing
        entries.append(SchemaEntry(ROLE_SPACING, i, lo, hi, kind=surf.spacing_kind))
    n_elements = max((s.element_after for s in layout), default=-1) + 1
    for e in range(n_elements):
        entries.append(SchemaEntry(ROLE_N, e, *ranges.refractive_index))
        entries.append(SchemaEntry(ROLE_V, e, *ranges.abbe_number))
    return ParamSchema(form, tuple(entries), entrance_pupil_diameter)


@dataclass(frozen=True)
class ParamVector:
    """Normalized design variables plus the schema that interprets them."""

    values: np.ndarray
    schema: ParamSchema
    clamped: tuple[int, ...] = ()   # coordinate indices clamped during normalize

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.schema.n,):
            raise SchemaError(
                f"vector length {v.shape} does not match schema ({self.schema.n},)"
            )


def normalize(lens: LensSystem, schema: ParamSchema) -> ParamVector:
    """Map a lens onto [0,1]^n. Out-of-range parameters are clamped and flagged."""
    _check_lens_matches_schema(lens, schema)
    phys = np.empty(schema.n)
    for k, e in enumerate(schema.entries):
        if e.role == ROLE_CURVATURE:
            phys[k] = lens.surfaces[e.surface].curvature
        elif e.role == ROLE_SPACING:
            if e.kind == SPACING_IMAGE:
                phys[k] = lens.image_distance
            else:
                phys[k] = lens.surfaces[e.surface].thickness_after
        else:
            elem_front = _element_front_surfaces(schema)[e.surface]
            glass = lens.surfaces[elem_front].material_after
            phys[k] = glass.n_d if e.role == ROLE_N else glass.v_d
    span = schema.hi - schema.lo
    with np.errstate(invalid="ignore"):
        vals = np.where(span > 0, (phys - schema.lo) / np.where(span > 0, span, 1.0), 0.5)
    clamped = tuple(int(i) for i in np.nonzero((vals < 0) | (vals > 1))[0])
    vals = np.clip(vals, 0.0, 1.0)
    return ParamVector(vals, schema, clamped)


def denormalize(x: ParamVector) -> LensSystem:
    """Exact inverse of :func:`normalize` on in-range systems."""
    schema = x.schema
    vals = np.clip(x.values, 0.0, 1.0)
    phys = schema.lo + vals * (schema.hi - schema.lo)
    return _lens_from_physical(schema, phys)


def _lens_from_physical(schema: ParamSchema, phys: np.ndarray) -> LensSystem:
    fronts = _element_front_surfaces(schema)
    glasses: list[Glass] = []
    for e in range(schema.num_elements):
        n_idx, v_idx = schema.glass_indices[e]
        glasses.append(Glass(n_d=float(phys[n_idx]), v_d=float(phys[v_idx])))
    surfaces: list[Surface] = []
    image_distance = 0.0
    n_surf = schema.num_surfaces
    for i, lay in enumerate(schema.layout):
        c_idx = schema.curvature_index[i]
        curvature = float(phys[c_idx]) if c_idx >= 0 else 0.0
        s_idx = schema.spacing_index[i]
        spacing = float(phys[s_idx])
        if i == n_surf - 1:
            image_distance = spacing
            spacing = 0.0
        mat = glasses[lay.element_after] if lay.element_after >= 0 else None
        surfaces.append(
            Surface(
                curvature=curvature,
                thickness_after=spacing,
                material_after=mat,
                is_stop=lay.is_stop,
            )
        )
    return LensSystem(
        surfaces=tuple(surfaces),
        image_distance=image_distance,
        entrance_pupil_diameter=schema.entrance_pupil_diameter,
        design_form=schema.design_form,
    )


def _element_front_surfaces(schema: ParamSchema) -> dict[int, int]:
    """Element index -> surface index whose material_after is that element."""
    fronts: dict[int, int] = {}
    for i, lay in enumerate(schema.layout):
        if lay.element_after >= 0 and lay.element_after not in fronts:
            fronts[lay.element_after] = i
    return fronts


def _check_lens_matches_schema(lens: LensSystem, schema: ParamSchema) -> None:
    if len(lens.surfaces) != schema.num_surfaces:
        raise SchemaError(
            f"lens has {len(lens.surfaces)} surfaces, schema expects {schema.num_surfaces}"
        )
    for i, (surf, lay) in enumerate(zip(lens.surfaces, schema.layout)):
        if surf.is_stop != lay.is_stop:
            raise SchemaError(f"stop flag mismatch at surface {i}")
        if (surf.material_after is not None) != (lay.element_after >= 0):
            raise SchemaError(f"material mismatch at surface {i}")


# ---------------------------------------------------------------------------
# Glass catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlassCatalog:
    """Named catalog glasses plus the weights of the (n, v) distance metric."""

    entries: tuple[Glass, ...]
    alpha_n: float = 100.0
    alpha_v: float = 0.0004

    def __post_init__(self):
        if not self.entries:
            raise LensModelError("glass catalog must not be empty")

    def distance(self, glass: Glass) -> np.ndarray:
        """Weighted squared distance from ``glass`` to every entry."""
        nd = np.array([g.n_d for g in self.entries])
        vd = np.array([g.v_d for g in self.entries])
        return self.alpha_n * (glass.n_d - nd) ** 2 + self.alpha_v * (glass.v_d - vd) ** 2

    def nearest(self, glass: Glass) -> tuple[Glass, float]:
        d = self.distance(glass)
        i = int(np.argmin(d))
        return self.entries[i], float(d[i])


# Stock crown/flint glasses spanning the usual n_d/v_d map (classic melt data).
_DEFAULT_GLASSES = [
    ("BK7", 1.51680, 64.17),
    ("K5", 1.52249, 59.48),
    ("BAK4", 1.56883, 55.98),
    ("BALF4", 1.57957, 53.71),
    ("SK2", 1.60738, 56.65),
    ("SK16", 1.62041, 60.32),
    ("SSK4", 1.61765, 55.14),
    ("BAF10", 1.67003, 47.20),
    ("LAK9", 1.69100, 54.71),
    ("LAK33", 1.75398, 52.30),
    ("LLF1", 1.54814, 45.75),
    ("LF5", 1.58144, 40.89),
    ("F4", 1.61659, 36.63),
    ("F2", 1.62004, 36.37),
    ("SF2", 1.64769, 33.85),
    ("SF5", 1.67270, 32.21),
    ("SF10", 1.72825, 28.41),
    ("SF4", 1.75520, 27.58),
]


def default_catalog() -> GlassCatalog:
    return GlassCatalog(
        entries=tuple(Glass(n_d=n, v_d=v, name=name) for name, n, v in _DEFAULT_GLASSES)
    )


# ---------------------------------------------------------------------------
# Design specification
# ---------------------------------------------------------------------------

CONSTRAINT_QUANTITIES = (
    "efl",
    "distortion",
    "air_edge",
    "glass_edge",
    "bfl",
    "ttl",
    "image_height",
)

DEFAULT_CONSTRAINT_WEIGHTS = {
    "efl": 0.1,
    "distortion": 1.0,
    "air_edge": 0.1,
    "glass_edge": 0.1,
    "bfl": 0.05,
    "ttl": 0.01,
    "image_height": 1.0,
}

DEFAULT_FIELD_FRACTIONS = (0.0, 0.5, 0.7, 1.0)
DEFAULT_WAVELENGTHS_NM = (486.0, 588.0, 656.0)


@dataclass(frozen=True)
class ConstraintSpec:
    quantity: str
    minimum: float
    maximum: float
    weight: float

    def __post_init__(self):
        if self.quantity not in CONSTRAINT_QUANTITIES:
            raise LensModelError(f"unknown constraint quantity {self.quantity!r}")
        if not self.minimum <= self.maximum:
            raise LensModelError(f"constraint range for {self.quantity} is inverted")
        if self.weight < 0:
            raise LensModelError("constraint weights must be non-negative")


@dataclass(frozen=True)
class SearchSettings:
    """Hyperparameters of the global design search."""

    population: int = 500
    generations: int = 10
    alpha_iq: float = 1.0
    alpha_lc: float = 0.25
    alpha_sa: float = 0.1
    sa_threshold: float = 0.025
    sa_window: int = 20
    sa_max_iterations: int = 2000
    parent_fraction: float = 0.06
    elite_fraction: float = 0.02
    mutation_fraction: float = 0.3
    similarity_distance: float = 0.2
    output_loss_ceiling: float = 0.04
    output_diversity_distance: float = 0.25
    pupil_rings: int = 3        # hexapolar rings inside the annealing loop
    adam_pupil_rings: int = 2   # rings for finite-difference polish steps
    eval_pupil_rings: int = 6   # rings for reported / filtered losses
    adam_lr: float = 0.02
    adam_iterations: int = 300
    adam_fd_step: float = 1e-4
    adam_window: int = 20
    adam_threshold: float = 0.025

    def __post_init__(self):
        if self.population < 1 or self.generations < 1:
            raise LensModelError("population and generations must be at least 1")


@dataclass(frozen=True)
class DesignSpec:
    """Everything a design task needs: target specs, ranges, constraints."""

    hfov_deg: float
    f_number: float
    efl_range: tuple[float, float]
    design_forms: tuple[str, ...]
    working_distances: tuple[float, ...] = (INFINITE_OBJECT_MM,)
    wavelengths_nm: tuple[float, ...] = DEFAULT_WAVELENGTHS_NM
    sampled_fields_deg: tuple[float, ...] | None = None
    ranges: ParamRanges = field(default_factory=ParamRanges)
    constraints: tuple[ConstraintSpec, ...] = ()
    search: SearchSettings = field(default_factory=SearchSettings)

    def __post_init__(self):
        if not self.efl_range[0] <= self.efl_range[1]:
            raise LensModelError("EFL range is inverted")
        if self.f_number <= 0:
            raise LensModelError("f-number must be positive")
        if not self.design_forms:
            raise LensModelError("at least one design form is required")
        for f in self.design_forms:
            parse_design_form(f)
        if not self.working_distances:
            raise LensModelError("at least one working distance is required")

    @property
    def nominal_efl(self) -> float:
        return 0.5 * (self.efl_range[0] + self.efl_range[1])

    @property
    def entrance_pupil_diameter(self) -> float:
        return self.nominal_efl / self.f_number

    @property
    def fields_deg(self) -> tuple[float, ...]:
        if self.sampled_fields_deg is not None:
            return self.sampled_fields_deg
        return tuple(f * self.hfov_deg for f in DEFAULT_FIELD_FRACTIONS)

    def schema(self, form: str | None = None) -> ParamSchema:
        form = form or self.design_forms[0]
        return schema_for_form(form, self.ranges, self.entrance_pupil_diameter)


# ---------------------------------------------------------------------------
# File formats (JSON-compatible structured text)
# ---------------------------------------------------------------------------

def _num(x) -> float:
    if isinstance(x, str):
        if x.lower() in ("inf", "infinity", "+inf"):
            return math.inf
        if x.lower() in ("-inf", "-infinity"):
            return -math.inf
    return float(x)


def _num_out(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def lens_to_dict(lens: LensSystem) -> dict:
    surfaces = []
    for i, s in enumerate(lens.surfaces):
        mat = "air" if s.material_after is None else {
            "n_d": s.material_after.n_d,
            "v_d": s.material_after.v_d,
            **({"name": s.material_after.name} if s.material_after.name else {}),
        }
        entry = {
            "curvature": s.curvature,
            "thickness": s.thickness_after if i < len(lens.surfaces) - 1 else 0.0,
            "material": mat,
            "is_stop": s.is_stop,
        }
        if s.semi_diameter is not None:
            entry["semi_diameter"] = s.semi_diameter
        surfaces.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "design_form": lens.design_form,
        "entrance_pupil_diameter": lens.entrance_pupil_diameter,
        "surfaces": surfaces,
        "image_distance": lens.image_distance,
    }


def lens_from_dict(data: dict) -> LensSystem:
    try:
        raw_surfaces = data["surfaces"]
        surfaces = []
        for i, s in enumerate(raw_surfaces):
            mat = s.get("material", "air")
            if isinstance(mat, str):
                if mat.lower() != "air":
                    raise LensModelError(f"unknown material string {mat!r}")
                glass = None
            else:
                glass = Glass(
                    n_d=float(mat["n_d"]), v_d=float(mat["v_d"]), name=mat.get("name")
                )
            thickness = float(s.get("thickness", 0.0))
            if i == len(raw_surfaces) - 1 and thickness == 0.0:
                thickness = 0.0
            surfaces.append(
                Surface(
                    curvature=float(s["curvature"]),
                    thickness_after=thickness,
                    material_after=glass,
                    semi_diameter=(
                        float(s["semi_diameter"]) if "semi_diameter" in s else None
                    ),
                    is_stop=bool(s.get("is_stop", False)),
                )
            )
        return LensSystem(
            surfaces=tuple(surfaces),
            image_distance=float(data["image_distance"]),
            entrance_pupil_diameter=float(data["entrance_pupil_diameter"]),
            design_form=data.get("design_form", ""),
        )
    except KeyError as exc:
        raise LensModelError(f"lens file missing field {exc.args[0]!r}") from exc


def save_lens(lens: LensSystem, path) -> None:
    with open(path, "w") as fh:
        json.dump(lens_to_dict(lens), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_lens(path) -> LensSystem:
    with open(path) as fh:
        return lens_from_dict(json.load(fh))


def spec_to_dict(spec: DesignSpec) -> dict:
    r = spec.ranges
    s = spec.search
    return {
        "schema_version": SCHEMA_VERSION,
        "hfov_deg": spec.hfov_deg,
        "f_number": spec.f_number,
        "efl_mm": list(spec.efl_range),
        "design_forms": list(spec.design_forms),
        "working_distances_mm": [_num_out(d) for d in spec.working_distances],
        "wavelengths_nm": list(spec.wavelengths_nm),
        **(
            {"sampled_fields_deg": list(spec.sampled_fields_deg)}
            if spec.sampled_fields_deg is not None
            else {}
        ),
        "ranges": {
            "curvature": list(r.curvature),
            "air_spacing": list(r.air_spacing),
            "glass_thickness": list(r.glass_thickness),
            "image_distance": list(r.image_distance),
            "refractive_index": list(r.refractive_index),
            "abbe_number": list(r.abbe_number),
        },
        "constraints": [
            {
                "quantity": c.quantity,
                "min": _num_out(c.minimum),
                "max": _num_out(c.maximum),
                "weight": c.weight,
            }
            for c in spec.constraints
        ],
        "search": {
            "population": s.population,
            "generations": s.generations,
            "alpha_iq": s.alpha_iq,
            "alpha_lc": s.alpha_lc,
            "alpha_sa": s.alpha_sa,
            "sa_threshold": s.sa_threshold,
            "sa_window": s.sa_window,
            "sa_max_iterations": s.sa_max_iterations,
            "parent_fraction": s.parent_fraction,
            "elite_fraction": s.elite_fraction,
            "mutation_fraction": s.mutation_fraction,
            "similarity_distance": s.similarity_distance,
            "output_loss_ceiling": s.output_loss_ceiling,
            "output_diversity_distance": s.output_diversity_distance,
            "pupil_rings": s.pupil_rings,
            "adam_pupil_rings": s.adam_pupil_rings,
            "eval_pupil_rings": s.eval_pupil_rings,
            "adam_lr": s.adam_lr,
            "adam_iterations": s.adam_iterations,
            "adam_fd_step": s.adam_fd_step,
            "adam_window": s.adam_window,
            "adam_threshold": s.adam_threshold,
        },
    }


def spec_from_dict(data: dict) -> DesignSpec:
    try:
        ranges_in = data.get("ranges", {})
        defaults = ParamRanges()

        def rng(key, default):
            v = ranges_in.get(key)
            return tuple(float(x) for x in v) if v is not None else default

        ranges = ParamRanges(
            curvature=rng("curvature", defaults.curvature),
            air_spacing=rng("air_spacing", defaults.air_spacing),
            glass_thickness=rng("glass_thickness", defaults.glass_thickness),
            image_distance=rng("image_distance", defaults.image_distance),
            refractive_index=rng("refractive_index", defaults.refractive_index),
            abbe_number=rng("abbe_number", defaults.abbe_number),
        )
        constraints = tuple(
            ConstraintSpec(
                quantity=c["quantity"],
                minimum=_num(c.get("min", "-inf")),
                maximum=_num(c.get("max", "inf")),
                weight=float(
                    c.get("weight", DEFAULT_CONSTRAINT_WEIGHTS.get(c["quantity"], 1.0))
                ),
            )
            for c in data.get("constraints", [])
        )
        search_in = data.get("search", {})
        known = {f.name for f in SearchSettings.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(search_in) - known
        if unknown:
            raise LensModelError(f"unknown search settings: {sorted(unknown)}")
        search = SearchSettings(**search_in)
        distances = tuple(
            min(_num(d), INFINITE_OBJECT_MM)
            for d in data.get("working_distances_mm", ["inf"])
        )
        fields = data.get("sampled_fields_deg")
        return DesignSpec(
            hfov_deg=float(data["hfov_deg"]),
            f_number=float(data["f_number"]),
            efl_range=tuple(float(x) for x in data["efl_mm"]),
            design_forms=tuple(data["design_forms"]),
            working_distances=distances,
            wavelengths_nm=tuple(
                float(w) for w in data.get("wavelengths_nm", DEFAULT_WAVELENGTHS_NM)
            ),
            sampled_fields_deg=tuple(float(f) for f in fields) if fields else None,
            ranges=ranges,
            constraints=constraints,
            search=search,
        )
    except KeyError as exc:
        raise LensModelError(f"spec file missing field {exc.args[0]!r}") from exc


def save_spec(spec: DesignSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_spec(path) -> DesignSpec:
    with open(path) as fh:
        return spec_from_dict(json.load(fh))


def catalog_to_dict(catalog: GlassCatalog) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "weights": {"alpha_n": catalog.alpha_n, "alpha_v": catalog.alpha_v},
        "glasses": [
            {"name": g.name or f"G{i}", "n_d": g.n_d, "v_d": g.v_d}
            for i, g in enumerate(catalog.entries)
        ],
    }


def catalog_from_dict(data: dict) -> GlassCatalog:
    weights = data.get("weights", {})
    return GlassCatalog(
        entries=tuple(
            Glass(n_d=float(g["n_d"]), v_d=float(g["v_d"]), name=g.get("name"))
            for g in data["glasses"]
        ),
        alpha_n=float(weights.get("alpha_n", 100.0)),
        alpha_v=float(weights.get("alpha_v", 0.0004)),
    )


def save_catalog(catalog: GlassCatalog, path) -> None:
    with open(path, "w") as fh:
        json.dump(catalog_to_dict(catalog), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_catalog(path) -> GlassCatalog:
    with open(path) as fh:
        return catalog_from_dict(json.load(fh))
