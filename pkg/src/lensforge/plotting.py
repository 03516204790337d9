"""Static SVG output: lens cross-sections and spot diagrams.

The cross-section is drawn in the meridional (x-z) plane, the plane the
sampled fields live in: surface profiles as polylines, stop edge ticks, and
a traced ray fan per field. Spot diagrams mark every valid traced ray of a
pupil grid relative to the chief ray. SVG elements carry class attributes
("surface", "stop", "ray", "spot") so the files are easy to inspect and
test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lensforge.lens import INFINITE_OBJECT_MM, LensSystem
from lensforge.raytrace import (
    FieldUnreachableError,
    aim_rays,
    refract,
    intersect_surface,
    sphere_sag,
    surface_normal_at,
    trace_system,
)
from lensforge.lens import refractive_index


def _trace_points(lens: LensSystem, ray, vertices) -> list[tuple[float, float]] | None:
    """Per-surface (z, x) points of one ray, ending on the image plane."""
    pts = [(float(ray.origin[2]), float(ray.origin[0]))]
    current = ray
    n_before = 1.0
    for i, surf in enumerate(lens.surfaces):
        current = intersect_surface(current, surf, vertices[i])
        if not current.valid:
            return None
        pts.append((float(current.origin[2]), float(current.origin[0])))
        n_after = refractive_index(surf.material_after, current.wavelength_nm)
        normal = surface_normal_at(surf, current.origin, vertices[i])
        current = refract(current, normal, n_before, n_after)
        if not current.valid:
            return None
        n_before = n_after
    z_img = vertices[-1] + lens.image_distance
    t = (z_img - current.origin[2]) / current.direction[2]
    hit = current.origin + t * current.direction
    pts.append((float(hit[2]), float(hit[0])))
    return pts


@dataclass
class _Canvas:
    lines: list

    def add(self, element: str):
        self.lines.append(element)

    def render(self, width, height, viewbox) -> str:
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="{viewbox}">'
        )
        return "\n".join([head, *self.lines, "</svg>"]) + "\n"


def _polyline(points, cls, color, width=0.05) -> str:
    pts = " ".join(f"{z:.4f},{x:.4f}" for z, x in points)
    return (
        f'<polyline class="{cls}" points="{pts}" fill="none" '
        f'stroke="{color}" stroke-width="{width}"/>'
    )


def cross_section_svg(
    lens: LensSystem,
    fields_deg=(0.0,),
    wavelength_nm: float = 587.6,
    object_distance_mm: float = INFINITE_OBJECT_MM,
    fan_rays: int = 7,
) -> str:
    """Render the layout with a meridional ray fan per field. Untraceable
    fields are skipped (the geometry is still drawn)."""
    vertices = lens.vertex_positions()
    z_img = vertices[-1] + lens.image_distance
    semi = [
        s.semi_diameter if s.semi_diameter is not None else
        0.35 * lens.entrance_pupil_diameter + 2.0
        for s in lens.surfaces
    ]
    canvas = _Canvas(lines=[])

    for i, surf in enumerate(lens.surfaces):
        if surf.is_stop:
            r = semi[i]
            for sign in (1.0, -1.0):
                canvas.add(
                    f'<line class="stop" x1="{vertices[i]:.4f}" '
                    f'y1="{sign * r:.4f}" x2="{vertices[i]:.4f}" '
                    f'y2="{sign * 1.3 * r:.4f}" stroke="#444" stroke-width="0.1"/>'
                )
            continue
        xs = np.linspace(-semi[i], semi[i], 41)
        zs = vertices[i] + sphere_sag(surf.curvature, xs)
        canvas.add(_polyline(list(zip(zs, xs)), "surface", "#1f3d7a", 0.12))

    canvas.add(
        f'<line class="image-plane" x1="{z_img:.4f}" y1="{-1.1 * max(semi):.4f}" '
        f'x2="{z_img:.4f}" y2="{1.1 * max(semi):.4f}" stroke="#999" stroke-width="0.08"/>'
    )

    colors = ["#c0392b", "#27863b", "#2980b9", "#8e44ad"]
    x_extent = 1.2 * max(semi)
    fan = np.linspace(-1.0, 1.0, fan_rays)
    for fi, field in enumerate(fields_deg):
        try:
            full = aim_rays(lens, field, wavelength_nm, object_distance_mm, rings=3)
        except FieldUnreachableError:
            continue
        # Meridional fan: the pupil-grid rays nearest each point on the
        # field axis of the pupil.
        chosen = sorted(
            {
                int(np.argmin(np.linalg.norm(full.pupil - np.array([a, 0.0]), axis=1)))
                for a in fan
            }
        )
        for k in chosen:
            pts = _trace_points(lens, full[k], vertices)
            if pts is None:
                continue
            x_extent = max(x_extent, max(abs(p[1]) for p in pts))
            canvas.add(_polyline(pts, "ray", colors[fi % len(colors)], 0.05))

    z_lo = min(-2.0, float(vertices[0]) - 0.05 * z_img) - 1.0
    z_hi = z_img + 2.0
    vb = f"{z_lo:.2f} {-1.1 * x_extent:.2f} {z_hi - z_lo:.2f} {2.2 * x_extent:.2f}"
    return canvas.render(900, 420, vb)


def spot_diagram_svg(
    lens: LensSystem,
    fields_deg=(0.0,),
    wavelength_nm: float = 587.6,
    object_distance_mm: float = INFINITE_OBJECT_MM,
    rings: int = 6,
) -> str:
    """One panel per field: valid ray hits relative to the chief ray."""
    panels = []
    extent = 1e-6
    for field in fields_deg:
        bundle = aim_rays(lens, field, wavelength_nm, object_distance_mm, rings)
        traced = trace_system(lens, bundle)
        if traced.chief_hit is None:
            panels.append((field, np.zeros((0, 2)), 0.0))
            continue
        pts = traced.image_hits[traced.valid] - traced.chief_hit[None, :]
        rms = float(np.sqrt((pts**2).sum(axis=1).mean())) if len(pts) else 0.0
        panels.append((field, pts, rms))
        if len(pts):
            extent = max(extent, float(np.abs(pts).max()))
    pad = 1.3 * extent
    canvas = _Canvas(lines=[])
    for k, (field, pts, rms) in enumerate(panels):
        cx = k * 2.4 * pad
        canvas.add(
            f'<rect class="panel" x="{cx - pad:.6f}" y="{-pad:.6f}" '
            f'width="{2 * pad:.6f}" height="{2 * pad:.6f}" fill="none" '
            f'stroke="#aaa" stroke-width="{0.01 * pad:.6f}"/>'
        )
        canvas.add(
            f'<text x="{cx - pad:.6f}" y="{-1.05 * pad:.6f}" '
            f'font-size="{0.16 * pad:.6f}">field {field:g} deg, '
            f"rms {rms * 1e3:.1f} um</text>"
        )
        for x, y in pts:
            canvas.add(
                f'<circle class="spot" cx="{cx + x:.6f}" cy="{y:.6f}" '
                f'r="{0.012 * pad:.6f}" fill="#1f3d7a"/>'
            )
    total_w = len(panels) * 2.4 * pad
    vb = f"{-1.2 * pad:.6f} {-1.25 * pad:.6f} {total_w:.6f} {2.6 * pad:.6f}"
    return canvas.render(320 * max(len(panels), 1), 360, vb)
