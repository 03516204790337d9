"""Scalar design losses.

The aggregate design loss (millimeters) for one working distance is

    total = constraint + alpha_iq * (spot + alpha_lc * lateral_color)

averaged over working distances when several are specified. Spot loss is the
average RMS spot radius over sampled fields and wavelengths, measured about
the chief-ray x position of each (field, wavelength) cell (object points are
sampled along +x, so the mean y is zero). Lateral color is the per-field
spread of chief-ray positions over wavelength, averaged over fields.

Physical-quantity constraints enter as one-sided linear penalties; the joint
refinement stage reuses the same machinery with squared violations plus a
glass-catalog distance term.

Configurations that cannot be traced (a field/wavelength cell with no valid
rays, an unreachable stop, or zero paraxial power) receive a large finite
penalty of 1e4 mm plus the invalid-ray fraction so that annealing and
selection always see ordered, comparable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lensforge.lens import (
    D_LINE_NM,
    ConstraintSpec,
    DesignSpec,
    GlassCatalog,
    LensSystem,
    ParamSchema,
    normalize,
)
from lensforge.raytrace import (
    AIM_TOL_MM,
    SEMI_DIAMETER_MARGIN,
    SystemArrays,
    aim_batch,
    expand_chromatic,
    hexapolar_grid,
    launch_from_q,
    marginal_stop_radius,
    paraxial_basis,
    paraxial_chief,
    paraxial_first_order,
    sphere_sag,
    systems_from_lens,
    systems_from_normalized,
    trace_batch,
)

INFEASIBLE_PENALTY_MM = 1e4


class InfeasibleEvaluation(RuntimeError):
    """A loss could not be computed from the traced rays."""


# ---------------------------------------------------------------------------
# Pure loss formulas
# ---------------------------------------------------------------------------

def spot_loss(x, y, valid, chief_x) -> float:
    """Average RMS spot radius over (field, wavelength) cells.

    ``x``, ``y``, ``valid`` have shape (..., R); ``chief_x`` the cell shape
    (...). Radii are measured as sqrt((x - chief_x)^2 + y^2) over valid rays.
    Returns NaN when any cell has no valid ray (infeasible marker).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    chief_x = np.asarray(chief_x, dtype=float)
    counts = valid.sum(axis=-1)
    if np.any(counts == 0) or not np.all(np.isfinite(chief_x)):
        return float("nan")
    dx = np.where(valid, x - chief_x[..., None], 0.0)
    dy = np.where(valid, y, 0.0)
    ssq = (dx**2 + dy**2).sum(axis=-1)
    rms = np.sqrt(ssq / counts)
    return float(rms.mean())


def lateral_chromatic_loss(chief_x) -> float:
    """Mean over fields of the chief-ray x spread across wavelengths.

    ``chief_x`` has shape (n_wavelengths, n_fields). A single wavelength
    gives zero by definition.
    """
    chief_x = np.atleast_2d(np.asarray(chief_x, dtype=float))
    if chief_x.shape[0] == 1:
        return 0.0
    if not np.all(np.isfinite(chief_x)):
        return float("nan")
    spread = chief_x.max(axis=0) - chief_x.min(axis=0)
    return float(spread.mean())


def _violations(values, minimum, maximum):
    v = np.asarray(values, dtype=float)
    return np.maximum(minimum - v, 0.0) + np.maximum(v - maximum, 0.0)


def linear_constraint_loss(values, bounds, weights) -> float:
    """(1/n) sum of weight * [max(lo - q, 0) + max(q - hi, 0)] over quantities."""
    values = list(values)
    if not values:
        raise ValueError("at least one constrained quantity is required")
    total = 0.0
    for q, (lo, hi), w in zip(values, bounds, weights):
        total += w * float(_violations(q, lo, hi))
    return total / len(values)


def quadratic_constraint_loss(values, bounds, weights) -> float:
    """(1/n) sum of weight * violation^2 over quantities."""
    values = list(values)
    if not values:
        raise ValueError("at least one constrained quantity is required")
    total = 0.0
    for q, (lo, hi), w in zip(values, bounds, weights):
        total += w * float(_violations(q, lo, hi)) ** 2
    return total / len(values)


def glass_variable_loss(n_d, v_d, catalog: GlassCatalog) -> float:
    """Mean over elements of the weighted squared distance to the nearest
    catalog glass."""
    n_d = np.atleast_1d(np.asarray(n_d, dtype=float))
    v_d = np.atleast_1d(np.asarray(v_d, dtype=float))
    n_cat = np.array([g.n_d for g in catalog.entries])
    v_cat = np.array([g.v_d for g in catalog.entries])
    d = (
        catalog.alpha_n * (n_d[:, None] - n_cat[None, :]) ** 2
        + catalog.alpha_v * (v_d[:, None] - v_cat[None, :]) ** 2
    )
    return float(d.min(axis=1).mean())


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintItem:
    quantity: str
    value: float            # worst instance when the quantity has several
    minimum: float
    maximum: float
    violation: float
    penalty: float          # weight * violation / n_constraints


@dataclass(frozen=True)
class ConstraintReport:
    items: tuple[ConstraintItem, ...]
    total_mm: float


@dataclass(frozen=True)
class DistanceLosses:
    distance_mm: float
    spot_mm: float
    lateral_color_mm: float
    constraint_mm: float
    total_mm: float


@dataclass(frozen=True)
class LossBreakdown:
    spot_mm: float
    lateral_color_mm: float
    constraint_mm: float
    total_mm: float
    feasible: bool
    per_distance: tuple[DistanceLosses, ...] = ()


# ---------------------------------------------------------------------------
# Batched evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalConfig:
    rings: int = 6
    aim_tol: float = AIM_TOL_MM
    aim_max_iter: int = 20
    # "exact": every pupil-grid ray is aimed at its stop target individually.
    # "mapped": only chief rays are aimed; the grid is filled through the
    # paraxial pupil map plus one traced correction. Much cheaper, accurate
    # to second order in the pupil aberration; used inside the search loop.
    grid_mode: str = "exact"


@dataclass
class WarmState:
    """Aim state reusable across nearby evaluations (same batch layout)."""

    chief: np.ndarray     # (B, n_dist, n_wave, F, 1, 2) chief launch points
    chief_d: np.ndarray   # (B, n_dist, 1, 1, 2) d-line max-field chief
    grid: np.ndarray      # exact: (B, nd, nw, F, R, 2) absolute launch points
                          # mapped: same shape, map-correction offsets


@dataclass
class EvalResult:
    loss: np.ndarray          # (B,) total, penalty-substituted where infeasible
    feasible: np.ndarray      # (B,)
    spot: np.ndarray          # (B,) mean over distances (NaN if infeasible)
    lateral_color: np.ndarray
    constraint: np.ndarray
    warm: WarmState
    semi_diameters: np.ndarray            # (B, S)
    spot_by_distance: np.ndarray          # (B, n_dist)
    lc_by_distance: np.ndarray
    pc_by_distance: np.ndarray
    total_by_distance: np.ndarray
    quantities: list[dict] | None = None  # per-distance quantity arrays


class BatchEvaluator:
    """Evaluates the design loss for batches of systems sharing one form."""

    def __init__(self, spec: DesignSpec, schema: ParamSchema, config: EvalConfig | None = None):
        self.spec = spec
        self.schema = schema
        self.config = config or EvalConfig()
        self.pupil = hexapolar_grid(self.config.rings)
        self.fields = np.asarray(spec.fields_deg, dtype=float)
        self.max_field = float(self.fields.max())
        self._max_field_idx = int(np.argmax(self.fields))
        self.wavelengths = spec.wavelengths_nm
        self.distances = spec.working_distances
        # Distortion and image height use the d-line chief ray. When a
        # sampled wavelength is essentially the d line (Table-style specs use
        # 588 nm), its already-traced chief is reused; otherwise a dedicated
        # chief is aimed at 587.6 nm.
        deltas = [abs(w - D_LINE_NM) for w in self.wavelengths]
        self._dline_wi = int(np.argmin(deltas)) if min(deltas) <= 2.0 else None
        self._dline_nm = (
            self.wavelengths[self._dline_wi] if self._dline_wi is not None else D_LINE_NM
        )
        # Gap classification for edge-thickness constraints (last gap is the
        # image gap and not constrained).
        after = schema.element_after
        self._glass_gaps = np.array(
            [s for s in range(schema.num_surfaces - 1) if after[s] >= 0], dtype=int
        )
        self._air_gaps = np.array(
            [s for s in range(schema.num_surfaces - 1) if after[s] < 0], dtype=int
        )

    # -- public entry points ------------------------------------------------

    def evaluate(self, x: np.ndarray, warm: WarmState | None = None,
                 need_details: bool = False, refresh_pupil_map: bool = True) -> EvalResult:
        systems = systems_from_normalized(self.schema, np.atleast_2d(x))
        return self.evaluate_systems(systems, warm, need_details, refresh_pupil_map)

    def evaluate_systems(self, systems: SystemArrays, warm: WarmState | None = None,
                         need_details: bool = False,
                         refresh_pupil_map: bool = True) -> EvalResult:
        spec = self.spec
        B = systems.batch
        S = systems.num_surfaces
        nd_, nw, F, R = len(self.distances), len(self.wavelengths), len(self.fields), len(self.pupil)

        r_stop, ok_sys = marginal_stop_radius(systems, D_LINE_NM)
        first = paraxial_first_order(systems, D_LINE_NM)
        feasible = ok_sys & first["ok"]

        if warm is not None and warm.grid.shape != (B, nd_, nw, F, R, 2):
            warm = None
        warm_out = WarmState(
            chief=np.full((B, nd_, nw, F, 1, 2), np.nan),
            chief_d=np.full((B, nd_, 1, 1, 2), np.nan),
            grid=np.full((B, nd_, nw, F, R, 2), np.nan),
        )

        max_heights = np.zeros((B, S))
        spot_d = np.zeros((B, nd_))
        lc_d = np.zeros((B, nd_))
        distortion_d = np.zeros((B, nd_))
        imgh_d = np.zeros((B, nd_))
        invalid_rays = np.zeros(B)
        total_rays = 0
        chief_pupil = np.zeros((1, 2))
        # All wavelengths trace together as a wavelength-major expanded batch.
        sysx = expand_chromatic(systems, self.wavelengths)
        r_stop_x = np.tile(r_stop, nw)
        basis_d = (
            first["basis"]
            if self._dline_nm == D_LINE_NM
            else paraxial_basis(systems, self._dline_nm)
        )

        for di, dist in enumerate(self.distances):
            valid, x_i, y_i, hmax = self._trace_distance(
                systems, sysx, dist, r_stop_x, warm, warm_out, di,
                refresh_pupil_map,
            )
            max_heights = np.maximum(max_heights, hmax)
            chief_valid = valid[:, :, :, 0]                      # (B, nw, F)
            chief_x = np.where(chief_valid, x_i[:, :, :, 0], np.nan)
            cell_ok = chief_valid.copy()
            counts = valid.sum(axis=-1)
            cell_ok &= counts > 0
            dx = np.where(valid, x_i - chief_x[..., None], 0.0)
            dy = np.where(valid, y_i, 0.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                rms_cells = np.sqrt(
                    (dx**2 + dy**2).sum(axis=-1) / np.maximum(counts, 1)
                )
            invalid_rays += (~valid).sum(axis=(1, 2, 3))
            total_rays += nw * F * R
            feasible &= cell_ok.all(axis=(1, 2))
            spot_d[:, di] = rms_cells.mean(axis=(1, 2))
            if nw > 1:
                # NaN chief positions (failed cells) propagate; those systems
                # are already marked infeasible.
                lc_d[:, di] = (chief_x.max(axis=1) - chief_x.min(axis=1)).mean(axis=-1)

            # d-line chief at the maximum field: image height and distortion.
            if self.max_field > 0:
                if self._dline_wi is not None:
                    x_real = chief_x[:, self._dline_wi, self._max_field_idx]
                    ok_c = np.isfinite(x_real)
                else:
                    qc = warm.chief_d[:, di] if warm is not None else None
                    aim_c = aim_batch(
                        systems, D_LINE_NM, [self.max_field], dist, chief_pupil,
                        r_stop, q_init=qc, max_iter=self.config.aim_max_iter,
                        tol=self.config.aim_tol,
                    )
                    warm_out.chief_d[:, di] = aim_c.q
                    o_c, d_c = launch_from_q(systems, aim_c.q, [self.max_field], dist)
                    o_c = np.where(aim_c.converged[..., None], o_c, np.nan)
                    tr_c = trace_batch(systems, D_LINE_NM, o_c, d_c, collect_heights="max")
                    max_heights = np.maximum(max_heights, tr_c.max_heights)
                    ok_c = tr_c.valid[:, 0, 0] & aim_c.converged[:, 0, 0]
                    x_real = np.where(ok_c, tr_c.position[:, 0, 0, 0], np.nan)
                _, _, x_par, ok_p = paraxial_chief(
                    systems, self._dline_nm, math.radians(self.max_field), dist,
                    basis_d,
                )
                ok_par = ok_p & (np.abs(x_par) > 1e-9)
                feasible &= ok_c & ok_par
                with np.errstate(invalid="ignore", divide="ignore"):
                    distortion_d[:, di] = 100.0 * (x_real - x_par) / x_par
                imgh_d[:, di] = np.abs(x_real)

        semi = SEMI_DIAMETER_MARGIN * max_heights
        semi[:, systems.stop_index] = np.nan_to_num(r_stop)

        quantities = self._quantities(systems, first, semi, distortion_d, imgh_d)
        pc_d = np.zeros((B, nd_))
        for di in range(nd_):
            pc_d[:, di] = self._penalty(quantities[di], quadratic=False)

        with np.errstate(invalid="ignore"):
            total_d = pc_d + self.spec.search.alpha_iq * (
                spot_d + self.spec.search.alpha_lc * lc_d
            )
            total = total_d.mean(axis=1)
        frac_invalid = invalid_rays / max(total_rays, 1)
        loss = np.where(
            feasible & np.isfinite(total), total, INFEASIBLE_PENALTY_MM + frac_invalid
        )
        return EvalResult(
            loss=loss,
            feasible=feasible & np.isfinite(total),
            spot=spot_d.mean(axis=1),
            lateral_color=lc_d.mean(axis=1),
            constraint=pc_d.mean(axis=1),
            warm=warm_out,
            semi_diameters=semi,
            spot_by_distance=spot_d,
            lc_by_distance=lc_d,
            pc_by_distance=pc_d,
            total_by_distance=total_d,
            quantities=quantities if need_details else None,
        )

    # -- internals ------------------------------------------------------------

    def _warm_view(self, arr, di):
        """(B, nw, F, R, 2) warm slice -> (nw*B, F, R, 2) wavelength-major."""
        return np.ascontiguousarray(arr[:, di].swapaxes(0, 1)).reshape(
            -1, *arr.shape[3:]
        )

    def _trace_distance(self, systems, sysx, dist, r_stop_x, warm, warm_out,
                        di, refresh):
        """Trace the full (wavelength, field, pupil) block for one distance.

        Returns (valid, x, y) shaped (B, nw, F, R) plus max heights (B, S).
        ``sysx`` is the wavelength-expanded batch; the wavelength argument
        passed to the tracer is then irrelevant (indices are baked in).
        """
        B = systems.batch
        nw, F, R = len(self.wavelengths), len(self.fields), len(self.pupil)
        Bx = sysx.batch
        exact = self.config.grid_mode == "exact"

        if exact:
            q0 = self._warm_view(warm.grid, di) if warm is not None else None
            aim = aim_batch(
                sysx, D_LINE_NM, self.fields, dist, self.pupil, r_stop_x,
                q_init=q0, max_iter=self.config.aim_max_iter,
                tol=self.config.aim_tol,
            )
            q_grid = aim.q
            ray_ok = aim.converged
            cell_gate = aim.converged[:, :, 0]    # chief convergence per (copy, field)
            warm_out.grid[:, di] = q_grid.reshape(nw, B, F, R, 2).swapaxes(0, 1)
            warm_out.chief[:, di] = (
                q_grid[:, :, :1].reshape(nw, B, F, 1, 2).swapaxes(0, 1)
            )
        else:
            chief_pupil = np.zeros((1, 2))
            q0 = self._warm_view(warm.chief, di) if warm is not None else None
            aim = aim_batch(
                sysx, D_LINE_NM, self.fields, dist, chief_pupil, r_stop_x,
                q_init=q0, max_iter=self.config.aim_max_iter,
                tol=self.config.aim_tol,
            )
            warm_out.chief[:, di] = aim.q.reshape(nw, B, F, 1, 2).swapaxes(0, 1)
            cell_gate = aim.converged[:, :, 0]

            basis = paraxial_basis(sysx, D_LINE_NM)
            _, j0, _, okj = paraxial_chief(
                sysx, D_LINE_NM, math.radians(self.max_field), dist, basis
            )
            j0 = np.where(okj & (np.abs(j0) > 1e-9), j0, 1.0)[:, None, None, None]
            targets = (
                np.broadcast_to(self.pupil[None, None], (Bx, F, R, 2))
                * np.nan_to_num(r_stop_x)[:, None, None, None]
            )
            base = aim.q + targets / j0
            offset = None
            if warm is not None and not refresh:
                cand = self._warm_view(warm.grid, di)
                if np.isfinite(cand).all():
                    offset = cand
            if offset is None:
                o, d = launch_from_q(sysx, base, self.fields, dist)
                tr0 = trace_batch(
                    sysx, D_LINE_NM, o, d, last_surface=sysx.stop_index
                )
                h0 = tr0.position[..., :2]
                offset = np.where(tr0.valid[..., None], (targets - h0) / j0, 0.0)
            warm_out.grid[:, di] = offset.reshape(nw, B, F, R, 2).swapaxes(0, 1)
            q_grid = base + offset
            q_grid[:, :, 0, :] = aim.q[:, :, 0, :]   # chief stays exact
            ray_ok = np.ones((Bx, F, R), dtype=bool)

        origin, direction = launch_from_q(sysx, q_grid, self.fields, dist)
        origin = np.where((ray_ok & cell_gate[:, :, None])[..., None], origin, np.nan)
        tr = trace_batch(sysx, D_LINE_NM, origin, direction, collect_heights="max")
        valid = tr.valid & ray_ok & cell_gate[:, :, None]
        x_i = tr.position[..., 0].reshape(nw, B, F, R).swapaxes(0, 1)
        y_i = tr.position[..., 1].reshape(nw, B, F, R).swapaxes(0, 1)
        valid = valid.reshape(nw, B, F, R).swapaxes(0, 1)
        hmax = tr.max_heights.reshape(nw, B, -1).max(axis=0)
        return valid, x_i, y_i, hmax

    def _quantities(self, systems, first, semi, distortion_d, imgh_d) -> list[dict]:
        """Per-distance dict of constrained quantity arrays, (B,) or (B, M)."""
        sag = sphere_sag(systems.curvature, np.minimum(
            semi, np.where(np.abs(systems.curvature) > 1e-12,
                           0.9999 / np.maximum(np.abs(systems.curvature), 1e-12),
                           np.inf),
        ))
        edge_all = systems.thickness[:, :-1] - sag[:, :-1] + sag[:, 1:]
        out = []
        for di in range(distortion_d.shape[1]):
            q = {
                "efl": first["efl"],
                "bfl": first["bfl"],
                "ttl": systems.total_track,
                "distortion": distortion_d[:, di],
                "image_height": imgh_d[:, di],
            }
            if self._glass_gaps.size:
                q["glass_edge"] = edge_all[:, self._glass_gaps]
            if self._air_gaps.size:
                q["air_edge"] = edge_all[:, self._air_gaps]
            out.append(q)
        return out

    def _penalty(self, quantities: dict, quadratic: bool) -> np.ndarray:
        cons = self.spec.constraints
        if not cons:
            return np.zeros(next(iter(quantities.values())).shape[0])
        total = 0.0
        for c in cons:
            q = quantities.get(c.quantity)
            if q is None:
                continue
            v = _violations(q, c.minimum, c.maximum)
            if v.ndim > 1:
                v = v.max(axis=1)   # worst instance governs
            total = total + c.weight * (v**2 if quadratic else v)
        return total / len(cons)

    def quadratic_penalty(self, quantities: dict) -> np.ndarray:
        return self._penalty(quantities, quadratic=True)

    def report(self, quantities: dict) -> ConstraintReport:
        """Constraint report for a single-system evaluation (B = 1)."""
        items = []
        total = 0.0
        n = max(len(self.spec.constraints), 1)
        for c in self.spec.constraints:
            q = quantities.get(c.quantity)
            if q is None:
                continue
            v = _violations(q, c.minimum, c.maximum)
            arr = np.atleast_2d(v)[0]
            vals = np.atleast_2d(np.asarray(q, dtype=float))[0]
            worst = int(np.argmax(arr))
            penalty = c.weight * float(arr[worst]) / n
            total += penalty
            items.append(
                ConstraintItem(
                    quantity=c.quantity,
                    value=float(vals[worst]),
                    minimum=c.minimum,
                    maximum=c.maximum,
                    violation=float(arr[worst]),
                    penalty=penalty,
                )
            )
        return ConstraintReport(items=tuple(items), total_mm=total)


def evaluate_lens(
    lens: LensSystem,
    spec: DesignSpec,
    rings: int | None = None,
) -> tuple[LossBreakdown, ConstraintReport, EvalResult]:
    """Full design-loss evaluation of a single lens.

    Semi-diameters are recomputed from traced ray clearances (the lens's own
    values, if any, are not used for the loss)."""
    config = EvalConfig(rings=rings if rings is not None else spec.search.eval_pupil_rings)
    schema = spec.schema(lens.design_form or spec.design_forms[0])
    evaluator = BatchEvaluator(spec, schema, config)
    systems = systems_from_lens(lens)
    systems.semi_diameters = None   # recomputed; no vignetting by construction
    res = evaluator.evaluate_systems(systems, need_details=True)
    per_distance = tuple(
        DistanceLosses(
            distance_mm=d,
            spot_mm=float(res.spot_by_distance[0, di]),
            lateral_color_mm=float(res.lc_by_distance[0, di]),
            constraint_mm=float(res.pc_by_distance[0, di]),
            total_mm=float(res.total_by_distance[0, di]),
        )
        for di, d in enumerate(spec.working_distances)
    )
    breakdown = LossBreakdown(
        spot_mm=float(res.spot[0]),
        lateral_color_mm=float(res.lateral_color[0]),
        constraint_mm=float(res.constraint[0]),
        total_mm=float(res.loss[0]),
        feasible=bool(res.feasible[0]),
        per_distance=per_distance,
    )
    report = evaluator.report({k: v[0:1] for k, v in res.quantities[0].items()})
    return breakdown, report, res
