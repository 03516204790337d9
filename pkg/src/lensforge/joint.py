"""Desk-scale joint refinement of a designed lens against image quality.

The refinement loss is

    total = constraint' + 100 * image_quality

where constraint' uses squared violations of the same physical quantities as
the design search plus a glass-catalog distance term, and image_quality is
the depth-averaged MSE of reconstructed validation renders against the clean
scene with a depth-consistency term referenced to the middle depth. The
reconstruction step is a fixed, parameter-free operator (identity or
per-patch Wiener deconvolution); the inner reconstruction-training loop is
therefore a no-op and only the lens parameters move.

Gradients are computed in two stages to keep peak memory independent of the
ray-trace footprint: stage 1 evaluates the PSF stack F and its Jacobian
dF/dx by central finite differences, then releases all trace state; stage 2
treats (F, field radii) as the only inputs, differencing the image loss
along Jacobian columns and the constraint loss along coordinates. The
composed product dL/dx = (dL/dF)(dF/dx) never touches ray data.

Glass quantization replaces continuous (n_d, v_d) pairs with their nearest
catalog entries one element per round (most-confident first, i.e. ascending
catalog distance), re-running the joint optimization between substitutions.
"""

from __future__ import annotations

import math
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from lensforge.imaging import (
    DEFAULT_PATCH_PX,
    DEFAULT_PSF_RINGS,
    DEFAULT_PSF_SIZE,
    PatchLayout,
    PSFGrid,
    build_patch_kernels,
    build_patch_layout,
    build_psf_grid,
    degrade_raw,
)
from lensforge.isp import SensorModel, forward_isp, inverse_isp
from lensforge.lens import (
    ROLE_CURVATURE,
    ROLE_N,
    ROLE_SPACING,
    ROLE_V,
    DesignSpec,
    Glass,
    GlassCatalog,
    LensSystem,
    ParamSchema,
    ParamVector,
    denormalize,
    normalize,
)
from lensforge.merit import BatchEvaluator, EvalConfig, glass_variable_loss

DEFAULT_FIELD_COUNT = 7


class JointOptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class JointConfig:
    """Hyperparameters of the joint refinement stage."""

    alpha_iq: float = 100.0
    alpha_depth: float = 0.1
    # Weight of the perceptual term; that term needs a trained feature
    # network and is not computed here, the knob is kept for interface
    # compatibility with configs that carry it.
    alpha_perceptual: float = 0.01
    lr_curvature: float = 0.0002   # physical units per step
    lr_spacing: float = 0.02
    lr_index: float = 0.001
    lr_abbe: float = 0.2
    n_optical: int = 5             # lens steps per epoch
    n_recon: int = 1000            # reconstruction steps per lens step
    fd_step: float = 1e-4          # normalized-space FD step
    max_epochs: int = 20
    psf_size: int = DEFAULT_PSF_SIZE
    psf_rings: int = DEFAULT_PSF_RINGS
    n_fields: int = DEFAULT_FIELD_COUNT
    patch_px: int = DEFAULT_PATCH_PX
    constraint_rings: int = 3

    def __post_init__(self):
        if self.n_optical < 1:
            raise JointOptimizationError("n_optical must be at least 1")

    def learning_rate_for(self, role: str) -> float:
        return {
            ROLE_CURVATURE: self.lr_curvature,
            ROLE_SPACING: self.lr_spacing,
            ROLE_N: self.lr_index,
            ROLE_V: self.lr_abbe,
        }[role]


# ---------------------------------------------------------------------------
# Reconstruction operators (fixed, parameter-free)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconstructionOperator:
    """Deterministic image reconstruction: identity or per-patch Wiener
    deconvolution with the current patch kernels."""

    kind: str = "identity"
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("identity", "wiener"):
            raise JointOptimizationError(f"unknown reconstruction kind {self.kind!r}")

    def apply(self, image_srgb: np.ndarray, kernels: np.ndarray,
              layout: PatchLayout, sensor: SensorModel) -> np.ndarray:
        if self.kind == "identity":
            return image_srgb
        raw = inverse_isp(image_srgb, sensor)
        out = _wiener_patches(raw, kernels, layout, self.epsilon)
        return np.clip(forward_isp(out, sensor), 0.0, 1.0)


def _wiener_patches(raw: np.ndarray, kernels: np.ndarray, layout: PatchLayout,
                    eps: float) -> np.ndarray:
    s = layout.patch_px
    t = kernels.shape[-1]
    k = t // 2
    padded = np.pad(raw, ((k, k), (k, k), (0, 0)), mode="edge")
    out = np.empty_like(raw)
    m = s + 2 * k
    for hi in range(layout.n_h):
        for wi in range(layout.n_w):
            window = padded[hi * s:hi * s + m, wi * s:wi * s + m]
            for c in range(3):
                kc = np.zeros((m, m))
                kc[:t, :t] = kernels[hi, wi, c]
                kc = np.roll(kc, (-k, -k), axis=(0, 1))
                kf = np.fft.rfft2(kc)
                yf = np.fft.rfft2(window[..., c])
                xf = np.conj(kf) * yf / (np.abs(kf) ** 2 + eps)
                rec = np.fft.irfft2(xf, s=(m, m))
                out[hi * s:(hi + 1) * s, wi * s:(wi + 1) * s, c] = rec[k:k + s, k:k + s]
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def image_quality_loss(reconstructed, truth, alpha_depth: float = 0.1) -> float:
    """Depth-averaged MSE against the truth plus a depth-consistency term
    referenced to the middle depth. Requires exactly three depth renders."""
    recs = list(reconstructed)
    if len(recs) != 3:
        raise JointOptimizationError(
            f"depth-structured loss needs exactly 3 renders, got {len(recs)}"
        )
    for r in recs:
        if np.shape(r) != np.shape(truth):
            raise JointOptimizationError("render/truth shape mismatch")
    mid = 1
    total = sum(mse(r, truth) for r in recs) / 3.0
    total += alpha_depth * sum(mse(recs[j], recs[mid]) for j in range(3) if j != mid)
    return total


# ---------------------------------------------------------------------------
# Adjoint pipeline
# ---------------------------------------------------------------------------

@dataclass
class AdjointState:
    """Stage-1 outputs retained for stage 2."""

    psf_values: np.ndarray       # (n_depth, F, 3, t, t)
    field_radii: np.ndarray      # (n_depth, F)
    psf_jacobian: np.ndarray     # (flat size of the above, n_params)
    stage: str = "psf"
    stage2_peak_bytes: int | None = None


class AdjointPipeline:
    """Two-stage gradient evaluation of the joint loss for one design form."""

    def __init__(self, spec: DesignSpec, schema: ParamSchema,
                 sensor: SensorModel, recon: ReconstructionOperator,
                 images: list[np.ndarray], config: JointConfig,
                 catalog: GlassCatalog | None = None):
        if len(spec.working_distances) != 3:
            raise JointOptimizationError(
                "joint refinement uses exactly three working distances"
            )
        self.spec = spec
        self.schema = schema
        self.sensor = sensor
        self.recon = recon
        self.images = [np.asarray(im, dtype=float) for im in images]
        for im in self.images:
            if im.shape[:2] != (sensor.height, sensor.width):
                raise JointOptimizationError("image does not match sensor resolution")
        self.config = config
        self.catalog = catalog
        self.fields = np.linspace(0.0, spec.hfov_deg, config.n_fields)
        self.depths = spec.working_distances
        self.evaluator = BatchEvaluator(
            spec, schema, EvalConfig(rings=config.constraint_rings, grid_mode="mapped")
        )

    # -- stage 1: PSFs and their Jacobian ------------------------------------

    def psf_state(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(psfs (nd, F, 3, t, t), radii (nd, F)) at normalized coords x."""
        lens = denormalize(ParamVector(np.asarray(x, dtype=float), self.schema))
        cfg = self.config
        nd = len(self.depths)
        F = len(self.fields)
        psfs = np.empty((nd, F, 3, cfg.psf_size, cfg.psf_size))
        radii = np.empty((nd, F))
        for di, depth in enumerate(self.depths):
            grid = build_psf_grid(
                lens, self.fields, depth, self.sensor, cfg.psf_size, cfg.psf_rings
            )
            psfs[di] = grid.psfs
            radii[di] = grid.field_radii_mm
        return psfs, radii

    @staticmethod
    def _flatten(psfs: np.ndarray, radii: np.ndarray) -> np.ndarray:
        return np.concatenate([psfs.ravel(), radii.ravel()])

    def _unflatten(self, flat: np.ndarray, shape_psfs, shape_radii):
        n_psf = int(np.prod(shape_psfs))
        return flat[:n_psf].reshape(shape_psfs), flat[n_psf:].reshape(shape_radii)

    def compute_state(self, x: np.ndarray,
                      free: np.ndarray | None = None) -> AdjointState:
        """Stage 1: evaluate F(x) and dF/dx by central finite differences.
        Frozen coordinates get zero Jacobian columns."""
        x = np.asarray(x, dtype=float)
        n = x.size
        free = np.ones(n, dtype=bool) if free is None else free
        h = self.config.fd_step
        psfs, radii = self.psf_state(x)
        flat0 = self._flatten(psfs, radii)
        jac = np.zeros((flat0.size, n))
        for j in range(n):
            if not free[j]:
                continue
            xp = x.copy()
            xm = x.copy()
            xp[j] = min(x[j] + h, 1.0)
            xm[j] = max(x[j] - h, 0.0)
            denom = xp[j] - xm[j]
            if denom <= 0:
                continue
            fp = self._flatten(*self.psf_state(xp))
            fm = self._flatten(*self.psf_state(xm))
            jac[:, j] = (fp - fm) / denom
        return AdjointState(psf_values=psfs, field_radii=radii, psf_jacobian=jac)

    # -- stage 2: image loss on (F, radii) inputs -----------------------------

    def _render_loss(self, psfs: np.ndarray, radii: np.ndarray,
                     images: list[np.ndarray]) -> float:
        """Image-quality loss treating PSFs and radii as plain inputs."""
        cfg = self.config
        total = 0.0
        kernels_by_depth = []
        for di in range(len(self.depths)):
            layout = build_patch_layout(self.sensor, radii[di], cfg.patch_px)
            grid = PSFGrid(
                psfs=psfs[di],
                anchors=np.stack([radii[di], np.zeros_like(radii[di])], axis=1),
                channel_offsets=np.zeros((len(self.fields), 3, 2)),
                field_angles_deg=self.fields,
                size=cfg.psf_size,
                pitch_mm=self.sensor.pitch_mm,
            )
            kernels_by_depth.append((build_patch_kernels(grid, layout), layout))
        for image in images:
            raw = inverse_isp(image, self.sensor)
            renders = []
            for kernels, layout in kernels_by_depth:
                raw_deg = degrade_raw(raw, kernels, layout, self.sensor)
                degraded = np.clip(forward_isp(raw_deg, self.sensor), 0.0, 1.0)
                renders.append(
                    self.recon.apply(degraded, kernels, layout, self.sensor)
                )
            total += image_quality_loss(renders, image, self.config.alpha_depth)
        return total / max(len(images), 1)

    def constraint_loss_batch(self, x: np.ndarray) -> np.ndarray:
        """Quadratic physical-constraint penalty plus the glass-catalog
        distance term, for a batch of coordinate rows."""
        x = np.atleast_2d(x)
        res = self.evaluator.evaluate(x, need_details=True)
        pc = np.zeros(x.shape[0])
        for q in res.quantities:
            pc += self.evaluator.quadratic_penalty(q)
        pc /= len(res.quantities)
        if self.catalog is not None and self.schema.num_elements:
            span = self.schema.hi - self.schema.lo
            phys = self.schema.lo + np.clip(x, 0, 1) * span
            nd = phys[:, self.schema.glass_indices[:, 0]]
            vd = phys[:, self.schema.glass_indices[:, 1]]
            for i in range(x.shape[0]):
                pc[i] += glass_variable_loss(nd[i], vd[i], self.catalog)
        return pc

    def image_loss(self, state: AdjointState,
                   images: list[np.ndarray] | None = None) -> float:
        return self._render_loss(
            state.psf_values, state.field_radii,
            self.images if images is None else images,
        )

    def loss(self, x: np.ndarray, images: list[np.ndarray] | None = None) -> float:
        """Full forward loss (used for validation)."""
        psfs, radii = self.psf_state(x)
        img = self._render_loss(psfs, radii, self.images if images is None else images)
        pc = float(self.constraint_loss_batch(x)[0])
        return pc + self.config.alpha_iq * img

    def gradient(self, x: np.ndarray,
                 free: np.ndarray | None = None) -> tuple[np.ndarray, AdjointState, float]:
        """Composed two-stage gradient of the joint loss at x.

        Stage-2 peak memory is recorded when tracemalloc is active; it scales
        with the PSF stack and one image, never with ray-trace state."""
        x = np.asarray(x, dtype=float)
        n = x.size
        free = np.ones(n, dtype=bool) if free is None else free
        h = self.config.fd_step

        state = self.compute_state(x, free)
        shape_psfs = state.psf_values.shape
        shape_radii = state.field_radii.shape
        flat0 = self._flatten(state.psf_values, state.field_radii)

        tracing = tracemalloc.is_tracing()
        if tracing:
            tracemalloc.reset_peak()
        base_img = self._render_loss(state.psf_values, state.field_radii, self.images)
        grad_img = np.zeros(n)
        for j in range(n):
            col = state.psf_jacobian[:, j]
            if not free[j] or not col.any():
                continue
            fp, rp = self._unflatten(flat0 + h * col, shape_psfs, shape_radii)
            fm, rm = self._unflatten(flat0 - h * col, shape_psfs, shape_radii)
            lp = self._render_loss(fp, rp, self.images)
            lm = self._render_loss(fm, rm, self.images)
            grad_img[j] = (lp - lm) / (2 * h)
        if tracing:
            state.stage2_peak_bytes = tracemalloc.get_traced_memory()[1]

        # Constraint part differenced directly on the coordinates.
        cols = [x]
        col_index = []
        for j in range(n):
            if not free[j]:
                continue
            xp = x.copy()
            xm = x.copy()
            xp[j] = min(x[j] + h, 1.0)
            xm[j] = max(x[j] - h, 0.0)
            cols.extend([xp, xm])
            col_index.append((j, xp[j] - xm[j]))
        pc_vals = self.constraint_loss_batch(np.stack(cols))
        grad_pc = np.zeros(n)
        for k, (j, denom) in enumerate(col_index):
            if denom > 0:
                grad_pc[j] = (pc_vals[1 + 2 * k] - pc_vals[2 + 2 * k]) / denom
        state.stage = "composed"
        loss_val = float(pc_vals[0]) + self.config.alpha_iq * base_img
        return grad_pc + self.config.alpha_iq * grad_img, state, loss_val


# ---------------------------------------------------------------------------
# Joint optimization loop and glass quantization
# ---------------------------------------------------------------------------

@dataclass
class JointHistory:
    validation: list[float] = field(default_factory=list)   # after each lens step
    epoch_best: list[float] = field(default_factory=list)
    epochs: int = 0
    stopped_early: bool = False


def joint_optimize(
    lens: LensSystem,
    spec: DesignSpec,
    config: JointConfig,
    recon: ReconstructionOperator,
    train_images: list[np.ndarray],
    val_images: list[np.ndarray],
    sensor: SensorModel,
    catalog: GlassCatalog | None = None,
    schema: ParamSchema | None = None,
    free: np.ndarray | None = None,
) -> tuple[LensSystem, JointHistory]:
    """Epochs of lens-parameter ADAM steps with per-class learning rates;
    the best-of-epoch configuration (by validation loss) is kept, and the
    loop stops once an epoch fails to surpass the previous epoch's best.

    The reconstruction operator is parameter-free, so the ``n_recon`` inner
    iterations that would adapt it after every lens step are a no-op."""
    schema = schema or spec.schema(lens.design_form or spec.design_forms[0])
    pipeline = AdjointPipeline(spec, schema, sensor, recon, train_images, config, catalog)
    validator = AdjointPipeline(spec, schema, sensor, recon, val_images, config, catalog)
    x = normalize(lens, schema).values.copy()
    n = x.size
    free = np.ones(n, dtype=bool) if free is None else free.copy()

    lr = np.array([
        config.learning_rate_for(role) for role in schema.roles
    ]) / (schema.hi - schema.lo)   # physical step -> normalized step
    m1 = np.zeros(n)
    m2 = np.zeros(n)
    t = 0
    history = JointHistory()
    best_x = x.copy()
    best_val = validator.loss(x)
    prev_epoch_best = math.inf
    for _epoch in range(config.max_epochs):
        epoch_best = math.inf
        epoch_best_x = None
        for _ in range(config.n_optical):
            grad, _, _ = pipeline.gradient(x, free)
            if not np.all(np.isfinite(grad)):
                raise JointOptimizationError("gradient evaluation diverged")
            t += 1
            m1 = 0.9 * m1 + 0.1 * grad
            m2 = 0.999 * m2 + 0.001 * grad**2
            mh = m1 / (1 - 0.9**t)
            vh = m2 / (1 - 0.999**t)
            step = lr * mh / (np.sqrt(vh) + 1e-8)
            x = np.where(free, np.clip(x - step, 0.0, 1.0), x)
            val = validator.loss(x)
            if not math.isfinite(val):
                raise JointOptimizationError("validation loss diverged")
            history.validation.append(val)
            if val < epoch_best:
                epoch_best = val
                epoch_best_x = x.copy()
            # n_recon reconstruction-adaptation iterations are a no-op for
            # the fixed operators.
        history.epoch_best.append(epoch_best)
        history.epochs += 1
        if epoch_best < best_val:
            best_val = epoch_best
            best_x = epoch_best_x
        if epoch_best >= prev_epoch_best:
            history.stopped_early = True
            break
        prev_epoch_best = epoch_best
    refined = denormalize(ParamVector(best_x, schema))
    return refined, history


@dataclass
class SubstitutionRound:
    element: int
    glass_name: str | None
    n_d: float
    v_d: float
    distance: float
    validation_loss: float


def quantize_glass(
    lens: LensSystem,
    catalog: GlassCatalog,
    joint_step,
    schema: ParamSchema,
) -> tuple[LensSystem, list[SubstitutionRound]]:
    """Step-wise replacement of continuous glass variables by catalog
    entries, in ascending order of the weighted (n, v) distance, re-running
    ``joint_step(x, frozen_mask)`` after the initial continuous pass and
    every substitution. The returned lens carries the exact catalog glasses.

    ``joint_step`` must return (x, validation_loss)."""
    x = normalize(lens, schema).values.copy()
    n = x.size
    frozen = np.zeros(n, dtype=bool)
    x, val = joint_step(x, frozen)
    rounds: list[SubstitutionRound] = []
    fixed_entries: dict[int, Glass] = {}
    p = schema.num_elements
    span = schema.hi - schema.lo
    for _ in range(p):
        # Most confident substitution first: the un-fixed glass closest to a
        # catalog entry under the weighted squared metric.
        best = None
        for e in range(p):
            if e in fixed_entries:
                continue
            n_idx, v_idx = schema.glass_indices[e]
            glass = Glass(
                n_d=float(schema.lo[n_idx] + x[n_idx] * span[n_idx]),
                v_d=float(schema.lo[v_idx] + x[v_idx] * span[v_idx]),
            )
            entry, dist = catalog.nearest(glass)
            if best is None or dist < best[1]:
                best = (e, dist, entry)
        e, dist, entry = best
        n_idx, v_idx = schema.glass_indices[e]
        x[n_idx] = np.clip((entry.n_d - schema.lo[n_idx]) / span[n_idx], 0.0, 1.0)
        x[v_idx] = np.clip((entry.v_d - schema.lo[v_idx]) / span[v_idx], 0.0, 1.0)
        frozen[n_idx] = frozen[v_idx] = True
        fixed_entries[e] = entry
        x, val = joint_step(x, frozen)
        rounds.append(
            SubstitutionRound(
                element=e, glass_name=entry.name, n_d=entry.n_d, v_d=entry.v_d,
                distance=dist, validation_loss=val,
            )
        )
    refined = denormalize(ParamVector(x, schema))
    # Bit-exact catalog glasses on the output (the normalized round trip can
    # be a few ulp off).
    surfaces = list(refined.surfaces)
    fronts: dict[int, int] = {}
    for i, s in enumerate(schema.layout):
        if s.element_after >= 0 and s.element_after not in fronts:
            fronts[s.element_after] = i
    for e, entry in fixed_entries.items():
        for i, lay in enumerate(schema.layout):
            if lay.element_after == e:
                surfaces[i] = replace(surfaces[i], material_after=entry)
    refined = replace(refined, surfaces=tuple(surfaces))
    return refined, rounds
