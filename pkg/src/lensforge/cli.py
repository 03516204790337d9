"""Command-line interface.

Subcommands: ``search`` (global design search), ``evaluate`` (loss and
constraint report for a lens), ``psf`` (PSF grids as portable float maps),
``render`` (aberrated image simulation), ``optimize`` (joint refinement and
catalog-glass quantization), ``plot`` (SVG cross-section and spot diagrams).

Every command that writes files also writes a run manifest listing inputs
and outputs with SHA-256 checksums; timestamps live only in the manifest, so
repeated runs with the same seed produce byte-identical artifacts.

Exit codes: 0 success, 1 validation/usage error, 2 infeasible-design result.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from lensforge import __version__
from lensforge.imaging import (
    build_patch_kernels,
    build_patch_layout,
    build_psf_grid,
    degrade,
)
from lensforge.imgio import ImageIOError, read_png, write_png, write_pfm
from lensforge.isp import SensorModel
from lensforge.joint import (
    AdjointPipeline,
    JointConfig,
    JointOptimizationError,
    ReconstructionOperator,
    joint_optimize,
    quantize_glass,
)
from lensforge.lens import (
    INFINITE_OBJECT_MM,
    LensModelError,
    ParamVector,
    default_catalog,
    denormalize,
    load_catalog,
    load_lens,
    load_spec,
    normalize,
    save_lens,
)
from lensforge.merit import evaluate_lens
from lensforge.plotting import cross_section_svg, spot_diagram_svg
from lensforge.raytrace import (
    DegeneratePowerError,
    FieldUnreachableError,
    RayTraceError,
    auto_semi_diameters,
    paraxial_analysis,
)
from lensforge.search import run_search

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INFEASIBLE = 2


def _fmt(x) -> str:
    """Fixed-precision scientific notation for diff-stable numeric output."""
    return f"{float(x):.9e}"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run record: inputs, outputs (checksummed), stages, timing."""

    def __init__(self, command: str, seed=None):
        self.data = {
            "tool": "lensforge",
            "version": __version__,
            "command": command,
            "seed": seed,
            "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "inputs": [],
            "outputs": [],
            "stages": [],
        }
        self._t0 = time.perf_counter()

    def add_input(self, path):
        p = Path(path)
        self.data["inputs"].append({"path": str(p), "sha256": _sha256(p)})

    def add_output(self, path):
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"declared output {p} does not exist")
        self.data["outputs"].append({"path": str(p), "sha256": _sha256(p)})

    def add_stage(self, name: str, **info):
        self.data["stages"].append({"name": name, **info})

    def write(self, path):
        self.data["duration_s"] = time.perf_counter() - self._t0
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_images_dir(directory: Path, sensor: SensorModel) -> list[np.ndarray]:
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ImageIOError(f"no PNG images found in {directory}")
    out = []
    for p in paths:
        img, _ = read_png(p)
        h, w = img.shape[:2]
        if h < sensor.height or w < sensor.width:
            raise ImageIOError(
                f"{p.name} is {w}x{h}, smaller than the sensor "
                f"{sensor.width}x{sensor.height}"
            )
        top = (h - sensor.height) // 2
        left = (w - sensor.width) // 2
        out.append(img[top:top + sensor.height, left:left + sensor.width])
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    lens = load_lens(args.lens)
    spec = load_spec(args.spec)
    breakdown, report, res = evaluate_lens(lens, spec, rings=args.rings)
    summary = paraxial_analysis(
        lens, spec.working_distances[0], max_field_deg=spec.hfov_deg
    )
    out = {
        "losses_mm": {
            "spot": _fmt(breakdown.spot_mm),
            "lateral_color": _fmt(breakdown.lateral_color_mm),
            "constraint": _fmt(breakdown.constraint_mm),
            "total": _fmt(breakdown.total_mm),
            "feasible": breakdown.feasible,
            "per_distance": [
                {
                    "distance_mm": _fmt(d.distance_mm),
                    "spot": _fmt(d.spot_mm),
                    "lateral_color": _fmt(d.lateral_color_mm),
                    "constraint": _fmt(d.constraint_mm),
                    "total": _fmt(d.total_mm),
                }
                for d in breakdown.per_distance
            ],
        },
        "first_order": {
            "efl_mm": _fmt(summary.efl),
            "bfl_mm": _fmt(summary.bfl),
            "ttl_mm": _fmt(summary.ttl),
            "image_height_mm": _fmt(summary.image_height)
            if summary.image_height is not None else None,
            "distortion_percent": _fmt(summary.distortion_percent)
            if summary.distortion_percent is not None else None,
        },
        "constraints": [
            {
                "quantity": item.quantity,
                "value": _fmt(item.value),
                "min": _fmt(item.minimum) if math.isfinite(item.minimum) else "-inf",
                "max": _fmt(item.maximum) if math.isfinite(item.maximum) else "inf",
                "violation": _fmt(item.violation),
                "penalty": _fmt(item.penalty),
            }
            for item in report.items
        ],
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_search(args) -> int:
    spec = load_spec(args.spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("search", seed=args.seed)
    manifest.add_input(args.spec)
    results = run_search(
        spec, args.seed, jobs=args.jobs,
        population=args.m, generations=args.generations,
    )
    total = 0
    for res in results:
        for g in res.generations:
            manifest.add_stage(
                f"{res.design_form}/generation-{g.index}",
                population=g.population,
                sa_iterations=g.sa_iterations,
                sa_mean_best=g.sa_mean_best,
                parent_count=g.parent_count,
                adam_iterations=g.adam_iterations,
                elite_losses=g.elite_losses,
                mutation_skipped=g.mutation_skipped,
                duration_s=g.duration_s,
            )
        for k, cand in enumerate(res.designs):
            path = out_dir / f"lens_{res.design_form}_{k:02d}.json"
            save_lens(cand.lens, path)
            manifest.add_output(path)
            total += 1
        if res.message:
            manifest.add_stage(f"{res.design_form}/result", message=res.message)
    manifest.data["designs_found"] = total
    manifest.write(out_dir / "manifest.json")
    if total == 0:
        msgs = "; ".join(r.message for r in results if r.message)
        print(f"no feasible design: {msgs}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(f"{total} design(s) written to {out_dir}")
    return EXIT_OK


def _render_fields(lens, sensor: SensorModel, spec, count: int) -> np.ndarray:
    """Field samples for imaging: uniform up to the spec HFOV, or up to the
    field that images onto the sensor's corner when no spec is given."""
    if spec is not None:
        return np.linspace(0.0, spec.hfov_deg, count)
    summary = paraxial_analysis(lens)
    dx, dy = sensor.pitch_mm
    r_max = math.hypot(sensor.width * dx, sensor.height * dy) / 2.0
    return np.linspace(0.0, math.degrees(math.atan2(r_max, summary.efl)), count)


def cmd_psf(args) -> int:
    lens = load_lens(args.lens)
    spec = load_spec(args.spec) if args.spec else None
    sensor = SensorModel.from_dict(json.load(open(args.sensor))) if args.sensor else SensorModel()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("psf")
    manifest.add_input(args.lens)
    if args.spec:
        manifest.add_input(args.spec)
    fields = _render_fields(lens, sensor, spec, args.fields)
    grid = build_psf_grid(lens, fields, args.depth, sensor, args.size, args.rings)
    names = "RGB"
    records = []
    dx, dy = sensor.pitch_mm
    c = grid.size // 2
    px = (np.arange(grid.size) - c) * dx
    py = (np.arange(grid.size) - c) * dy
    xx, yy = np.meshgrid(px, py)
    for fi, field in enumerate(fields):
        for ci in range(3):
            path = out_dir / f"psf_f{fi:02d}_{names[ci]}.pfm"
            write_pfm(path, grid.psfs[fi, ci])
            manifest.add_output(path)
            rms = float(np.sqrt((grid.psfs[fi, ci] * (xx**2 + yy**2)).sum()))
            records.append(
                {
                    "field_deg": float(field),
                    "channel": names[ci],
                    "file": path.name,
                    "rms_mm": rms,
                    "anchor_mm": [float(v) for v in grid.anchors[fi]],
                    "offset_mm": [float(v) for v in grid.channel_offsets[fi, ci]],
                }
            )
    manifest.data["psfs"] = records
    manifest.write(out_dir / "psf_manifest.json")
    print(f"{len(records)} PSF maps written to {out_dir}")
    return EXIT_OK


def cmd_render(args) -> int:
    lens = load_lens(args.lens)
    spec = load_spec(args.spec) if args.spec else None
    image, depth_bits = read_png(args.image)
    h, w = image.shape[:2]
    if args.sensor:
        sensor = SensorModel.from_dict(json.load(open(args.sensor)))
        if (sensor.height, sensor.width) != (h, w):
            raise LensModelError(
                f"sensor {sensor.width}x{sensor.height} does not match image {w}x{h}"
            )
    else:
        sensor = SensorModel(width=w, height=h)
    if h % args.patch or w % args.patch:
        raise LensModelError(
            f"image {w}x{h} is not divisible into {args.patch}px patches"
        )
    manifest = Manifest("render", seed=args.seed)
    manifest.add_input(args.lens)
    manifest.add_input(args.image)
    fields = _render_fields(lens, sensor, spec, args.fields)
    grid = build_psf_grid(lens, fields, args.depth, sensor, args.size, args.rings)
    layout = build_patch_layout(sensor, grid.field_radii_mm, args.patch)
    kernels = build_patch_kernels(grid, layout)
    rng = np.random.default_rng(args.seed) if args.noise else None
    out_img = degrade(image, kernels, layout, sensor, noise_rng=rng)
    out_path = Path(args.out)
    write_png(out_path, out_img, bit_depth=depth_bits)
    manifest.add_output(out_path)
    manifest.add_stage("render", fields=[float(f) for f in fields], depth_mm=args.depth)
    manifest.write(out_path.with_suffix(".manifest.json"))
    print(f"rendered image written to {out_path}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    lens = load_lens(args.lens)
    spec = load_spec(args.spec)
    catalog = load_catalog(args.catalog) if args.catalog else default_catalog()
    sensor = (
        SensorModel.from_dict(json.load(open(args.sensor)))
        if args.sensor else SensorModel()
    )
    config = JointConfig(
        psf_size=args.size, psf_rings=args.rings, n_fields=args.fields,
        patch_px=args.patch, max_epochs=args.max_epochs, n_optical=args.n_optical,
    )
    recon = ReconstructionOperator(kind=args.recon, epsilon=args.wiener_eps)
    images = _load_images_dir(Path(args.images), sensor)
    n_val = min(8, max(1, len(images) // 9)) if len(images) > 1 else 1
    train = images[:-n_val] if len(images) > n_val else images
    val = images[-n_val:]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("optimize")
    for p in (args.lens, args.spec):
        manifest.add_input(p)
    if args.catalog:
        manifest.add_input(args.catalog)

    schema = spec.schema(lens.design_form or spec.design_forms[0])
    history_steps = []

    def joint_step(x, frozen):
        current = denormalize(ParamVector(x, schema))
        refined, hist = joint_optimize(
            current, spec, config, recon, train, val, sensor, catalog,
            schema, free=~frozen,
        )
        xv = normalize(refined, schema).values
        xv[frozen] = x[frozen]
        history_steps.append([float(v) for v in hist.validation])
        return xv, (min(hist.epoch_best) if hist.epoch_best else float("inf"))

    refined, rounds = quantize_glass(lens, catalog, joint_step, schema)
    refined = auto_semi_diameters(
        refined, np.linspace(0, spec.hfov_deg, config.n_fields),
        spec.working_distances,
    )
    lens_path = out_dir / "lens_refined.json"
    save_lens(refined, lens_path)
    manifest.add_output(lens_path)

    sub_log = {
        "rounds": [
            {
                "element": r.element,
                "glass": r.glass_name,
                "n_d": r.n_d,
                "v_d": r.v_d,
                "distance": r.distance,
                "validation_loss": r.validation_loss,
            }
            for r in rounds
        ],
        "validation_trajectories": history_steps,
    }
    log_path = out_dir / "substitution_log.json"
    with open(log_path, "w") as fh:
        json.dump(sub_log, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output(log_path)

    # Gradient check on the refined lens: composed two-stage gradient against
    # end-to-end central differences, per coordinate.
    pipeline = AdjointPipeline(spec, schema, sensor, recon, val, config, catalog)
    x_ref = normalize(refined, schema).values
    grad, state, _ = pipeline.gradient(x_ref)
    h = config.fd_step
    fd = np.zeros_like(grad)
    for j in range(x_ref.size):
        xp = x_ref.copy()
        xm = x_ref.copy()
        xp[j] = min(x_ref[j] + h, 1.0)
        xm[j] = max(x_ref[j] - h, 0.0)
        if xp[j] == xm[j]:
            continue
        fd[j] = (pipeline.loss(xp) - pipeline.loss(xm)) / (xp[j] - xm[j])
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-6)
    check = {
        "max_relative_error": float(rel.max()),
        "per_coordinate": [
            {"index": int(j), "adjoint": float(grad[j]), "end_to_end": float(fd[j]),
             "relative_error": float(rel[j])}
            for j in range(x_ref.size)
        ],
    }
    check_path = out_dir / "gradient_check.json"
    with open(check_path, "w") as fh:
        json.dump(check, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output(check_path)
    manifest.write(out_dir / "manifest.json")
    print(
        f"refined lens written to {lens_path} "
        f"({len(rounds)} glass substitutions, gradient check "
        f"max rel err {check['max_relative_error']:.2e})"
    )
    return EXIT_OK


def cmd_plot(args) -> int:
    lens = load_lens(args.lens)
    spec = load_spec(args.spec) if args.spec else None
    hfov = spec.hfov_deg if spec else args.hfov
    fields = [0.0] if hfov is None or hfov == 0 else [0.0, 0.7 * hfov, hfov]
    distance = spec.working_distances[0] if spec else INFINITE_OBJECT_MM
    if any(s.semi_diameter is None for s in lens.surfaces):
        lens = auto_semi_diameters(lens, fields, (distance,))
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    layout_path = prefix.with_name(prefix.name + "_layout.svg")
    spots_path = prefix.with_name(prefix.name + "_spots.svg")
    layout_path.write_text(
        cross_section_svg(lens, fields, object_distance_mm=distance)
    )
    spots_path.write_text(
        spot_diagram_svg(lens, fields, object_distance_mm=distance, rings=args.rings)
    )
    print(f"wrote {layout_path} and {spots_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lensforge",
        description="Automatic compound lens design and imaging simulation",
    )
    p.add_argument("--version", action="version", version=f"lensforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="global design search from scratch")
    s.add_argument("--spec", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--m", type=int, default=None, help="population size override")
    s.add_argument("--generations", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("evaluate", help="design loss and constraint report")
    e.add_argument("--lens", required=True)
    e.add_argument("--spec", required=True)
    e.add_argument("--rings", type=int, default=None)
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("psf", help="write per-field per-channel PSFs as PFM")
    f.add_argument("--lens", required=True)
    f.add_argument("--spec", default=None)
    f.add_argument("--sensor", default=None)
    f.add_argument("--depth", type=float, default=INFINITE_OBJECT_MM)
    f.add_argument("--out", required=True)
    f.add_argument("--size", type=int, default=33)
    f.add_argument("--rings", type=int, default=10)
    f.add_argument("--fields", type=int, default=7)
    f.set_defaults(func=cmd_psf)

    r = sub.add_parser("render", help="simulate the aberrated image of a scene")
    r.add_argument("--lens", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--spec", default=None)
    r.add_argument("--sensor", default=None)
    r.add_argument("--depth", type=float, default=INFINITE_OBJECT_MM)
    r.add_argument("--noise", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--size", type=int, default=33)
    r.add_argument("--rings", type=int, default=10)
    r.add_argument("--fields", type=int, default=7)
    r.add_argument("--patch", type=int, default=64)
    r.set_defaults(func=cmd_render)

    o = sub.add_parser("optimize", help="joint refinement and glass quantization")
    o.add_argument("--lens", required=True)
    o.add_argument("--spec", required=True)
    o.add_argument("--catalog", default=None)
    o.add_argument("--images", required=True)
    o.add_argument("--recon", choices=("identity", "wiener"), default="identity")
    o.add_argument("--wiener-eps", type=float, default=1e-3)
    o.add_argument("--out", required=True)
    o.add_argument("--sensor", default=None)
    o.add_argument("--size", type=int, default=17)
    o.add_argument("--rings", type=int, default=6)
    o.add_argument("--fields", type=int, default=5)
    o.add_argument("--patch", type=int, default=32)
    o.add_argument("--max-epochs", type=int, default=10)
    o.add_argument("--n-optical", type=int, default=5)
    o.set_defaults(func=cmd_optimize)

    g = sub.add_parser("plot", help="SVG cross-section and spot diagrams")
    g.add_argument("--lens", required=True)
    g.add_argument("--out", required=True, help="output path prefix")
    g.add_argument("--spec", default=None)
    g.add_argument("--hfov", type=float, default=None)
    g.add_argument("--rings", type=int, default=6)
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LensModelError, ImageIOError, JointOptimizationError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FieldUnreachableError, DegeneratePowerError, RayTraceError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
