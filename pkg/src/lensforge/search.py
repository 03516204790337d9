"""Global design search over normalized lens parameters.

One generation, following the fused scheme: anneal the whole population,
select a small diverse parent set by loss, polish parents with ADAM driven
by central finite-difference gradients, keep the best few as elites, mutate
the parents (conserving total track length), and merge mutants with elites
into the next generation's population. Elites of the last generation are the
output, filtered to a loss ceiling and a pairwise diversity floor.

Determinism: every random draw comes from a per-(generation, individual,
phase) counter-derived stream, and batch evaluation is bit-identical under
any worker count, so identical (spec, seed) always reproduce identical
designs.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from lensforge.lens import (
    ROLE_N,
    ROLE_SPACING,
    ROLE_V,
    DesignSpec,
    LensSystem,
    ParamSchema,
    ParamVector,
    denormalize,
)
from lensforge.merit import (
    BatchEvaluator,
    EvalConfig,
    EvalResult,
    LossBreakdown,
    WarmState,
    evaluate_lens,
)

_PHASE_INIT = 0
_PHASE_SA = 1
_PHASE_MUTATE = 2


def round_half_up(x: float) -> int:
    """Round to nearest with .5 going up (population fraction convention)."""
    return int(math.floor(x + 0.5))


def sa_accept_probability(delta_loss: float, temperature: float) -> float:
    """min(exp(-dL/T), 1); nonpositive dL is always accepted."""
    if delta_loss <= 0:
        return 1.0
    if temperature <= 0:
        return 0.0
    return float(min(math.exp(-delta_loss / temperature), 1.0))


def sa_accept(delta_loss: float, temperature: float, rng: np.random.Generator) -> bool:
    """One annealing acceptance decision: draw eps in (0,1), accept if below
    the acceptance probability."""
    return float(rng.uniform()) < sa_accept_probability(delta_loss, temperature)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine-annealed learning rate over ``total`` steps (step is 0-based)."""
    if total <= 1:
        return lr_max
    frac = step / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def select_diverse(x: np.ndarray, loss: np.ndarray, count: int,
                   min_distance: float) -> np.ndarray:
    """Greedy pick by ascending loss, skipping candidates within
    ``min_distance`` (Euclidean, normalized space) of an already-picked one.
    May return fewer than ``count`` indices."""
    order = np.argsort(loss, kind="stable")
    picked: list[int] = []
    for i in order:
        if len(picked) >= count:
            break
        xi = x[i]
        if all(np.linalg.norm(xi - x[j]) > min_distance for j in picked):
            picked.append(int(i))
    return np.array(picked, dtype=int)


@dataclass
class Individual:
    x: np.ndarray
    loss: float
    best_x: np.ndarray
    best_loss: float
    rng_seed: int


@dataclass
class Population:
    x: np.ndarray          # (P, n)
    loss: np.ndarray       # (P,)
    best_x: np.ndarray
    best_loss: np.ndarray
    generation: int = 0

    def __len__(self) -> int:
        return self.x.shape[0]

    def individual(self, i: int) -> Individual:
        return Individual(
            x=self.x[i].copy(),
            loss=float(self.loss[i]),
            best_x=self.best_x[i].copy(),
            best_loss=float(self.best_loss[i]),
            rng_seed=i,
        )


def _stream(seed: int, generation: int, index: int, phase: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(generation, index, phase))
    return np.random.Generator(np.random.PCG64(ss))


def init_population(spec: DesignSpec, m: int, seed: int,
                    schema: ParamSchema | None = None) -> np.ndarray:
    """Random initial coordinates (m, n): curvatures and spacings uniform in
    [0,1]; each normalized index and Abbe coordinate set to exactly 0 or 1
    with equal probability (extreme glasses favor simple systems)."""
    schema = schema or spec.schema()
    n = schema.n
    material = np.array([r in (ROLE_N, ROLE_V) for r in schema.roles])
    x = np.empty((m, n))
    for i in range(m):
        rng = _stream(seed, 0, i, _PHASE_INIT)
        x[i] = rng.uniform(0.0, 1.0, n)
        x[i, material] = rng.integers(0, 2, int(material.sum())).astype(float)
    return x


def mutate_population(x: np.ndarray, schema: ParamSchema, fraction: float,
                      seed: int, generation: int,
                      max_retries: int = 10) -> tuple[np.ndarray, int]:
    """Resample round(fraction * n) coordinates of each row uniformly in
    [0,1], then rescale spacing coordinates so the physical total track
    length is unchanged. Rows whose track length cannot be restored within
    the spacing boxes are retried with a fresh draw and left unchanged after
    ``max_retries`` failures. Returns (mutated, skipped_count)."""
    x = np.atleast_2d(x)
    n = schema.n
    n_mut = round_half_up(fraction * n)
    spacing = np.array([e.role == ROLE_SPACING for e in schema.entries])
    spans = (schema.hi - schema.lo)[spacing]
    out = x.copy()
    skipped = 0
    for i in range(x.shape[0]):
        rng = _stream(seed, generation, i, _PHASE_MUTATE)
        ttl_old = float(np.dot(x[i, spacing], spans))
        done = False
        for _ in range(max_retries):
            idx = rng.choice(n, size=n_mut, replace=False)
            cand = x[i].copy()
            cand[idx] = rng.uniform(0.0, 1.0, n_mut)
            repaired = _restore_track_length(cand, spacing, spans, ttl_old)
            if repaired is not None:
                out[i] = repaired
                done = True
                break
        if not done:
            skipped += 1
    return out, skipped


def _restore_track_length(x: np.ndarray, spacing_mask: np.ndarray,
                          spans: np.ndarray, ttl_target: float) -> np.ndarray | None:
    """Shift spacing coordinates (proportionally to their slack) so the
    summed physical spacings hit ``ttl_target`` exactly; None if the boxes
    do not allow it."""
    s = x[spacing_mask]
    delta = ttl_target - float(np.dot(s, spans))   # mm to add
    if delta == 0.0:
        return x
    if delta > 0:
        slack = (1.0 - s) * spans
    else:
        slack = s * spans
    total = float(slack.sum())
    if total < abs(delta) - 1e-12:
        return None
    w = slack / total
    adjust_mm = delta * w
    out = x.copy()
    out[spacing_mask] = s + adjust_mm / spans
    return out


def _decrease_rate(history: list[float], window: int) -> float:
    """Relative drop of the tracked mean over the trailing window."""
    if len(history) <= window:
        return math.inf
    prev = history[-1 - window]
    cur = history[-1]
    if not math.isfinite(prev) or abs(prev) < 1e-300:
        return 0.0
    return (prev - cur) / abs(prev)


@dataclass
class GenerationStats:
    index: int
    population: int
    sa_iterations: int
    sa_mean_best: float
    parent_count: int
    adam_iterations: int
    elite_losses: list[float]
    mutation_skipped: int
    duration_s: float


@dataclass
class DesignCandidate:
    lens: LensSystem
    x: np.ndarray
    breakdown: LossBreakdown


@dataclass
class SearchResult:
    design_form: str
    seed: int
    designs: list[DesignCandidate]
    generations: list[GenerationStats]
    message: str = ""

    @property
    def feasible(self) -> bool:
        return bool(self.designs)


class DesignSearch:
    """One search run over a single design form."""

    def __init__(self, spec: DesignSpec, design_form: str, seed: int,
                 jobs: int = 1, population: int | None = None,
                 generations: int | None = None):
        self.spec = spec
        self.form = design_form
        self.seed = int(seed)
        self.jobs = max(1, int(jobs))
        cfg = spec.search
        self.m = population if population is not None else cfg.population
        self.generations = generations if generations is not None else cfg.generations
        self.schema = spec.schema(design_form)
        self.cfg = cfg
        self.evaluator = BatchEvaluator(
            spec, self.schema,
            EvalConfig(rings=cfg.pupil_rings, grid_mode="mapped"),
        )
        self.n_parent = max(1, round_half_up(cfg.parent_fraction * self.m))
        self.n_elite = max(1, round_half_up(cfg.elite_fraction * self.m))

    # -- evaluation (optionally chunked over a worker pool) -----------------

    def _evaluate(self, x: np.ndarray, warm: WarmState | None = None,
                  refresh: bool = True) -> EvalResult:
        B = x.shape[0]
        if self.jobs == 1 or B < 2 * self.jobs:
            return self.evaluator.evaluate(x, warm, False, refresh)
        chunks = np.array_split(np.arange(B), self.jobs)
        warms = [
            WarmState(chief=warm.chief[c], chief_d=warm.chief_d[c], grid=warm.grid[c])
            if warm is not None else None
            for c in chunks
        ]
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            futs = [
                pool.submit(self.evaluator.evaluate, x[c], w, False, refresh)
                for c, w in zip(chunks, warms)
            ]
            outs = [f.result() for f in futs]
        return EvalResult(
            loss=np.concatenate([o.loss for o in outs]),
            feasible=np.concatenate([o.feasible for o in outs]),
            spot=np.concatenate([o.spot for o in outs]),
            lateral_color=np.concatenate([o.lateral_color for o in outs]),
            constraint=np.concatenate([o.constraint for o in outs]),
            warm=WarmState(
                chief=np.concatenate([o.warm.chief for o in outs]),
                chief_d=np.concatenate([o.warm.chief_d for o in outs]),
                grid=np.concatenate([o.warm.grid for o in outs]),
            ),
            semi_diameters=np.concatenate([o.semi_diameters for o in outs]),
            spot_by_distance=np.concatenate([o.spot_by_distance for o in outs]),
            lc_by_distance=np.concatenate([o.lc_by_distance for o in outs]),
            pc_by_distance=np.concatenate([o.pc_by_distance for o in outs]),
            total_by_distance=np.concatenate([o.total_by_distance for o in outs]),
        )

    # -- phases ---------------------------------------------------------------

    def _sa_phase(self, x: np.ndarray, generation: int):
        """Anneal every individual; returns (best_x, best_loss, warm, iters)."""
        cfg = self.cfg
        P, n = x.shape
        res = self._evaluate(x)
        loss, warm = res.loss.copy(), res.warm
        x = x.copy()
        best_x, best_loss = x.copy(), loss.copy()
        rngs = [_stream(self.seed, generation, i, _PHASE_SA) for i in range(P)]
        history = [float(best_loss.mean())]
        iters = 0
        for it in range(cfg.sa_max_iterations):
            deltas = np.stack([r.uniform(-0.1, 0.1, n) for r in rngs])
            eps = np.array([r.uniform() for r in rngs])
            x_new = np.clip(x + deltas, 0.0, 1.0)
            res_new = self._evaluate(x_new, warm=warm)
            d_loss = res_new.loss - loss
            temp = cfg.alpha_sa * loss
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                p_acc = np.where(
                    d_loss <= 0, 1.0,
                    np.exp(-d_loss / np.maximum(temp, 1e-300)),
                )
            accept = eps < p_acc
            x[accept] = x_new[accept]
            loss[accept] = res_new.loss[accept]
            warm.chief[accept] = res_new.warm.chief[accept]
            warm.chief_d[accept] = res_new.warm.chief_d[accept]
            warm.grid[accept] = res_new.warm.grid[accept]
            improved = loss < best_loss
            best_x[improved] = x[improved]
            best_loss[improved] = loss[improved]
            history.append(float(best_loss.mean()))
            iters = it + 1
            if _decrease_rate(history, cfg.sa_window) < cfg.sa_threshold:
                break
        return best_x, best_loss, warm, iters

    def _adam_phase(self, x: np.ndarray, warm: WarmState | None):
        """Polish each row with ADAM on central finite-difference gradients.

        One batched evaluation per iteration covers, for every parent, the
        center point plus both FD stencil points of every coordinate."""
        cfg = self.cfg
        P, n = x.shape
        h = cfg.adam_fd_step
        budget = cfg.adam_iterations
        evaluator = BatchEvaluator(
            self.spec, self.schema,
            EvalConfig(rings=cfg.adam_pupil_rings, grid_mode="mapped"),
        )
        x = x.copy()
        m1 = np.zeros_like(x)
        m2 = np.zeros_like(x)
        best_x = x.copy()
        best_loss = np.full(P, np.inf)
        history: list[float] = []
        cols = 2 * n + 1
        warm_fd: WarmState | None = None
        iters = 0
        for t in range(budget):
            stencil = np.repeat(x[:, None, :], cols, axis=1)      # (P, 2n+1, n)
            for j in range(n):
                stencil[:, 1 + j, j] = np.clip(x[:, j] + h, 0.0, 1.0)
                stencil[:, 1 + n + j, j] = np.clip(x[:, j] - h, 0.0, 1.0)
            flat = stencil.reshape(P * cols, n)
            if warm_fd is None:
                base = warm if warm is not None and len(warm.grid) == P else None
                if base is not None:
                    warm_fd = WarmState(
                        chief=np.repeat(base.chief, cols, axis=0),
                        chief_d=np.repeat(base.chief_d, cols, axis=0),
                        grid=np.repeat(base.grid, cols, axis=0),
                    )
            refresh = (t % 10 == 0)
            res = self._evaluate(flat, warm=warm_fd, refresh=refresh)
            warm_fd = res.warm
            losses = res.loss.reshape(P, cols)
            center = losses[:, 0]
            improved = center < best_loss
            best_x[improved] = x[improved]
            best_loss[improved] = center[improved]
            history.append(float(best_loss[np.isfinite(best_loss)].mean()))
            iters = t + 1
            if _decrease_rate(history, cfg.adam_window) < cfg.adam_threshold:
                break
            # Central differences with the actually-applied (clipped) steps.
            hi = np.clip(x + h, 0.0, 1.0)
            lo = np.clip(x - h, 0.0, 1.0)
            denom = np.maximum(hi - lo, 1e-12)
            grad = (losses[:, 1:n + 1] - losses[:, n + 1:]) / denom
            lr = cosine_lr(t, budget, cfg.adam_lr, cfg.adam_lr / 100.0)
            m1 = 0.9 * m1 + 0.1 * grad
            m2 = 0.999 * m2 + 0.001 * grad**2
            mh = m1 / (1.0 - 0.9 ** (t + 1))
            vh = m2 / (1.0 - 0.999 ** (t + 1))
            x = np.clip(x - lr * mh / (np.sqrt(vh) + 1e-8), 0.0, 1.0)
        return best_x, best_loss, iters

    # -- full run ---------------------------------------------------------------

    def run(self) -> SearchResult:
        cfg = self.cfg
        x = init_population(self.spec, self.m, self.seed, self.schema)
        gen_stats: list[GenerationStats] = []
        elites_x = np.zeros((0, self.schema.n))
        elites_loss = np.zeros(0)
        for g in range(1, self.generations + 1):
            t0 = time.perf_counter()
            best_x, best_loss, warm, sa_iters = self._sa_phase(x, g)
            par_idx = select_diverse(
                best_x, best_loss, self.n_parent, cfg.similarity_distance
            )
            parents = best_x[par_idx]
            warm_p = WarmState(
                chief=warm.chief[par_idx],
                chief_d=warm.chief_d[par_idx],
                grid=warm.grid[par_idx],
            )
            px, ploss, adam_iters = self._adam_phase(parents, warm_p)
            eli_idx = select_diverse(px, ploss, self.n_elite, cfg.similarity_distance)
            elites_x, elites_loss = px[eli_idx], ploss[eli_idx]
            skipped = 0
            if g < self.generations:
                mutated, skipped = mutate_population(
                    px, self.schema, cfg.mutation_fraction, self.seed, g
                )
                x = np.vstack([mutated, elites_x])
            gen_stats.append(
                GenerationStats(
                    index=g,
                    population=int(best_x.shape[0]),
                    sa_iterations=sa_iters,
                    sa_mean_best=float(best_loss.mean()),
                    parent_count=int(par_idx.size),
                    adam_iterations=adam_iters,
                    elite_losses=[float(v) for v in elites_loss],
                    mutation_skipped=skipped,
                    duration_s=time.perf_counter() - t0,
                )
            )
        return self._finalize(elites_x, gen_stats)

    def _finalize(self, elites_x: np.ndarray, gen_stats) -> SearchResult:
        """Exact re-evaluation of the elites, loss ceiling, diversity filter."""
        cfg = self.cfg
        candidates: list[tuple[float, np.ndarray, LensSystem, LossBreakdown]] = []
        for row in elites_x:
            lens = denormalize(ParamVector(row, self.schema))
            breakdown, _, res = evaluate_lens(lens, self.spec)
            lens = lens.with_semi_diameters(res.semi_diameters[0])
            candidates.append((breakdown.total_mm, row, lens, breakdown))
        candidates.sort(key=lambda c: c[0])
        kept: list[DesignCandidate] = []
        kept_x: list[np.ndarray] = []
        for total, row, lens, breakdown in candidates:
            if not breakdown.feasible or total >= cfg.output_loss_ceiling:
                continue
            if any(
                np.linalg.norm(row - prev) < cfg.output_diversity_distance
                for prev in kept_x
            ):
                continue
            kept.append(DesignCandidate(lens=lens, x=row, breakdown=breakdown))
            kept_x.append(row)
        message = "" if kept else (
            "no design met the loss ceiling "
            f"{cfg.output_loss_ceiling} mm; best elite loss was "
            f"{candidates[0][0]:.6f} mm" if candidates else "no elites produced"
        )
        return SearchResult(
            design_form=self.form,
            seed=self.seed,
            designs=kept,
            generations=gen_stats,
            message=message,
        )


def run_search(spec: DesignSpec, seed: int, jobs: int = 1,
               population: int | None = None,
               generations: int | None = None) -> list[SearchResult]:
    """Run the search independently for every design form in the spec (the
    per-form seed is derived from the master seed and the form index)."""
    results = []
    for fi, form in enumerate(spec.design_forms):
        search = DesignSearch(
            spec, form, seed + fi, jobs=jobs,
            population=population, generations=generations,
        )
        results.append(search.run())
    return results
