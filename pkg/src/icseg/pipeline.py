"""Groupwise coregistration and cosegmentation driver.

Every image in the population is registered in turn against all the others,
its incremental deformation is folded into an accumulated field, and once the
population stops moving each subject's segmentation is obtained by pulling all
aligned priors back into its native space and taking a majority vote.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .mrf import (
    SOLVERS,
    MrfProblem,
    build_label_set,
    build_unary,
    energy_terms,
    grid_edges,
)
from .transform import (
    ConfigurationError,
    DenseDeformationField,
    compose,
    densify,
    identity_field,
    identity_grid,
    invert,
    warp_labels,
    warp_probability,
    warp_scalar,
)
from .volume import (
    LabelMap,
    ProbabilityMap,
    ScalarVolume,
    argmax_labels,
    downsample,
    normalize_intensities,
    one_hot,
)

__all__ = [
    "RegistrationConfig",
    "PopulationState",
    "RunReport",
    "IcsResult",
    "register_to_population",
    "ics_run",
    "backproject_and_fuse",
    "majority_vote",
    "pairwise_baseline",
    "oracle_mode",
    "population_energy",
    "effective_pairwise_weight",
]

LABEL_SCALE_DECAY = 0.67
# extra Gaussian smoothing (level voxels) of images entering the unary; counters
# the preference of noisy SAD for fractional shifts, which blur the moving image
UNARY_SMOOTHING = 1.0


@dataclass(frozen=True)
class RegistrationConfig:
    lambda_: float = 5.0
    beta: float = 100.0
    pyramid_levels: int = 3
    grid_spacing_finest: tuple[float, float, float] = (8.0, 8.0, 8.0)
    label_steps: int = 4
    refinement_cycles_per_level: int = 3
    max_outer_iterations: int = 5
    convergence_eps: float = 0.1
    fusion: str = "majority"
    solver: str = "expansion"
    basis: str = "cubic"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        gs = np.broadcast_to(np.asarray(self.grid_spacing_finest, dtype=float), (3,))
        object.__setattr__(self, "grid_spacing_finest", tuple(float(g) for g in gs))
        if self.lambda_ < 0 or self.beta < 0:
            raise ConfigurationError("lambda and beta must be >= 0")
        if self.pyramid_levels < 1:
            raise ConfigurationError("pyramid_levels must be >= 1")
        if self.refinement_cycles_per_level < 1:
            raise ConfigurationError("refinement_cycles_per_level must be >= 1")
        if self.max_outer_iterations < 0:
            raise ConfigurationError("max_outer_iterations must be >= 0")
        if self.convergence_eps <= 0:
            raise ConfigurationError("convergence_eps must be > 0")
        if self.fusion != "majority":
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")
        if self.solver not in SOLVERS:
            raise ConfigurationError(f"unknown solver {self.solver!r}")
        if self.basis not in ("cubic", "linear"):
            raise ConfigurationError(f"unknown basis {self.basis!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["grid_spacing_finest"] = list(self.grid_spacing_finest)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown registration keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PopulationState:
    """Mutable working state of a run.

    ``images[i]`` and ``priors[i]`` are always ``originals[i]`` resampled
    through ``accumulated[i]``.
    """

    originals: list[ScalarVolume]
    original_priors: Optional[list[ProbabilityMap]]
    images: list[ScalarVolume]
    priors: Optional[list[ProbabilityMap]]
    accumulated: list[DenseDeformationField]

    @classmethod
    def start(cls, images, priors=None) -> "PopulationState":
        images = list(images)
        if len(images) < 2:
            raise ConfigurationError("a population needs at least two images")
        dom = images[0].domain
        for im in images:
            dom.check_same(im.domain, "image")
        if priors is not None:
            priors = list(priors)
            if len(priors) != len(images):
                raise ConfigurationError("number of priors does not match number of images")
            for pr in priors:
                dom.check_same(pr.domain, "prior")
            if len({pr.num_classes for pr in priors}) != 1:
                raise ConfigurationError("all priors must have the same number of classes")
        return cls(
            originals=images,
            original_priors=priors,
            images=list(images),
            priors=None if priors is None else list(priors),
            accumulated=[identity_field(dom) for _ in images],
        )

    @property
    def n(self) -> int:
        return len(self.images)

    def apply(self, k: int, update: DenseDeformationField) -> None:
        self.accumulated[k] = compose(self.accumulated[k], update)
        acc = self.accumulated[k]
        self.images[k] = warp_scalar(self.originals[k], acc)
        if self.priors is not None:
            self.priors[k] = warp_probability(self.original_priors[k], acc)


@dataclass
class RunReport:
    config: dict
    solves: list = field(default_factory=list)
    passes: list = field(default_factory=list)
    converged: bool = False
    outer_iterations: int = 0
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "config": self.config,
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "passes": self.passes,
            "solves": self.solves,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    def _tick(self, stage: str, t0: float) -> None:
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0


@dataclass
class IcsResult:
    state: PopulationState
    report: RunReport

    @property
    def fields(self):
        return self.state.accumulated

    @property
    def images(self):
        return self.state.images

    @property
    def priors(self):
        return self.state.priors


def _ingest(images: Sequence[ScalarVolume]) -> list[ScalarVolume]:
    return [normalize_intensities(im) for im in images]


def _level(vol, factor: int):
    small = downsample(vol, factor)
    if UNARY_SMOOTHING > 0 and isinstance(small, ScalarVolume):
        small = ScalarVolume(small.domain, ndimage.gaussian_filter(
            small.data.astype(np.float64), UNARY_SMOOTHING, mode="nearest"))
    return small


def effective_pairwise_weight(config: RegistrationConfig, n: int) -> float:
    """Pairwise weight handed to the solver when registering against ``n - 1`` images.

    Unaries sum one box-mean cost per other image, so the regularizer is scaled
    by ``n - 1`` to keep the balance independent of population size.
    """
    return config.lambda_ * (n - 1)


def register_to_population(k: int, state: PopulationState, config: RegistrationConfig,
                           report: RunReport | None = None, tag: dict | None = None
                           ) -> DenseDeformationField:
    """Estimate the incremental field aligning working image ``k`` to all others.

    Coarse-to-fine over the pyramid; at each level several refinement cycles
    each solve one MRF with a shrinking label set and compose the result into
    the running increment.
    """
    n = state.n
    if not 0 <= k < n:
        raise IndexError(f"target index {k} out of range for {n} images")
    dom = state.images[k].domain
    use_priors = config.beta != 0
    if use_priors and state.priors is None:
        raise ConfigurationError("priors are required when beta != 0")
    solver = SOLVERS[config.solver]
    weight = effective_pairwise_weight(config, n)
    increment = identity_field(dom)
    levels = [2 ** j for j in range(config.pyramid_levels - 1, -1, -1)]

    for factor in levels:
        t0 = time.perf_counter()
        gs = tuple(g * factor for g in config.grid_spacing_finest)
        fixed_img = {i: _level(state.images[i], factor) for i in range(n) if i != k}
        fixed_pr = (
            {i: downsample(state.priors[i], factor) for i in range(n) if i != k}
            if use_priors else None
        )
        grid = identity_grid(dom, gs)
        edges = grid_edges(grid.grid_dims)
        if report is not None:
            report._tick("pyramid", t0)
        for cycle in range(config.refinement_cycles_per_level):
            t0 = time.perf_counter()
            labels = build_label_set(gs, config.label_steps, LABEL_SCALE_DECAY ** cycle)
            moving = _level(warp_scalar(state.images[k], increment), factor)
            imgs = [fixed_img[i] if i != k else moving for i in range(n)]
            if use_priors:
                mov_pr = downsample(warp_probability(state.priors[k], increment), factor)
                prs = [fixed_pr[i] if i != k else mov_pr for i in range(n)]
            else:
                prs = None
            unary = build_unary(k, imgs, prs, grid, labels, config.beta, workers=config.workers)
            if report is not None:
                report._tick("unary", t0)

            t0 = time.perf_counter()
            problem = MrfProblem(unary, edges, labels.labels, weight)
            init = np.zeros(problem.num_nodes, dtype=np.int64)
            lab = solver(problem, init)
            d0, s0 = energy_terms(problem, init)
            d1, s1 = energy_terms(problem, lab)
            if report is not None:
                report._tick("solve", t0)
                report.solves.append({
                    **(tag or {}),
                    "target": int(k),
                    "factor": int(factor),
                    "cycle": int(cycle),
                    "nodes": int(problem.num_nodes),
                    "labels": int(problem.num_labels),
                    "initial_energy": d0 + s0,
                    "final_energy": d1 + s1,
                    "data_term": d1,
                    "smoothness_term": s1,
                })
            if not np.any(lab):
                continue
            t0 = time.perf_counter()
            update = densify(grid.with_displacements(labels.labels[lab]), config.basis)
            increment = compose(increment, update)
            if report is not None:
                report._tick("transform", t0)
    return increment


def _mean_abs(a, b) -> float:
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).mean())


def population_energy(state: PopulationState, config: RegistrationConfig) -> dict:
    """Per-voxel averaged compound energy of the current population.

    Intensity and prior agreement are summed over unordered image pairs; the
    regularity term sums the forward-difference magnitude of every
    accumulated field, weighted by lambda.
    """
    n = state.n
    e_int = e_prior = 0.0
    labels = [argmax_labels(p).data for p in state.priors] if state.priors is not None else None
    for i in range(n):
        for j in range(i + 1, n):
            e_int += _mean_abs(state.images[i].data, state.images[j].data)
            if labels is not None and config.beta != 0:
                e_prior += config.beta * float((labels[i] != labels[j]).mean())
    e_reg = 0.0
    for f in state.accumulated:
        u = f.displacement
        for a in range(3):
            if u.shape[a] > 1:
                e_reg += float(np.sqrt((np.diff(u, axis=a) ** 2).sum(-1)).mean())
    e_reg *= config.lambda_
    return {
        "intensity": e_int,
        "prior": e_prior,
        "regularity": e_reg,
        "total": e_int + e_prior + e_reg,
    }


def ics_run(images: Sequence[ScalarVolume], priors: Sequence[ProbabilityMap] | None,
            config: RegistrationConfig = RegistrationConfig()) -> IcsResult:
    """Iterative coregistration of a population towards consensus.

    Each pass visits every image once in a seeded random order. The run stops
    when the largest incremental displacement of a pass drops below
    ``config.convergence_eps`` voxels or after ``max_outer_iterations`` passes.
    """
    t_start = time.perf_counter()
    state = PopulationState.start(_ingest(images), priors)
    report = RunReport(config=config.to_dict())
    rng = np.random.default_rng(config.seed)
    for it in range(config.max_outer_iterations):
        order = [int(k) for k in rng.permutation(state.n)]
        moves = []
        for k in order:
            update = register_to_population(k, state, config, report, tag={"pass": it})
            moves.append(update.max_voxel_norm())
            t0 = time.perf_counter()
            state.apply(k, update)
            report._tick("warp", t0)
        mean_u = np.mean([f.displacement for f in state.accumulated], axis=0)
        report.passes.append({
            "pass": it,
            "order": order,
            "max_displacement_vox": float(max(moves)),
            "per_image_displacement_vox": [float(m) for m in moves],
            "centroid_drift_mm": float(np.sqrt((mean_u ** 2).sum(-1)).mean()),
            "energy": population_energy(state, config),
        })
        report.outer_iterations = it + 1
        if max(moves) < config.convergence_eps:
            report.converged = True
            break
    report.timings["total"] = time.perf_counter() - t_start
    return IcsResult(state, report)


def majority_vote(maps: Sequence[LabelMap]) -> LabelMap:
    """Most voted class per voxel; ties go to the lowest class index."""
    if not maps:
        raise ValueError("nothing to fuse")
    dom = maps[0].domain
    for m in maps:
        dom.check_same(m.domain, "label map")
    n_classes = max(m.num_classes for m in maps)
    votes = np.zeros(dom.dims + (n_classes,), dtype=np.int32)
    for c in range(n_classes):
        for m in maps:
            votes[..., c] += m.data == c
    return LabelMap(dom, np.argmax(votes, axis=-1))


def backproject_and_fuse(k: int, state: PopulationState | IcsResult) -> LabelMap:
    """Segmentation of subject ``k`` in its native space.

    Every aligned prior (including subject ``k``'s own) is reduced to its
    argmax, pulled back through the inverse of ``k``'s accumulated field and
    fused by majority vote.
    """
    if isinstance(state, IcsResult):
        state = state.state
    if state.priors is None:
        raise ConfigurationError("fusion needs priors")
    inverse = invert(state.accumulated[k])
    maps = [warp_labels(argmax_labels(p), inverse) for p in state.priors]
    return majority_vote(maps)


def pairwise_baseline(target: ScalarVolume, atlases: Sequence[tuple[ScalarVolume, LabelMap]],
                      config: RegistrationConfig = RegistrationConfig()) -> LabelMap:
    """Classic multi-atlas segmentation: register each atlas to the target, vote."""
    if len(atlases) < 1:
        raise ConfigurationError("need at least one atlas")
    cfg = replace(config, beta=0.0)
    warped = []
    for image, labels in atlases:
        state = PopulationState.start(_ingest([target, image]))
        field_ = register_to_population(1, state, cfg)
        warped.append(warp_labels(labels, field_))
    return majority_vote(warped)


def oracle_mode(images: Sequence[ScalarVolume], gt_masks: Sequence[LabelMap | None],
                target_index: int, target_prior: ProbabilityMap,
                config: RegistrationConfig = RegistrationConfig()) -> LabelMap:
    """Cosegmentation with ground-truth priors everywhere except the target."""
    n = len(images)
    if len(gt_masks) != n:
        raise ConfigurationError("one ground-truth entry per image is required")
    if not 0 <= target_index < n:
        raise IndexError("target index out of range")
    for i, gt in enumerate(gt_masks):
        if i != target_index and gt is None:
            raise ConfigurationError(f"ground truth missing for subject {i}")
    n_classes = max(
        [target_prior.num_classes] + [g.num_classes for i, g in enumerate(gt_masks) if i != target_index]
    )
    priors = []
    for i, gt in enumerate(gt_masks):
        if i == target_index:
            pr = target_prior
            if pr.num_classes < n_classes:
                pad = np.zeros(pr.domain.dims + (n_classes - pr.num_classes,), dtype=np.float32)
                pr = ProbabilityMap(pr.domain, np.concatenate([pr.data, pad], axis=-1))
            priors.append(pr)
        else:
            priors.append(one_hot(gt, n_classes))
    result = ics_run(images, priors, config)
    return backproject_and_fuse(target_index, result)
