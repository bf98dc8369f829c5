"""Synthetic populations with known deformations and imperfect priors."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, special

from .transform import DISPLACEMENT_CAP, DenseDeformationField, densify, identity_grid, save_field
from .transform import warp_labels, warp_scalar
from .volume import LabelMap, ProbabilityMap, ScalarVolume, VolumeDomain, one_hot, save_metaimage

__all__ = [
    "PhantomSpec",
    "PRESETS",
    "Subject",
    "generate_base",
    "random_smooth_field",
    "corrupt_prior",
    "make_population",
    "generate_population",
]

BACKGROUND = 0.1
NOISE_SIGMA = 0.03
FIELD_GRID_MM = 12.0
# boundary perturbation: smooth random patches, a fraction dilated and a fraction eroded
PERTURBATION_SIGMA = 2.0
DILATE_FRACTION = 0.3
ERODE_FRACTION = 0.3
# nesting geometry: outer semi-axes relative to the smallest dimension, inner/outer ratio
OUTER_SEMI_AXES = (0.42, 0.378, 0.336)
NESTING_RATIO = 0.62

PRESETS = {
    "weak": dict(boundary_shift_voxels=2, label_flip_rate=0.15, smoothing_sigma_voxels=1.5),
    "strong": dict(boundary_shift_voxels=1, label_flip_rate=0.05, smoothing_sigma_voxels=0.8),
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_structures: int = 3
    num_subjects: int = 4
    deform_max_mm: float = 4.0
    boundary_shift_voxels: int = 0
    label_flip_rate: float = 0.0
    smoothing_sigma_voxels: float = 0.0
    seed: int = 0
    preset: str | None = None

    def __post_init__(self):
        if self.num_structures < 1:
            raise ValueError("num_structures must be >= 1")
        if self.num_subjects < 1:
            raise ValueError("num_subjects must be >= 1")
        if not 0 <= self.label_flip_rate < 0.5:
            raise ValueError("label_flip_rate must be in [0, 0.5)")
        if self.deform_max_mm < 0 or self.boundary_shift_voxels < 0 or self.smoothing_sigma_voxels < 0:
            raise ValueError("deformation and noise parameters must be >= 0")
        if self.deform_max_mm > DISPLACEMENT_CAP * FIELD_GRID_MM:
            warnings.warn(
                f"deform_max_mm={self.deform_max_mm} exceeds {DISPLACEMENT_CAP} x {FIELD_GRID_MM} mm; "
                "generated fields may not be invertible",
                stacklevel=2,
            )

    @classmethod
    def from_preset(cls, name: str, **kw) -> "PhantomSpec":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **kw, "preset": name})

    @property
    def domain(self) -> VolumeDomain:
        return VolumeDomain(self.dims, self.spacing)

    @property
    def num_classes(self) -> int:
        return self.num_structures + 1


def _rng(spec: PhantomSpec, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *stream]))


def _layout(spec: PhantomSpec, rng: np.random.Generator):
    """Nested ellipsoids, each one inside its predecessor with a jittered centre."""
    dims = np.array(spec.dims, dtype=float)
    center = (dims - 1) / 2
    semi = np.array(OUTER_SEMI_AXES) * dims.min()
    out = []
    for _ in range(spec.num_structures):
        out.append((center.copy(), semi.copy()))
        inner = semi * rng.uniform(NESTING_RATIO - 0.05, NESTING_RATIO + 0.05, size=3)
        center = center + rng.uniform(-0.3, 0.3, size=3) * (semi - inner)
        semi = inner
    return out


def _base_clean(spec: PhantomSpec):
    rng = _rng(spec, 0)
    grid = np.indices(spec.dims, dtype=np.float64)
    labels = np.zeros(spec.dims, dtype=np.int16)
    intensity = np.full(spec.dims, BACKGROUND)
    n = spec.num_structures
    levels = [0.6] if n == 1 else list(0.35 + 0.5 * np.arange(n) / (n - 1))
    for j, (center, semi) in enumerate(_layout(spec, rng)):
        r2 = sum(((grid[a] - center[a]) / semi[a]) ** 2 for a in range(3))
        inside = r2 <= 1.0
        labels[inside] = j + 1
        intensity[inside] = levels[j]
    return intensity, labels


def _noisy(spec: PhantomSpec, clean: np.ndarray, rng: np.random.Generator) -> ScalarVolume:
    data = np.clip(clean + rng.normal(0.0, NOISE_SIGMA, size=clean.shape), 0.0, 1.0)
    return ScalarVolume(spec.domain, data)


def generate_base(spec: PhantomSpec) -> tuple[ScalarVolume, LabelMap]:
    """Nested ellipsoidal structures on a uniform background, plus Gaussian noise.

    Structure ``j`` is the shell between ellipsoid ``j`` and ellipsoid ``j + 1``;
    the last one is a solid core.
    """
    intensity, labels = _base_clean(spec)
    return _noisy(spec, intensity, _rng(spec, 1)), LabelMap(spec.domain, labels)


def random_smooth_field(spec: PhantomSpec, subject_seed: int) -> DenseDeformationField:
    """Cubic B-spline field from uniform random control displacements on a 12 mm grid."""
    rng = _rng(spec, 2, subject_seed)
    grid = identity_grid(spec.domain, FIELD_GRID_MM)
    d = rng.uniform(-spec.deform_max_mm, spec.deform_max_mm, size=grid.displacements.shape)
    return densify(grid.with_displacements(d))


def _perturb_mask(mask: np.ndarray, shift: float, rng: np.random.Generator) -> np.ndarray:
    """Dilate some smooth random patches of the boundary by ``shift`` voxels and erode others."""
    z = ndimage.gaussian_filter(rng.normal(size=mask.shape), PERTURBATION_SIGMA, mode="wrap")
    z /= z.std() or 1.0
    delta = np.where(z > special.ndtri(1 - DILATE_FRACTION), shift,
                     np.where(z < special.ndtri(ERODE_FRACTION), -shift, 0.0))
    if not mask.any():
        return mask
    d_out = ndimage.distance_transform_edt(~mask)
    d_in = ndimage.distance_transform_edt(mask)
    return (mask & (d_in > -delta)) | (~mask & (d_out <= delta))


def corrupt_prior(gt: LabelMap, spec: PhantomSpec, rng: np.random.Generator | None = None) -> ProbabilityMap:
    """Turn a ground-truth map into an imperfect likelihood map.

    Boundaries are locally eroded or dilated, a fraction of voxels is flipped
    to a random other class, and every channel is Gaussian-blurred before
    renormalization.
    """
    if rng is None:
        rng = _rng(spec, 3)
    n_classes = max(spec.num_classes, gt.num_classes)
    labels = np.array(gt.data)
    if spec.boundary_shift_voxels > 0:
        out = np.zeros_like(labels)
        for c in range(1, n_classes):
            out[_perturb_mask(labels == c, spec.boundary_shift_voxels, rng)] = c
        labels = out
    if spec.label_flip_rate > 0:
        flip = rng.random(labels.shape) < spec.label_flip_rate
        offset = rng.integers(1, n_classes, size=labels.shape)
        labels = np.where(flip, (labels + offset) % n_classes, labels)
    prob = one_hot(LabelMap(gt.domain, labels), n_classes).data.astype(np.float64)
    if spec.smoothing_sigma_voxels > 0:
        s = spec.smoothing_sigma_voxels
        prob = ndimage.gaussian_filter(prob, sigma=(s, s, s, 0), mode="nearest")
    return ProbabilityMap(gt.domain, prob)


@dataclass
class Subject:
    image: ScalarVolume
    gt: LabelMap
    prior: ProbabilityMap
    field: DenseDeformationField


def make_population(spec: PhantomSpec) -> list[Subject]:
    """In-memory population; subject ``i`` depends only on ``(seed, i)``."""
    intensity, labels = _base_clean(spec)
    base_img = ScalarVolume(spec.domain, intensity)
    base_gt = LabelMap(spec.domain, labels)
    subjects = []
    for i in range(spec.num_subjects):
        f = random_smooth_field(spec, i)
        rng = _rng(spec, 4, i)
        warped = warp_scalar(base_img, f).data.astype(np.float64)
        gt = warp_labels(base_gt, f)
        subjects.append(Subject(_noisy(spec, warped, rng), gt, corrupt_prior(gt, spec, rng), f))
    return subjects


def generate_population(spec: PhantomSpec, out_dir: str | os.PathLike) -> dict:
    """Write a population as MetaImage files plus a JSON manifest; returns the manifest."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, s in enumerate(make_population(spec)):
        names = {
            "image": f"subject{i:02d}_image.mha",
            "gt": f"subject{i:02d}_gt.mha",
            "prior": f"subject{i:02d}_prior.mha",
            "field": f"subject{i:02d}_field.mha",
        }
        save_metaimage(s.image, os.path.join(out_dir, names["image"]))
        save_metaimage(s.gt, os.path.join(out_dir, names["gt"]))
        save_metaimage(s.prior, os.path.join(out_dir, names["prior"]))
        save_field(s.field, os.path.join(out_dir, names["field"]))
        entries.append({"index": i, "seed": [spec.seed, i], **names})
    manifest = {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "preset": spec.preset,
        "subjects": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    manifest["path"] = path
    return manifest
