"""Free-form deformations: control grids, dense fields, warping, composition, inversion.

Displacements are stored in mm. A dense field maps an output voxel ``x`` to
the sampling location ``x + u(x)`` (backward warping).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import (
    LabelMap,
    ProbabilityMap,
    ScalarVolume,
    VolumeDomain,
    MetaImageError,
    _freeze,
    read_metaimage,
    renormalize,
    write_metaimage,
)

__all__ = [
    "ControlGrid",
    "DenseDeformationField",
    "ConfigurationError",
    "InversionError",
    "identity_grid",
    "identity_field",
    "translation_field",
    "densify",
    "bspline_weights",
    "warp_scalar",
    "warp_probability",
    "warp_labels",
    "compose",
    "invert",
    "save_field",
    "load_field",
    "DISPLACEMENT_CAP",
]

# maximum label displacement as a fraction of control-point spacing
DISPLACEMENT_CAP = 0.4


class ConfigurationError(ValueError):
    pass


class InversionError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ControlGrid:
    """Regular lattice of control-point displacements covering ``domain``.

    Control point ``j`` along an axis sits at ``(j - 1) * grid_spacing`` mm
    from the domain origin, so index 0 is the extra boundary layer needed by
    the cubic basis.
    """

    domain: VolumeDomain
    grid_spacing: tuple[float, float, float]
    displacements: np.ndarray

    def __post_init__(self):
        d = np.array(self.displacements, dtype=np.float64)
        if d.ndim != 4 or d.shape[3] != 3:
            raise ValueError("displacements must have shape grid_dims + (3,)")
        object.__setattr__(self, "grid_spacing", tuple(float(s) for s in self.grid_spacing))
        object.__setattr__(self, "displacements", _freeze(d))

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return self.displacements.shape[:3]

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.grid_dims))

    def positions_mm(self) -> list[np.ndarray]:
        """Per-axis control-point coordinates in mm relative to the origin."""
        return [(np.arange(n) - 1) * s for n, s in zip(self.grid_dims, self.grid_spacing)]

    def with_displacements(self, disp: np.ndarray) -> "ControlGrid":
        return ControlGrid(self.domain, self.grid_spacing, np.reshape(disp, self.grid_dims + (3,)))


@dataclass(frozen=True)
class DenseDeformationField:
    domain: VolumeDomain
    displacement: np.ndarray

    def __post_init__(self):
        u = np.array(self.displacement, dtype=np.float64)
        if u.shape != self.domain.dims + (3,):
            raise ValueError(f"displacement shape {u.shape} != {self.domain.dims + (3,)}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement field contains non-finite values")
        object.__setattr__(self, "displacement", _freeze(u))

    def voxel_displacement(self) -> np.ndarray:
        return self.displacement / np.asarray(self.domain.spacing)

    def max_voxel_norm(self) -> float:
        return float(np.sqrt((self.voxel_displacement() ** 2).sum(-1)).max(initial=0.0))

    def is_identity(self) -> bool:
        return not np.any(self.displacement)


def _grid_dims(domain: VolumeDomain, grid_spacing) -> tuple[int, int, int]:
    ext = [(n - 1) * s for n, s in zip(domain.dims, domain.spacing)]
    return tuple(int(np.floor(e / g + 1e-9)) + 4 for e, g in zip(ext, grid_spacing))


def identity_grid(domain: VolumeDomain, grid_spacing) -> ControlGrid:
    gs = np.broadcast_to(np.asarray(grid_spacing, dtype=np.float64), (3,))
    if np.any(gs < 2 * np.asarray(domain.spacing) - 1e-9):
        raise ConfigurationError(
            f"grid spacing {tuple(gs)} mm is below 2 voxels for spacing {domain.spacing}"
        )
    dims = _grid_dims(domain, gs)
    return ControlGrid(domain, tuple(gs), np.zeros(dims + (3,)))


def identity_field(domain: VolumeDomain) -> DenseDeformationField:
    return DenseDeformationField(domain, np.zeros(domain.dims + (3,)))


def translation_field(domain: VolumeDomain, t_mm) -> DenseDeformationField:
    u = np.broadcast_to(np.asarray(t_mm, dtype=np.float64), domain.dims + (3,))
    return DenseDeformationField(domain, u)


def _cubic_weights(f: np.ndarray) -> np.ndarray:
    f2, f3 = f * f, f * f * f
    return np.stack(
        [
            (1 - f) ** 3 / 6.0,
            (3 * f3 - 6 * f2 + 4) / 6.0,
            (-3 * f3 + 3 * f2 + 3 * f + 1) / 6.0,
            f3 / 6.0,
        ],
        axis=-1,
    )


def bspline_weights(n_vox: int, spacing: float, grid_spacing: float, n_ctrl: int,
                    basis: str = "cubic") -> np.ndarray:
    """Matrix ``W`` (n_vox x n_ctrl) with ``u_axis = W @ d`` along one axis."""
    t = np.arange(n_vox) * spacing / grid_spacing
    i = np.floor(t + 1e-12).astype(int)
    f = np.clip(t - i, 0.0, 1.0)
    W = np.zeros((n_vox, n_ctrl))
    rows = np.arange(n_vox)
    if basis == "cubic":
        w = _cubic_weights(f)
        for j in range(4):
            np.add.at(W, (rows, i + j), w[:, j])
    elif basis == "linear":
        np.add.at(W, (rows, i + 1), 1 - f)
        np.add.at(W, (rows, i + 2), f)
    else:
        raise ValueError(f"unknown basis {basis!r}")
    return W


def densify(grid: ControlGrid, basis: str = "cubic") -> DenseDeformationField:
    dom = grid.domain
    Ws = [
        bspline_weights(n, s, g, m, basis)
        for n, s, g, m in zip(dom.dims, dom.spacing, grid.grid_spacing, grid.grid_dims)
    ]
    u = np.tensordot(Ws[0], grid.displacements, axes=(1, 0))
    u = np.tensordot(Ws[1], u, axes=(1, 1)).transpose(1, 0, 2, 3)
    u = np.tensordot(Ws[2], u, axes=(1, 2)).transpose(1, 2, 0, 3)
    return DenseDeformationField(dom, u)


def _coords(field: DenseDeformationField) -> np.ndarray:
    grid = np.indices(field.domain.dims, dtype=np.float64)
    return grid + np.moveaxis(field.voxel_displacement(), -1, 0)


def _check(domain: VolumeDomain, field: DenseDeformationField) -> None:
    domain.check_same(field.domain, "field")


def warp_scalar(vol: ScalarVolume, field: DenseDeformationField) -> ScalarVolume:
    _check(vol.domain, field)
    out = ndimage.map_coordinates(vol.data, _coords(field), order=1, mode="nearest")
    return ScalarVolume(vol.domain, out)


def warp_probability(prob: ProbabilityMap, field: DenseDeformationField) -> ProbabilityMap:
    """Warp each class channel; samples outside the domain are background."""
    _check(prob.domain, field)
    coords = _coords(field)
    out = np.empty(prob.data.shape, dtype=np.float32)
    for c in range(prob.num_classes):
        out[..., c] = ndimage.map_coordinates(
            prob.data[..., c], coords, order=1, mode="constant", cval=1.0 if c == 0 else 0.0
        )
    return ProbabilityMap(prob.domain, renormalize(out))


def _nearest_index(coords: np.ndarray, dims) -> tuple:
    idx = np.ceil(coords - 0.5).astype(np.intp)
    return tuple(np.clip(idx[a], 0, dims[a] - 1) for a in range(3))


def warp_labels(labels: LabelMap, field: DenseDeformationField) -> LabelMap:
    _check(labels.domain, field)
    idx = _nearest_index(_coords(field), labels.domain.dims)
    return LabelMap(labels.domain, labels.data[idx])


def _sample_field(field: DenseDeformationField, coords: np.ndarray) -> np.ndarray:
    u = field.displacement
    return np.stack(
        [ndimage.map_coordinates(u[..., a], coords, order=1, mode="nearest") for a in range(3)],
        axis=-1,
    )


def compose(outer: DenseDeformationField, inner: DenseDeformationField) -> DenseDeformationField:
    """Field equivalent to warping by ``outer`` first, then by ``inner``.

    ``u(x) = u_inner(x) + u_outer(x + u_inner(x))``
    """
    outer.domain.check_same(inner.domain, "field")
    if inner.is_identity():
        return outer
    if outer.is_identity():
        return inner
    u = inner.displacement + _sample_field(outer, _coords(inner))
    return DenseDeformationField(inner.domain, u)


def invert(field: DenseDeformationField, tol: float = 0.01, max_iter: int = 30,
           max_residual: float = 0.5) -> DenseDeformationField:
    """Fixed-point inverse: ``v <- -u(x + v(x))`` starting from ``v = -u``.

    Tolerances are in voxels. Raises InversionError when the round-trip
    residual still exceeds ``max_residual`` after ``max_iter`` iterations.
    """
    if field.is_identity():
        return field
    dom = field.domain
    sp = np.asarray(dom.spacing)
    base = np.indices(dom.dims, dtype=np.float64)
    v = -field.displacement
    for _ in range(max_iter):
        coords = base + np.moveaxis(v / sp, -1, 0)
        v_new = -_sample_field(field, coords)
        step = np.abs((v_new - v) / sp).max()
        v = v_new
        if step < tol:
            break
    coords = base + np.moveaxis(v / sp, -1, 0)
    residual = np.sqrt((((v + _sample_field(field, coords)) / sp) ** 2).sum(-1))
    worst = np.unravel_index(np.argmax(residual), residual.shape)
    if residual[worst] > max_residual:
        raise InversionError(
            f"field inversion did not converge: residual {residual[worst]:.3f} voxel "
            f"at voxel {tuple(int(i) for i in worst)}"
        )
    return DenseDeformationField(dom, v)


def save_field(field: DenseDeformationField, path: str | os.PathLike) -> None:
    """Write a dense field as a 4D MetaImage with the 3 components last."""
    write_metaimage(path, field.displacement.astype("<f4"), field.domain)


def load_field(path: str | os.PathLike) -> DenseDeformationField:
    arr, domain, _ = read_metaimage(path)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise MetaImageError(f"{path}: not a displacement field")
    return DenseDeformationField(domain, arr.astype(np.float64))
