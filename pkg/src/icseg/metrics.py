"""Overlap and surface-distance metrics between label maps.

Surfaces are the 6-connected boundary voxels of a class (voxels of the class
with at least one face neighbour outside it, the domain border counting as
outside). Distances are Euclidean between voxel centres, in mm.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelMap

__all__ = [
    "UndefinedMetricError",
    "StructureReport",
    "boundary",
    "dice",
    "hausdorff",
    "contour_mean_distance",
    "evaluate",
    "write_csv",
    "CSV_HEADER",
]

CSV_HEADER = ("volume_id", "class", "dice", "hd_mm", "cmd_mm")
SURFACE_NOTE = "# distances between 6-connected boundary voxel centres, mm"


class UndefinedMetricError(ValueError):
    pass


def boundary(mask: np.ndarray) -> np.ndarray:
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                   border_value=0)
    return mask & ~inner


def dice(a: LabelMap, b: LabelMap, cls: int) -> float:
    a.domain.check_same(b.domain, "label map")
    ma, mb = a.data == cls, b.data == cls
    na, nb = int(ma.sum()), int(mb.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / (na + nb)


def _directed(a: LabelMap, b: LabelMap, cls: int) -> tuple[np.ndarray, np.ndarray]:
    """Distances from each boundary voxel of ``a`` to the nearest of ``b``, both ways."""
    a.domain.check_same(b.domain, "label map")
    ba, bb = boundary(a.data == cls), boundary(b.data == cls)
    if not ba.any() or not bb.any():
        raise UndefinedMetricError(f"class {cls} is empty in one of the masks")
    sp = np.asarray(a.domain.spacing)
    return _to_surface(ba, bb, sp), _to_surface(bb, ba, sp)


def _to_surface(src: np.ndarray, dst: np.ndarray, sp: np.ndarray) -> np.ndarray:
    # nearest-feature indices from the exact EDT, distances recomputed from them
    _, idx = ndimage.distance_transform_edt(~dst, sampling=sp, return_indices=True)
    pts = np.argwhere(src)
    near = idx[(slice(None),) + tuple(pts.T)].T
    return np.sqrt((((pts - near) * sp) ** 2).sum(1))


def hausdorff(a: LabelMap, b: LabelMap, cls: int) -> float:
    dab, dba = _directed(a, b, cls)
    return float(max(dab.max(), dba.max()))


def contour_mean_distance(a: LabelMap, b: LabelMap, cls: int) -> float:
    dab, dba = _directed(a, b, cls)
    return float(0.5 * (dab.mean() + dba.mean()))


@dataclass
class StructureReport:
    """Metric values keyed by class; undefined distances are NaN."""

    values: dict = field(default_factory=dict)

    def rows(self, volume_id: str = ""):
        for c in sorted(self.values):
            v = self.values[c]
            yield (volume_id, c, v["dice"], v["hausdorff_mm"], v["contour_mean_mm"])

    def mean(self, metric: str) -> float:
        vals = [v[metric] for v in self.values.values() if not math.isnan(v[metric])]
        return float(np.mean(vals)) if vals else math.nan


def evaluate(pred: LabelMap, gt: LabelMap) -> StructureReport:
    pred.domain.check_same(gt.domain, "label map")
    report = StructureReport()
    for c in np.unique(gt.data):
        c = int(c)
        if c == 0:
            continue
        entry = {"dice": dice(pred, gt, c), "hausdorff_mm": math.nan, "contour_mean_mm": math.nan}
        if np.any(pred.data == c):
            dab, dba = _directed(pred, gt, c)
            entry["hausdorff_mm"] = float(max(dab.max(), dba.max()))
            entry["contour_mean_mm"] = float(0.5 * (dab.mean() + dba.mean()))
        report.values[c] = entry
    return report


def write_csv(reports: dict, path: str | os.PathLike) -> None:
    """``reports`` maps volume ids to StructureReports."""
    with open(path, "w", newline="") as fh:
        fh.write(SURFACE_NOTE + "\n")
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for vid, rep in reports.items():
            for row in rep.rows(vid):
                w.writerow([row[0], row[1]] + ["nan" if math.isnan(x) else repr(float(x)) for x in row[2:]])
