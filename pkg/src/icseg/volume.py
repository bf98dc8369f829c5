"""Volume domain model, MetaImage I/O, interpolation and intensity handling.

All voxel arrays are indexed ``[x, y, z]`` (shape == ``domain.dims``). On disk
the payload is written with x varying fastest, which is the Fortran order of
those arrays.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "VolumeDomain",
    "ScalarVolume",
    "LabelMap",
    "ProbabilityMap",
    "MetaImageError",
    "DegenerateInputError",
    "DomainMismatchError",
    "load_metaimage",
    "save_metaimage",
    "read_metaimage",
    "write_metaimage",
    "sample_trilinear",
    "sample_nearest",
    "normalize_intensities",
    "argmax_labels",
    "one_hot",
    "downsample",
    "renormalize",
]


class MetaImageError(ValueError):
    """Malformed or unsupported MetaImage header or payload."""


class DegenerateInputError(ValueError):
    pass


class DomainMismatchError(ValueError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VolumeDomain:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("domain fields must be triples")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1, got {dims}")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def check_same(self, other: "VolumeDomain", what: str = "volume") -> None:
        if self != other:
            raise DomainMismatchError(f"{what} domain {other} does not match {self}")


@dataclass(frozen=True)
class ScalarVolume:
    domain: VolumeDomain
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.shape != self.domain.dims:
            raise ValueError(f"data shape {data.shape} != dims {self.domain.dims}")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class LabelMap:
    domain: VolumeDomain
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.domain.dims:
            raise ValueError(f"data shape {data.shape} != dims {self.domain.dims}")
        if data.size and data.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "data", _freeze(np.array(data, dtype=np.int16)))

    @property
    def num_classes(self) -> int:
        return int(self.data.max()) + 1


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-voxel class likelihoods, shape ``dims + (num_classes,)``.

    Values are clipped to [0, 1] and every voxel is renormalized to sum 1 on
    construction.
    """

    domain: VolumeDomain
    data: np.ndarray
    normalize: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[:3] != self.domain.dims:
            raise ValueError(f"data shape {data.shape} incompatible with dims {self.domain.dims}")
        if self.normalize:
            data = renormalize(data)
        object.__setattr__(self, "data", _freeze(np.array(data, dtype=np.float32)))

    @property
    def num_classes(self) -> int:
        return self.data.shape[3]


Volume = Union[ScalarVolume, LabelMap, ProbabilityMap]


def renormalize(prob: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Clip to [0, 1] and rescale each voxel's class vector to sum 1.

    Voxels already summing to 1 within ``tol`` are left untouched so the
    operation is idempotent. All-zero voxels become background.
    """
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    s = p.sum(axis=-1, keepdims=True)
    empty = s[..., 0] <= 0
    if np.any(empty):
        p[empty] = 0.0
        p[empty, 0] = 1.0
        s = p.sum(axis=-1, keepdims=True)
    off = np.abs(s - 1.0) > tol
    out = np.where(off, p / s, p)
    return out.astype(np.float32)


# --------------------------------------------------------------------------
# MetaImage

_ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}
_REQUIRED = ("ObjectType", "NDims", "DimSize", "ElementType", "ElementDataFile")


def _parse_header(path: str) -> tuple[dict, int]:
    """Return header dict and byte offset of the payload (for LOCAL data)."""
    header = {}
    offset = 0
    with open(path, "rb") as fh:
        for raw in fh:
            offset += len(raw)
            line = raw.decode("ascii", errors="replace").strip()
            if not line:
                continue
            if "=" not in line:
                raise MetaImageError(f"{path}: malformed header line {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
            if key == "ElementDataFile":
                break
    return header, offset


def _triple(header, key, n, cast, default=None):
    if key not in header:
        if default is None:
            raise MetaImageError(f"missing header key {key}")
        return default
    try:
        vals = [cast(v) for v in header[key].split()]
    except ValueError as exc:
        raise MetaImageError(f"bad value for {key}: {header[key]!r}") from exc
    if len(vals) < n:
        raise MetaImageError(f"{key} has {len(vals)} entries, expected {n}")
    return vals[:n]


def read_metaimage(path: str | os.PathLike) -> tuple[np.ndarray, VolumeDomain, str]:
    """Low-level reader: ``(array, domain, element_type)`` with x-fastest layout undone."""
    path = os.fspath(path)
    header, offset = _parse_header(path)
    for key in _REQUIRED:
        if key not in header:
            raise MetaImageError(f"{path}: missing header key {key}")
    if header["ObjectType"] != "Image":
        raise MetaImageError(f"{path}: ObjectType must be Image")
    try:
        ndims = int(header["NDims"])
    except ValueError:
        raise MetaImageError(f"{path}: bad value for NDims") from None
    if ndims not in (3, 4):
        raise MetaImageError(f"{path}: NDims must be 3 or 4, got {ndims}")
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise MetaImageError(f"{path}: BinaryDataByteOrderMSB must be False")
    if header.get("CompressedData", "False").lower() == "true":
        raise MetaImageError(f"{path}: CompressedData is not supported")
    dimsize = _triple(header, "DimSize", ndims, int)
    if min(dimsize) < 1:
        raise MetaImageError(f"{path}: DimSize entries must be positive")
    spacing = _triple(header, "ElementSpacing", 3, float, default=[1.0, 1.0, 1.0])
    origin = _triple(header, "Offset", 3, float, default=[0.0, 0.0, 0.0])
    etype = header["ElementType"]
    if etype not in _ELEMENT_TYPES:
        raise MetaImageError(f"{path}: unsupported ElementType {etype}")
    dtype = _ELEMENT_TYPES[etype]

    datafile = header["ElementDataFile"]
    count = int(np.prod(dimsize))
    if datafile == "LOCAL":
        with open(path, "rb") as fh:
            fh.seek(offset)
            payload = fh.read()
    else:
        with open(os.path.join(os.path.dirname(path), datafile), "rb") as fh:
            payload = fh.read()
    nbytes = count * dtype.itemsize
    if len(payload) < nbytes:
        raise MetaImageError(
            f"{path}: payload truncated ({len(payload)} bytes, expected {nbytes})"
        )
    arr = np.frombuffer(payload[:nbytes], dtype=dtype).reshape(dimsize, order="F")
    domain = VolumeDomain(tuple(dimsize[:3]), tuple(spacing), tuple(origin))
    return arr, domain, etype


def load_metaimage(path: str | os.PathLike, kind: str | None = None) -> Volume:
    """Read a MetaImage file.

    ``kind`` is one of ``"scalar"``, ``"labels"``, ``"probability"``. When it is
    omitted, 4D files load as probability maps, MET_FLOAT 3D files as scalar
    volumes and integer 3D files as label maps.
    """
    arr, domain, etype = read_metaimage(path)
    if kind is None:
        if arr.ndim == 4:
            kind = "probability"
        elif etype == "MET_FLOAT":
            kind = "scalar"
        else:
            kind = "labels"
    if kind == "probability":
        if arr.ndim != 4:
            raise MetaImageError(f"{path}: probability maps need NDims = 4")
        return ProbabilityMap(domain, arr.astype(np.float32))
    if arr.ndim != 3:
        raise MetaImageError(f"{path}: {kind} volumes need NDims = 3")
    if kind == "scalar":
        return ScalarVolume(domain, arr.astype(np.float32))
    if kind == "labels":
        return LabelMap(domain, arr)
    raise ValueError(f"unknown kind {kind!r}")


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def write_metaimage(path: str | os.PathLike, arr: np.ndarray, domain: VolumeDomain) -> None:
    """Low-level writer for a 3D or 4D array in one of the supported element types."""
    path = os.fspath(path)
    etypes = {v: k for k, v in _ELEMENT_TYPES.items()}
    arr = np.asarray(arr)
    if arr.dtype.newbyteorder("<") not in etypes:
        raise MetaImageError(f"unsupported dtype {arr.dtype}")
    etype = etypes[arr.dtype.newbyteorder("<")]
    lines = [
        "ObjectType = Image",
        f"NDims = {arr.ndim}",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {' '.join(str(d) for d in arr.shape)}",
        f"ElementSpacing = {_fmt(domain.spacing)}",
        f"Offset = {_fmt(domain.origin)}",
        f"ElementType = {etype}",
        "ElementDataFile = LOCAL",
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def save_metaimage(volume: Volume, path: str | os.PathLike) -> None:
    """Write ``volume`` as a single-file (LOCAL) little-endian MetaImage."""
    if isinstance(volume, LabelMap):
        dtype = "<u1" if volume.data.max(initial=0) <= 255 else "<i2"
        arr = volume.data.astype(dtype)
    else:
        arr = volume.data.astype("<f4")
    write_metaimage(path, arr, volume.domain)


# --------------------------------------------------------------------------
# Interpolation


def sample_trilinear(vol: ScalarVolume, point: Sequence[float]) -> float:
    """Trilinear interpolation at a voxel-coordinate point, clamped to the edge."""
    data = vol.data
    dims = np.array(data.shape)
    p = np.clip(np.asarray(point, dtype=np.float64), 0, dims - 1)
    lo = np.minimum(np.floor(p).astype(int), np.maximum(dims - 2, 0))
    t = p - lo
    hi = np.minimum(lo + 1, dims - 1)
    value = 0.0
    for dx in (0, 1):
        wx = t[0] if dx else 1 - t[0]
        for dy in (0, 1):
            wy = t[1] if dy else 1 - t[1]
            for dz in (0, 1):
                wz = t[2] if dz else 1 - t[2]
                idx = tuple(hi[a] if d else lo[a] for a, d in enumerate((dx, dy, dz)))
                value += wx * wy * wz * float(data[idx])
    return value


def sample_nearest(labels: LabelMap, point: Sequence[float]) -> int:
    """Label of the nearest voxel; exact .5 ties round toward -inf."""
    dims = np.array(labels.data.shape)
    idx = np.ceil(np.asarray(point, dtype=np.float64) - 0.5).astype(int)
    idx = np.clip(idx, 0, dims - 1)
    return int(labels.data[tuple(idx)])


def normalize_intensities(vol: ScalarVolume) -> ScalarVolume:
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        raise DegenerateInputError("cannot normalize a constant volume")
    if lo == 0.0 and hi == 1.0:
        return vol
    return ScalarVolume(vol.domain, (data - lo) / (hi - lo))


def argmax_labels(prob: ProbabilityMap) -> LabelMap:
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return LabelMap(prob.domain, np.argmax(prob.data, axis=-1))


def one_hot(labels: LabelMap, num_classes: int | None = None) -> ProbabilityMap:
    n = labels.num_classes if num_classes is None else num_classes
    if labels.data.max(initial=0) >= n:
        raise ValueError("label value exceeds num_classes")
    data = np.zeros(labels.domain.dims + (n,), dtype=np.float32)
    np.put_along_axis(data, labels.data[..., None].astype(np.intp), 1.0, axis=-1)
    return ProbabilityMap(labels.domain, data)


def downsample(vol: Volume, factor: int) -> Volume:
    """Gaussian pre-smoothing (sigma = 0.5 * factor voxels) then decimation.

    Label maps are decimated without smoothing. Output dims are
    ``ceil(dim / factor)`` and spacing grows by ``factor``.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    dom = vol.domain
    new_dom = VolumeDomain(
        tuple(-(-d // factor) for d in dom.dims),
        tuple(s * factor for s in dom.spacing),
        dom.origin,
    )
    sl = (slice(None, None, factor),) * 3
    sigma = 0.5 * factor
    if isinstance(vol, LabelMap):
        return LabelMap(new_dom, vol.data[sl])
    if isinstance(vol, ProbabilityMap):
        sm = ndimage.gaussian_filter(
            vol.data.astype(np.float64), sigma=(sigma, sigma, sigma, 0), mode="nearest"
        )
        return ProbabilityMap(new_dom, sm[sl])
    sm = ndimage.gaussian_filter(vol.data.astype(np.float64), sigma=sigma, mode="nearest")
    return ScalarVolume(new_dom, sm[sl])
