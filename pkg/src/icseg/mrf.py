"""Discrete MRF registration step: label sets, unary costs, and move-making solvers.

One registration step places a first-order MRF on the control grid. Each node
picks a displacement label; the energy is

    E(L) = sum_p unary[p, l_p] + w * sum_(p,q) ||d_(l_p) - d_(l_q)||

where ``w`` is the effective pairwise weight (lambda scaled by the number of
images compared against).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

from .transform import DISPLACEMENT_CAP, ConfigurationError, ControlGrid
from .volume import LabelMap, ProbabilityMap, ScalarVolume, argmax_labels

__all__ = [
    "DisplacementLabelSet",
    "MrfProblem",
    "ProblemTooLargeError",
    "build_label_set",
    "grid_edges",
    "build_unary",
    "pairwise_cost",
    "mrf_energy",
    "energy_terms",
    "solve_icm",
    "solve_expansion",
    "solve_exhaustive",
    "SOLVERS",
]


class ProblemTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class DisplacementLabelSet:
    labels: np.ndarray  # (|L|, 3) in mm, row 0 is the zero displacement
    radius: float
    steps: int

    def __len__(self):
        return len(self.labels)


def build_label_set(grid_spacing, steps: int, scale: float = 1.0) -> DisplacementLabelSet:
    """Zero plus ``steps`` magnitudes along each of the six signed axis directions."""
    if steps < 1:
        raise ConfigurationError("label steps must be >= 1")
    if not 0 < scale <= 1:
        raise ConfigurationError("label scale must be in (0, 1]")
    gs = np.broadcast_to(np.asarray(grid_spacing, dtype=np.float64), (3,))
    reach = scale * DISPLACEMENT_CAP * gs
    labels = [np.zeros(3)]
    for axis in range(3):
        for m in range(1, steps + 1):
            for sign in (1.0, -1.0):
                v = np.zeros(3)
                v[axis] = sign * m * reach[axis] / steps
                labels.append(v)
    return DisplacementLabelSet(np.array(labels), float(reach.max()), int(steps))


def grid_edges(grid_dims) -> np.ndarray:
    """Unique 6-neighbourhood edges of a lattice, node index in C order."""
    idx = np.arange(int(np.prod(grid_dims))).reshape(grid_dims)
    edges = []
    for axis in range(3):
        a = np.take(idx, np.arange(grid_dims[axis] - 1), axis=axis).ravel()
        b = np.take(idx, np.arange(1, grid_dims[axis]), axis=axis).ravel()
        edges.append(np.stack([a, b], axis=1))
    return np.concatenate(edges).astype(np.int64)


def pairwise_cost(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


@dataclass(frozen=True)
class MrfProblem:
    unary: np.ndarray          # (K, |L|)
    edges: np.ndarray          # (E, 2)
    label_vectors: np.ndarray  # (|L|, 3)
    pairwise_weight: float

    def __post_init__(self):
        unary = np.asarray(self.unary, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        vecs = np.asarray(self.label_vectors, dtype=np.float64)
        if unary.ndim != 2 or unary.shape[1] != len(vecs):
            raise ValueError("unary must be (num_nodes, num_labels)")
        if not np.all(np.isfinite(unary)) or unary.min(initial=0) < 0:
            raise ValueError("unary costs must be finite and non-negative")
        if len(edges) and (edges.min() < 0 or edges.max() >= unary.shape[0]):
            raise ValueError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        object.__setattr__(self, "unary", unary)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "label_vectors", vecs)
        object.__setattr__(self, "pairwise_weight", float(self.pairwise_weight))
        diff = vecs[:, None, :] - vecs[None, :, :]
        object.__setattr__(self, "distance", np.sqrt((diff ** 2).sum(-1)))

    @property
    def num_nodes(self) -> int:
        return self.unary.shape[0]

    @property
    def num_labels(self) -> int:
        return self.unary.shape[1]


def energy_terms(problem: MrfProblem, labeling) -> tuple[float, float]:
    """``(data, smoothness)`` parts of the energy; smoothness includes the weight."""
    lab = np.asarray(labeling, dtype=np.int64)
    data = problem.unary[np.arange(problem.num_nodes), lab].sum()
    e = problem.edges
    smooth = problem.pairwise_weight * problem.distance[lab[e[:, 0]], lab[e[:, 1]]].sum()
    return float(data), float(smooth)


def mrf_energy(problem: MrfProblem, labeling) -> float:
    data, smooth = energy_terms(problem, labeling)
    return data + smooth


# --------------------------------------------------------------------------
# Unary costs


def _shift_axis(arr: np.ndarray, axis: int, s: float, cval: float | None = None) -> np.ndarray:
    """Linear interpolation of ``arr`` at ``i + s`` along one axis.

    ``cval is None`` clamps to the edge; otherwise samples outside ``[0, n-1]``
    take ``cval``.
    """
    n = arr.shape[axis]
    if s == 0:
        return arr
    pos = np.arange(n) + s
    posc = np.clip(pos, 0, n - 1)
    i0 = np.minimum(np.floor(posc).astype(np.intp), max(n - 2, 0))
    t = posc - i0
    i1 = np.minimum(i0 + 1, n - 1)
    shape = [1] * arr.ndim
    shape[axis] = n
    t = t.reshape(shape)
    out = np.take(arr, i0, axis=axis) * (1 - t) + np.take(arr, i1, axis=axis) * t
    if cval is not None:
        outside = ((pos < 0) | (pos > n - 1)).reshape(shape)
        out = np.where(outside, cval, out)
    return out


def _shift(arr: np.ndarray, shift_vox: np.ndarray, cval: float | None = None) -> np.ndarray:
    nz = np.flatnonzero(shift_vox)
    if len(nz) == 0:
        return arr
    if len(nz) == 1:
        return _shift_axis(arr, int(nz[0]), float(shift_vox[nz[0]]), cval)
    coords = np.indices(arr.shape, dtype=np.float64) + shift_vox.reshape(3, 1, 1, 1)
    if cval is None:
        return ndimage.map_coordinates(arr, coords, order=1, mode="nearest")
    return ndimage.map_coordinates(arr, coords, order=1, mode="constant", cval=cval)


def _box_ranges(grid: ControlGrid, dims, spacing):
    """Per-axis ``[lo, hi)`` voxel ranges of the support box around each control point."""
    ranges = []
    for pos, gs, n, s in zip(grid.positions_mm(), grid.grid_spacing, dims, spacing):
        c = pos / s
        half = 0.5 * gs / s
        lo = np.clip(np.ceil(c - half - 1e-9), 0, n).astype(np.intp)
        hi = np.clip(np.ceil(c + half - 1e-9), 0, n).astype(np.intp)
        ranges.append((lo, hi))
    return ranges


def _box_means(vol: np.ndarray, ranges) -> np.ndarray:
    """Mean of ``vol`` over every control-point box via a summed-volume table."""
    S = np.zeros(tuple(n + 1 for n in vol.shape))
    S[1:, 1:, 1:] = vol.cumsum(0).cumsum(1).cumsum(2)
    (x0, x1), (y0, y1), (z0, z1) = ranges
    X0, Y0, Z0 = np.ix_(x0, y0, z0)
    X1, Y1, Z1 = np.ix_(x1, y1, z1)
    total = (
        S[X1, Y1, Z1] - S[X0, Y1, Z1] - S[X1, Y0, Z1] - S[X1, Y1, Z0]
        + S[X0, Y0, Z1] + S[X0, Y1, Z0] + S[X1, Y0, Z0] - S[X0, Y0, Z0]
    )
    count = (X1 - X0) * (Y1 - Y0) * (Z1 - Z0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return np.maximum(mean, 0.0).ravel()


def _moving_labels(prior, shift_vox: np.ndarray) -> np.ndarray:
    if isinstance(prior, ProbabilityMap):
        p = prior.data
        shifted = np.stack(
            [_shift(p[..., c], shift_vox, cval=1.0 if c == 0 else 0.0) for c in range(p.shape[3])],
            axis=-1,
        )
        return np.argmax(shifted, axis=-1)
    # hard labels: nearest neighbour, clamp to edge
    data = prior.data
    coords = np.indices(data.shape, dtype=np.float64) + shift_vox.reshape(3, 1, 1, 1)
    idx = np.ceil(coords - 0.5).astype(np.intp)
    idx = tuple(np.clip(idx[a], 0, data.shape[a] - 1) for a in range(3))
    return data[idx]


def build_unary(
    k: int,
    images: Sequence[ScalarVolume],
    priors: Sequence[LabelMap | ProbabilityMap] | None,
    grid: ControlGrid,
    labels: DisplacementLabelSet,
    beta: float,
    workers: int = 1,
) -> np.ndarray:
    """Unary cost table ``(K, |L|)`` for registering image ``k`` to all others.

    For every label the moving image (and prior) is shifted by the label's
    displacement and compared against each fixed image: absolute intensity
    difference plus ``beta`` times argmax disagreement, summed over the fixed
    images and averaged over the support box of each control point.

    Priors may be label maps or probability maps. A moving probability map is
    shifted by linear interpolation before taking the argmax; fixed ones are
    reduced to their argmax directly. With ``beta == 0`` priors are not read.
    """
    n = len(images)
    if n < 2:
        raise ConfigurationError("need at least two images to build unary costs")
    if not 0 <= k < n:
        raise IndexError(f"target index {k} out of range")
    dom = images[k].domain
    for im in images:
        dom.check_same(im.domain, "image")
    use_priors = beta != 0
    if use_priors:
        if priors is None or len(priors) != n:
            raise ConfigurationError("one prior per image is required when beta != 0")
        for pr in priors:
            dom.check_same(pr.domain, "prior")

    spacing = np.asarray(dom.spacing)
    others = [i for i in range(n) if i != k]
    fixed = np.stack([images[i].data.astype(np.float64) for i in others])
    moving = images[k].data.astype(np.float64)
    if use_priors:
        fixed_lab = np.stack(
            [
                argmax_labels(priors[i]).data if isinstance(priors[i], ProbabilityMap) else priors[i].data
                for i in others
            ]
        )
    ranges = _box_ranges(grid, dom.dims, spacing)

    def column(vec):
        s = np.asarray(vec) / spacing
        cost = np.abs(fixed - _shift(moving, s)).sum(0)
        if use_priors:
            mov_lab = _moving_labels(priors[k], s)
            cost = cost + beta * (fixed_lab != mov_lab[None]).sum(0)
        return _box_means(cost, ranges)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, labels.labels))
    else:
        cols = [column(v) for v in labels.labels]
    return np.stack(cols, axis=1)


# --------------------------------------------------------------------------
# Solvers


def _adjacency(problem: MrfProblem):
    K = problem.num_nodes
    e = problem.edges
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.searchsorted(both[:, 0], np.arange(K + 1))
    return indptr, both[:, 1]


def solve_icm(problem: MrfProblem, init, max_sweeps: int = 1000) -> np.ndarray:
    """Iterated conditional modes, nodes visited in index order."""
    lab = np.array(init, dtype=np.int64)
    indptr, nbrs = _adjacency(problem)
    U = problem.unary
    WV = problem.pairwise_weight * problem.distance
    tol = 1e-12 * max(1.0, float(np.abs(U).max(initial=0)))
    for _ in range(max_sweeps):
        changed = False
        for p in range(problem.num_nodes):
            nb = nbrs[indptr[p]:indptr[p + 1]]
            costs = U[p] + WV[:, lab[nb]].sum(axis=1)
            best = int(np.argmin(costs))
            if costs[best] < costs[lab[p]] - tol:
                lab[p] = best
                changed = True
        if not changed:
            break
    return lab


def _solve_binary(theta0, theta1, edges, A, B, C, D) -> np.ndarray:
    """Minimise a submodular binary energy by a single s-t minimum cut.

    Returns the boolean assignment (True = take the "1" option).
    """
    n = len(theta0)
    p, q = edges[:, 0], edges[:, 1]
    lin = theta1 - theta0
    np.add.at(lin, p, C - A)
    np.add.at(lin, q, D - C)
    w = np.maximum(B + C - A - D, 0.0)

    src, dst = n, n + 1
    pos = lin > 0
    neg = lin < 0
    caps = np.concatenate([lin[pos], -lin[neg], w])
    rows = np.concatenate([np.full(pos.sum(), src), np.flatnonzero(neg), p])
    cols = np.concatenate([np.flatnonzero(pos), np.full(neg.sum(), dst), q])
    total = caps.sum()
    if total <= 0:
        return np.zeros(n, dtype=bool)
    # integer capacities for scipy's max-flow; the caller re-checks the true energy
    icaps = np.rint(caps * (2.0 ** 30 / total)).astype(np.int64)
    keep = icaps > 0
    G = sp.csr_matrix(
        (icaps[keep].astype(np.int32), (rows[keep], cols[keep])), shape=(n + 2, n + 2)
    )
    flow = maximum_flow(G, src, dst, method="dinic").flow
    R = (G - flow).tocsr()
    R.data = (R.data > 0).astype(np.int8)
    R.eliminate_zeros()
    reached = breadth_first_order(R, src, directed=True, return_predecessors=False)
    x = np.ones(n + 2, dtype=bool)
    x[reached] = False
    return x[:n]


def _expansion_move(problem: MrfProblem, lab: np.ndarray, alpha: int) -> np.ndarray:
    U = problem.unary
    K = problem.num_nodes
    e = problem.edges
    WV = problem.pairwise_weight * problem.distance
    a, b = lab[e[:, 0]], lab[e[:, 1]]
    theta0 = U[np.arange(K), lab]
    theta1 = U[:, alpha].copy()
    A = WV[a, b]
    B = WV[a, alpha]
    C = WV[alpha, b]
    D = np.zeros(len(e))
    x = _solve_binary(theta0, theta1, e, A, B, C, D)
    out = lab.copy()
    out[x] = alpha
    return out


def solve_expansion(problem: MrfProblem, init, max_cycles: int = 100) -> np.ndarray:
    """Alpha-expansion with exact min-cut moves, warm-started from ICM.

    Each move is accepted only if it lowers the true energy, so the result is
    never worse than ``init`` or than ICM from ``init``.
    """
    lab = solve_icm(problem, init)
    energy = mrf_energy(problem, lab)
    tol = 1e-9 * max(1.0, abs(energy))
    for _ in range(max_cycles):
        improved = False
        for alpha in range(problem.num_labels):
            cand = _expansion_move(problem, lab, alpha)
            e_cand = mrf_energy(problem, cand)
            if e_cand < energy - tol:
                lab, energy = cand, e_cand
                improved = True
        if not improved:
            break
    return lab


def solve_exhaustive(problem: MrfProblem, limit: int = 10 ** 7, chunk: int = 200_000) -> np.ndarray:
    """Global optimum by enumeration; ties go to the lexicographically smallest labeling."""
    K, L = problem.num_nodes, problem.num_labels
    if L ** K > limit:
        raise ProblemTooLargeError(f"{L}^{K} labelings exceed the enumeration limit {limit}")
    best_e, best = np.inf, None
    e = problem.edges
    WV = problem.pairwise_weight * problem.distance
    powers = L ** np.arange(K - 1, -1, -1, dtype=np.int64)
    for start in range(0, L ** K, chunk):
        idx = np.arange(start, min(start + chunk, L ** K), dtype=np.int64)
        block = (idx[:, None] // powers[None, :]) % L
        energy = problem.unary[np.arange(K), block].sum(1)
        if len(e):
            energy = energy + WV[block[:, e[:, 0]], block[:, e[:, 1]]].sum(1)
        i = int(np.argmin(energy))
        if energy[i] < best_e:
            best_e, best = energy[i], block[i].copy()
    return best


SOLVERS = {"expansion": solve_expansion, "icm": solve_icm}
