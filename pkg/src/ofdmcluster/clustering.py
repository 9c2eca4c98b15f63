"""Clustering equalizers for the received constellation.

All algorithms work on 2-D real point arrays (re, im) that have been scaled
to unit RMS radius, so ``eps`` is measured relative to the signal amplitude.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster import hierarchy
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .config import ClusterScope, EqualizerConfig, EqualizerKind, NoiseMerge

NOISE = -1


class PointRole(enum.IntEnum):
    CORE = 0
    BORDER = 1
    NOISE = 2


@dataclass
class PointSet:
    """Constellation points scaled to unit RMS radius.

    ``scale`` is the RMS radius of the original symbols, so ``points * scale``
    recovers them.
    """

    points: np.ndarray
    scale: float = 1.0
    source_indices: np.ndarray | None = None

    @classmethod
    def from_symbols(cls, symbols: np.ndarray, source_indices: np.ndarray | None = None) -> PointSet:
        z = np.asarray(symbols, dtype=complex).reshape(-1)
        if not np.isfinite(z).all():
            raise ValueError("constellation contains non-finite symbols")
        scale = float(np.sqrt(np.mean(np.abs(z) ** 2))) if z.size else 1.0
        if scale == 0.0:
            scale = 1.0
        pts = np.column_stack([z.real, z.imag]) / scale
        return cls(pts, scale, source_indices)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    roles: np.ndarray
    # clusters found by the density stage; equals n_clusters except for modified DBSCAN fallback
    density_clusters: int | None = None
    fallback: bool = False
    n_iterations: int = 0
    inertia_history: list[float] = field(default_factory=list)
    memberships: np.ndarray | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def reported_clusters(self) -> int:
        return self.n_clusters if self.density_clusters is None else self.density_clusters


def psk_alphabet(k: int) -> np.ndarray:
    """``k`` points on the unit circle starting at pi/4 (the QPSK corners for k=4)."""
    angles = np.pi / 4 + 2 * np.pi * np.arange(k) / k
    return np.column_stack([np.cos(angles), np.sin(angles)])


def _as_points(ps: PointSet | np.ndarray) -> np.ndarray:
    pts = ps.points if isinstance(ps, PointSet) else np.asarray(ps, dtype=float)
    return pts.reshape(-1, 2)


def _member_means(points: np.ndarray, labels: np.ndarray, n_clusters: int) -> np.ndarray:
    mask = labels >= 0
    counts = np.bincount(labels[mask], minlength=n_clusters).astype(float)
    sums = np.zeros((n_clusters, 2))
    np.add.at(sums, labels[mask], points[mask])
    return sums / np.maximum(counts, 1)[:, None]


def _compact(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Renumber non-negative labels to 0..c-1 keeping their relative order."""
    used = np.unique(labels[labels >= 0])
    remap = np.full(int(used.max()) + 1 if used.size else 0, NOISE, dtype=np.int64)
    remap[used] = np.arange(used.size)
    out = labels.astype(np.int64).copy()
    out[labels >= 0] = remap[labels[labels >= 0]]
    return out, int(used.size)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _empty(roles_dtype=np.int8) -> ClusterAssignment:
    return ClusterAssignment(
        np.empty(0, dtype=np.int64), np.empty((0, 2)), np.empty(0, dtype=roles_dtype), density_clusters=0
    )


# --------------------------------------------------------------------------- DBSCAN


def region_query(ps: PointSet | np.ndarray, i: int, eps: float) -> np.ndarray:
    """Indices of all points within ``eps`` of point ``i``, itself included."""
    pts = _as_points(ps)
    d2 = np.sum((pts - pts[i]) ** 2, axis=1)
    return np.flatnonzero(d2 <= eps * eps)


class DensityIndex:
    """KD-tree over a point cloud with memoized neighbor counts per radius.

    Parameter sweeps reuse one index so each radius is counted only once.
    """

    def __init__(self, ps: PointSet | np.ndarray):
        self.points = _as_points(ps)
        self.tree = cKDTree(self.points) if len(self.points) else None
        self._counts: dict[float, np.ndarray] = {}

    def counts(self, eps: float) -> np.ndarray:
        if eps not in self._counts:
            if self.tree is None:
                self._counts[eps] = np.zeros(0, dtype=np.int64)
            else:
                self._counts[eps] = np.asarray(
                    self.tree.query_ball_point(self.points, eps, return_length=True), dtype=np.int64
                )
        return self._counts[eps]


# cell offsets whose squares can hold points within eps when the side is eps/sqrt(2)
_HALF_NEIGHBORHOOD = [
    (dx, dy)
    for dx in range(-2, 3)
    for dy in range(-2, 3)
    if (dx, dy) > (0, 0) and not (abs(dx) == 2 and abs(dy) == 2)
]


def _core_components(core_pts: np.ndarray, eps: float) -> np.ndarray:
    """Connected components of the eps-graph over core points (exact).

    Points are binned into square cells of side eps/sqrt(2); everything in a
    cell is mutually within eps. Two cells are linked if any cross pair is
    within eps: a cheap extreme-point test settles most pairs and the rest get
    an exhaustive check.
    """
    n = len(core_pts)
    side = eps / math.sqrt(2)
    cell_xy = np.floor(core_pts / side).astype(np.int64)
    cell_xy -= cell_xy.min(axis=0)
    width = int(cell_xy[:, 1].max()) + 5
    keys = (cell_xy[:, 0] + 2) * width + (cell_xy[:, 1] + 2)
    uniq, cell_of = np.unique(keys, return_inverse=True)
    n_cells = len(uniq)
    order = np.argsort(cell_of, kind="stable")
    starts = np.searchsorted(cell_of[order], np.arange(n_cells + 1))

    src: list[np.ndarray] = []
    dst: list[np.ndarray] = []
    eps2 = eps * eps
    for dx, dy in _HALF_NEIGHBORHOOD:
        target = uniq + dx * width + dy
        pos = np.searchsorted(uniq, target)
        pos = np.minimum(pos, n_cells - 1)
        hit = uniq[pos] == target
        a = np.flatnonzero(hit)
        b = pos[hit]
        if a.size == 0:
            continue
        # extreme points of each cell along the offset direction
        direction = np.array([dx, dy], dtype=float)
        proj = core_pts @ direction
        far = _group_extreme(proj, cell_of, n_cells, largest=True)
        near = _group_extreme(proj, cell_of, n_cells, largest=False)
        d2 = np.sum((core_pts[far[a]] - core_pts[near[b]]) ** 2, axis=1)
        linked = d2 <= eps2
        sizes = np.diff(starts)
        # single-point cells were settled exactly by the extreme-point test
        undecided = np.flatnonzero(~linked & ((sizes[a] > 1) | (sizes[b] > 1)))
        if undecided.size:
            linked[undecided] = _any_pair_within(
                core_pts, order, starts, a[undecided], b[undecided], eps2
            )
        src.append(a[linked])
        dst.append(b[linked])

    if src:
        rows = np.concatenate(src)
        cols = np.concatenate(dst)
    else:
        rows = cols = np.empty(0, dtype=np.int64)
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_cells, n_cells))
    _, cell_comp = connected_components(graph, directed=False)
    return cell_comp[cell_of] if n else np.empty(0, dtype=np.int64)


def _any_pair_within(
    pts: np.ndarray,
    order: np.ndarray,
    starts: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    eps2: float,
    chunk: int = 2_000_000,
) -> np.ndarray:
    """For each cell pair (a[j], b[j]), whether some cross pair lies within eps."""
    size_a = starts[a + 1] - starts[a]
    size_b = starts[b + 1] - starts[b]
    work = size_a * size_b
    result = np.zeros(a.size, dtype=bool)
    lo = 0
    while lo < a.size:
        hi = lo + max(1, int(np.searchsorted(np.cumsum(work[lo:]), chunk)))
        w = work[lo:hi]
        pair = np.repeat(np.arange(lo, hi), w)
        local = np.arange(pair.size) - np.repeat(np.cumsum(w) - w, w)
        ia = order[starts[a[pair]] + local // size_b[pair]]
        ib = order[starts[b[pair]] + local % size_b[pair]]
        close = np.sum((pts[ia] - pts[ib]) ** 2, axis=1) <= eps2
        result[lo:hi] = np.bincount(pair - lo, weights=close, minlength=hi - lo) > 0
        lo = hi
    return result


def _group_extreme(values: np.ndarray, groups: np.ndarray, n_groups: int, largest: bool) -> np.ndarray:
    """Index of the max (or min) value within each group."""
    order = np.lexsort((values if largest else -values, groups))
    last = np.searchsorted(groups[order], np.arange(n_groups), side="right") - 1
    return order[last]


def dbscan(
    ps: PointSet | np.ndarray,
    eps: float,
    min_points: int,
    index: DensityIndex | None = None,
) -> ClusterAssignment:
    """Density clustering with self-inclusive neighborhoods.

    Labels reproduce a scan over points in ascending index order: clusters are
    numbered by their lowest-index core point, and a border point reachable
    from several clusters joins the lowest-numbered one.
    """
    if eps <= 0 or min_points < 1:
        raise ValueError("dbscan needs eps > 0 and min_points >= 1")
    pts = _as_points(ps)
    n = len(pts)
    if n == 0:
        return _empty()
    index = index if index is not None else DensityIndex(pts)
    core = index.counts(eps) >= min_points
    labels = np.full(n, NOISE, dtype=np.int64)
    roles = np.full(n, PointRole.NOISE, dtype=np.int8)
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return ClusterAssignment(labels, np.empty((0, 2)), roles, density_clusters=0)

    comp = _core_components(pts[core_idx], eps)
    # number components by their smallest core index (core_idx is ascending)
    first_seen = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(first_seen, comp, np.arange(core_idx.size))
    rank = np.empty_like(first_seen)
    rank[np.argsort(first_seen, kind="stable")] = np.arange(first_seen.size)
    labels[core_idx] = rank[comp]
    roles[core_idx] = PointRole.CORE

    other = np.flatnonzero(~core)
    if other.size:
        core_tree = cKDTree(pts[core_idx])
        reach = core_tree.query_ball_point(pts[other], eps)
        lengths = np.fromiter((len(r) for r in reach), dtype=np.int64, count=other.size)
        has = lengths > 0
        if has.any():
            flat = np.concatenate([np.asarray(r, dtype=np.int64) for r, h in zip(reach, has) if h])
            offsets = np.concatenate([[0], np.cumsum(lengths[has])[:-1]])
            border_labels = np.minimum.reduceat(labels[core_idx][flat], offsets)
            labels[other[has]] = border_labels
            roles[other[has]] = PointRole.BORDER

    n_clusters = int(labels.max()) + 1
    centroids = _member_means(pts, labels, n_clusters)
    return ClusterAssignment(labels, centroids, roles, density_clusters=n_clusters)


# --------------------------------------------------------------------------- K-means


def kmeans(
    ps: PointSet | np.ndarray,
    k: int,
    initial_centroids: np.ndarray | None = None,
    max_iter: int = 300,
) -> ClusterAssignment:
    """Lloyd's algorithm: nearest-mean assignment then mean update, until stable.

    An emptied cluster is reseeded at the point lying farthest from its own
    centroid. Default initial centroids are :func:`psk_alphabet`.
    """
    pts = _as_points(ps)
    n = len(pts)
    if n == 0:
        return _empty()
    if not 1 <= k <= n:
        raise ValueError(f"kmeans needs 1 <= k <= {n}, got k={k}")
    centroids = (psk_alphabet(k) if initial_centroids is None else np.array(initial_centroids, dtype=float)).copy()
    if centroids.shape != (k, 2):
        raise ValueError(f"expected {k} initial centroids")

    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _sq_dists(pts, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        centroids = _member_means(pts, labels, k)
        for c in np.flatnonzero(counts == 0):
            own = np.sum((pts - centroids[labels]) ** 2, axis=1)
            own[np.bincount(labels, minlength=k)[labels] <= 1] = -1.0  # never strip a singleton
            j = int(np.argmax(own))
            labels[j] = c
            centroids = _member_means(pts, labels, k)

    roles = np.full(n, PointRole.CORE, dtype=np.int8)
    return ClusterAssignment(
        labels, _member_means(pts, labels, k), roles, n_iterations=iterations, inertia_history=history
    )


def modified_dbscan(
    ps: PointSet | np.ndarray,
    eps: float,
    min_points: int,
    k: int,
    index: DensityIndex | None = None,
    max_iter: int = 300,
    merge: NoiseMerge = NoiseMerge.NEAREST_DENSITY,
) -> ClusterAssignment:
    """DBSCAN followed by K-means on the points it left as noise.

    With ``NoiseMerge.NEAREST_DENSITY`` each noise point joins the density
    cluster whose centroid is nearest to the K-means centroid it was assigned
    to, so the cluster count stays that of the density stage. With
    ``NoiseMerge.KMEANS`` the noise points keep their K-means clusters, which
    are appended after the density clusters. If DBSCAN finds nothing, plain
    K-means over all points is returned with ``fallback`` set.
    """
    pts = _as_points(ps)
    base = dbscan(pts, eps, min_points, index=index)
    if len(pts) == 0:
        return base
    if base.n_clusters == 0:
        result = kmeans(pts, min(k, len(pts)), max_iter=max_iter)
        result.fallback = True
        result.density_clusters = 0
        return result
    noise = np.flatnonzero(base.labels == NOISE)
    if noise.size == 0:
        return base

    noise_pts = pts[noise]
    if noise.size >= k:
        init = base.centroids if base.n_clusters == k else psk_alphabet(k)
        second = kmeans(noise_pts, k, init, max_iter=max_iter)
        stage_centroids, stage_labels = second.centroids, second.labels
    else:
        stage_centroids, stage_labels = noise_pts, np.arange(noise.size)
    labels = base.labels.copy()
    if merge is NoiseMerge.KMEANS:
        _, compact = np.unique(stage_labels, return_inverse=True)
        labels[noise] = base.n_clusters + compact
        n_total = base.n_clusters + int(compact.max()) + 1
    else:
        target = np.argmin(_sq_dists(stage_centroids, base.centroids), axis=1)
        labels[noise] = target[stage_labels]
        n_total = base.n_clusters
    roles = base.roles.copy()
    roles[noise] = PointRole.BORDER
    centroids = _member_means(pts, labels, n_total)
    return ClusterAssignment(labels, centroids, roles, density_clusters=base.n_clusters)


# --------------------------------------------------------------------------- fuzzy C-means


def _fcm_memberships(pts: np.ndarray, centers: np.ndarray, m: float) -> np.ndarray:
    d = np.sqrt(_sq_dists(pts, centers))
    u = np.empty_like(d)
    hit = d <= 1e-15
    singular = hit.any(axis=1)
    if singular.any():
        first = np.argmax(hit[singular], axis=1)
        u[singular] = 0.0
        u[np.flatnonzero(singular), first] = 1.0
    regular = ~singular
    if regular.any():
        dr = d[regular]
        # u_ij = 1 / sum_k (d_ij/d_kj)^(2/(m-1)), scaled by the row minimum for stability
        ratio = (dr / dr.min(axis=1, keepdims=True)) ** (-2.0 / (m - 1))
        u[regular] = ratio / ratio.sum(axis=1, keepdims=True)
    return u


def fuzzy_cmeans(
    ps: PointSet | np.ndarray,
    c: int,
    m: float = 2.0,
    tol: float = 1e-5,
    max_iter: int = 300,
    initial_centroids: np.ndarray | None = None,
) -> ClusterAssignment:
    """Fuzzy C-means with hard labels taken from the largest membership.

    ``memberships`` has shape ``(n_points, c)``; ``centroids`` are the plain
    means of the hard-labelled members.
    """
    if c < 1 or m <= 1:
        raise ValueError("fuzzy_cmeans needs c >= 1 and m > 1")
    pts = _as_points(ps)
    if len(pts) == 0:
        return _empty()
    centers = psk_alphabet(c) if initial_centroids is None else np.array(initial_centroids, dtype=float)
    u = _fcm_memberships(pts, centers, m)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w = u**m
        centers = (w.T @ pts) / np.maximum(w.sum(axis=0), 1e-300)[:, None]
        u_new = _fcm_memberships(pts, centers, m)
        change = float(np.max(np.abs(u_new - u)))
        u = u_new
        if change < tol:
            break
    labels, n_clusters = _compact(np.argmax(u, axis=1))
    roles = np.full(len(pts), PointRole.CORE, dtype=np.int8)
    return ClusterAssignment(
        labels, _member_means(pts, labels, n_clusters), roles, n_iterations=iterations, memberships=u
    )


# --------------------------------------------------------------------------- hierarchical

_LINKAGE_METHODS = {"Average": "average", "Complete": "complete", "Ward": "ward"}


def hierarchical_cluster(
    ps: PointSet | np.ndarray,
    k: int,
    linkage: str = "Average",
    max_points: int = 4000,
) -> ClusterAssignment:
    """Agglomerative clustering cut at ``k`` clusters.

    Clouds larger than ``max_points`` are clustered on an evenly strided
    subsample; the remaining points join the nearest resulting centroid.
    """
    pts = _as_points(ps)
    n = len(pts)
    if n == 0:
        return _empty()
    if not 1 <= k <= n:
        raise ValueError(f"hierarchical_cluster needs 1 <= k <= {n}, got k={k}")
    method = _LINKAGE_METHODS[getattr(linkage, "value", linkage)]
    if n == 1:
        labels = np.zeros(1, dtype=np.int64)
    else:
        sample = np.arange(n) if n <= max_points else np.linspace(0, n - 1, max_points).astype(np.int64)
        tree = hierarchy.linkage(pts[sample], method=method)
        sub = hierarchy.cut_tree(tree, n_clusters=min(k, len(sample))).ravel()
        if sample.size == n:
            labels = sub.astype(np.int64)
        else:
            centers = _member_means(pts[sample], sub, int(sub.max()) + 1)
            labels = np.argmin(_sq_dists(pts, centers), axis=1)
    labels, n_clusters = _compact(labels)
    roles = np.full(n, PointRole.CORE, dtype=np.int8)
    return ClusterAssignment(labels, _member_means(pts, labels, n_clusters), roles)


# --------------------------------------------------------------------------- decisions


def clusters_to_decisions(
    assignment: ClusterAssignment, ps: PointSet, symbols: np.ndarray
) -> np.ndarray:
    """Replace clustered points by their (de-normalized) centroid.

    Noise points keep their own linear-equalized value ``symbols``.
    """
    symbols = np.asarray(symbols, dtype=complex).reshape(-1)
    decided = symbols.copy()
    clustered = assignment.labels >= 0
    if clustered.any():
        cents = assignment.centroids[assignment.labels[clustered]]
        decided[clustered] = (cents[:, 0] + 1j * cents[:, 1]) * ps.scale
    return decided


# --------------------------------------------------------------------------- grid equalizer

PILOT_LABEL = -2


@dataclass
class DecisionGrid:
    """Output of a clustering equalizer over a whole subcarrier grid.

    ``decided`` has the grid's shape with pilot columns untouched; ``labels``
    marks pilots with ``PILOT_LABEL`` and noise with ``NOISE``. Cluster labels
    are local to their population. ``cluster_counts`` holds one entry per
    clustering population.
    """

    decided: np.ndarray
    labels: np.ndarray
    cluster_counts: list[int]
    fallbacks: int = 0


def run_clusterer(
    eq: EqualizerConfig, ps: PointSet, index: DensityIndex | None = None
) -> ClusterAssignment:
    """Dispatch one population to the algorithm selected by ``eq.kind``."""
    kind = eq.kind
    n = len(ps)
    k = min(eq.k_clusters, n) if n else eq.k_clusters
    if kind is EqualizerKind.DBSCAN_CONVENTIONAL:
        return dbscan(ps, eq.epsilon, eq.min_points, index=index)
    if kind is EqualizerKind.DBSCAN_MODIFIED:
        return modified_dbscan(ps, eq.epsilon, eq.min_points, eq.k_clusters, index=index,
                               max_iter=eq.max_iterations, merge=eq.noise_merge)
    if kind is EqualizerKind.KMEANS:
        return kmeans(ps, k, max_iter=eq.max_iterations)
    if kind is EqualizerKind.FUZZY_CMEANS:
        return fuzzy_cmeans(ps, eq.k_clusters, eq.fcm_fuzzifier, eq.fcm_tolerance, eq.max_iterations)
    if kind is EqualizerKind.HIERARCHICAL:
        return hierarchical_cluster(ps, k, eq.linkage)
    raise ValueError(f"{kind.value} is not a clustering equalizer")


def populations(grid: np.ndarray, n_pilot: int, scope: ClusterScope) -> list[tuple[np.ndarray, np.ndarray]]:
    """(row indices, column indices) of the data symbols in each population."""
    n_sc, n_sym = grid.shape
    cols = np.arange(n_pilot, n_sym)
    if scope is ClusterScope.POOLED:
        rr, cc = np.meshgrid(np.arange(n_sc), cols, indexing="ij")
        return [(rr.ravel(), cc.ravel())]
    return [(np.full(cols.size, k), cols) for k in range(n_sc)]


def cluster_equalize(
    grid: np.ndarray,
    n_pilot: int,
    eq: EqualizerConfig,
    indexes: dict[int, DensityIndex] | None = None,
) -> DecisionGrid:
    """Cluster the data symbols of a linear-equalized grid and decide symbols.

    ``indexes`` caches a :class:`DensityIndex` per population across calls that
    share the same grid, which is how parameter sweeps avoid recounting.
    """
    decided = grid.copy()
    labels = np.full(grid.shape, PILOT_LABEL, dtype=np.int64)
    counts: list[int] = []
    fallbacks = 0
    for pop_id, (rows, cols) in enumerate(populations(grid, n_pilot, eq.scope)):
        symbols = grid[rows, cols]
        ps = PointSet.from_symbols(symbols, np.column_stack([rows, cols]))
        index = None
        if indexes is not None and eq.kind in (EqualizerKind.DBSCAN_CONVENTIONAL, EqualizerKind.DBSCAN_MODIFIED):
            index = indexes.get(pop_id)
            if index is None:
                index = indexes[pop_id] = DensityIndex(ps)
        assignment = run_clusterer(eq, ps, index)
        decided[rows, cols] = clusters_to_decisions(assignment, ps, symbols)
        labels[rows, cols] = assignment.labels
        counts.append(assignment.reported_clusters)
        fallbacks += int(assignment.fallback)
    return DecisionGrid(decided, labels, counts, fallbacks)
