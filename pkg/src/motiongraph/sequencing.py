"""Recovering a global image ordering from reconstructed geometry.

Per-image shapes are compared either by Euclidean distance or by trajectory
arc length; the arc variant registers the capture streams against each other
with monotone dynamic time warping and accumulates polyline lengths, which
keeps repeating or self-intersecting motions from collapsing temporally
distant frames onto each other. A line embedding of the resulting distance
matrix (classical MDS, the Fiedler vector of a similarity graph, or an
approximate shortest Hamiltonian path) then orders the images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .geometry import SceneObservations, StructureMatrix

__all__ = [
    "DistanceMatrix",
    "LineEmbedding",
    "Stream",
    "DtwAssignment",
    "euclidean_distance_matrix",
    "streams_from_scene",
    "dtw_register",
    "arc_distance_matrix",
    "embed_mds",
    "embed_spectral_rank",
    "embed_shp",
    "order_from_embedding",
    "kendall_tau",
    "global_sequencing_prior",
]


@dataclass
class DistanceMatrix:
    """Symmetric nonnegative pairwise proximity with zero diagonal."""

    values: np.ndarray
    kind: str = "euclidean"

    def __post_init__(self):
        z = np.array(self.values, dtype=float)
        if z.ndim != 2 or z.shape[0] != z.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.isfinite(z).all() or z.min() < 0:
            raise ValueError("distances must be finite and nonnegative")
        if np.abs(z - z.T).max() > 1e-9 * max(1.0, float(z.max())):
            raise ValueError("distance matrix must be symmetric")
        z = (z + z.T) / 2.0
        np.fill_diagonal(z, 0.0)
        if self.kind not in ("euclidean", "arc"):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        self.values = z

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class LineEmbedding:
    """Scalar per image; sorting the values yields an ordering."""

    values: np.ndarray
    method: str = "mds"

    def __post_init__(self):
        f = np.array(self.values, dtype=float)
        if f.ndim != 1 or not np.isfinite(f).all():
            raise ValueError("embedding must be a finite vector")
        self.values = f


@dataclass
class Stream:
    """One capture stream: global image indices in temporal order and their shapes."""

    indices: np.ndarray
    shapes: np.ndarray

    def __post_init__(self):
        self.indices = np.array(self.indices, dtype=int)
        self.shapes = np.array(self.shapes, dtype=float)
        if self.shapes.ndim != 2 or self.shapes.shape[0] != self.indices.size:
            raise ValueError("stream shapes must be (len(indices), dim)")

    def __len__(self) -> int:
        return self.indices.size


@dataclass
class DtwAssignment:
    """Per ordered stream pair (a, b): the segment of b assigned to each sample of a."""

    segments: dict = field(default_factory=dict)
    degenerate: set = field(default_factory=set)

    def check_monotone(self):
        for key, seg in self.segments.items():
            if np.any(np.diff(seg) < 0):
                raise AssertionError(f"non-monotone assignment for pair {key}")


def euclidean_distance_matrix(x: StructureMatrix) -> DistanceMatrix:
    """Pairwise Euclidean distances between flattened 3P shape vectors."""
    rows = x.as_rows()
    sq = np.einsum("ij,ij->i", rows, rows)
    d2 = sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T
    return DistanceMatrix(np.sqrt(np.clip(d2, 0.0, None)), "euclidean")


def streams_from_scene(scene: SceneObservations, x: StructureMatrix) -> list[Stream] | None:
    """Per-stream ordered shape lists built from scene metadata; None without streams."""
    groups = scene.stream_groups()
    if groups is None:
        return None
    rows = x.as_rows()
    return [Stream(g, rows[g]) for g in groups]


def _point_segment_distances(points: np.ndarray, polyline: np.ndarray):
    """Distances of each point to each segment of a polyline, plus the
    normalized foot position t in [0, 1] along the segment."""
    starts = polyline[:-1]
    vecs = polyline[1:] - starts
    seg_sq = np.einsum("sd,sd->s", vecs, vecs)
    seg_sq = np.where(seg_sq > 0, seg_sq, 1.0)
    t = np.einsum("isd,sd->is", points[:, None, :] - starts[None, :, :], vecs) / seg_sq
    np.clip(t, 0.0, 1.0, out=t)
    feet = starts[None, :, :] + t[..., None] * vecs[None, :, :]
    dist = np.linalg.norm(points[:, None, :] - feet, axis=2)
    return dist, t


def dtw_register(streams: list[Stream]) -> DtwAssignment:
    """Monotone registration of every ordered stream pair.

    Each sample of stream a is assigned to one line segment of stream b,
    minimizing the summed point-to-segment distance subject to assignments
    never going backwards. Among equal-cost assignments the lexicographically
    smallest is returned. Streams with fewer than two samples cannot form
    segments; their samples are matched to the single point and flagged.
    """
    out = DtwAssignment()
    for bi, stream in enumerate(streams):
        if len(stream) < 2:
            out.degenerate.add(bi)
    for ai, a in enumerate(streams):
        for bi, b in enumerate(streams):
            if ai == bi:
                continue
            if bi in out.degenerate:
                out.segments[(ai, bi)] = np.zeros(len(a), dtype=int)
                continue
            dist, _ = _point_segment_distances(a.shapes, b.shapes)
            na, ns = dist.shape
            best = np.empty_like(dist)
            best[na - 1] = dist[na - 1]
            for i in range(na - 2, -1, -1):
                suffix = np.minimum.accumulate(best[i + 1][::-1])[::-1]
                best[i] = dist[i] + suffix
            seg = np.empty(na, dtype=int)
            j = 0
            for i in range(na):
                window = best[i, j:]
                j = j + int(np.flatnonzero(window <= window.min())[0])
                seg[i] = j
            out.segments[(ai, bi)] = seg
    return out


def _cumulative_lengths(shapes: np.ndarray) -> np.ndarray:
    if shapes.shape[0] < 2:
        return np.zeros(shapes.shape[0])
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(shapes, axis=0), axis=1))])


def arc_distance_matrix(streams: list[Stream], assignment: DtwAssignment) -> DistanceMatrix:
    """Trajectory arc-length proximity across all images of all streams.

    Within a stream the distance is the summed segment length between the two
    samples. Across streams, a sample of a reaches b at the closest point of
    its assigned segment and continues along b's polyline; the two directed
    values are averaged to make the matrix symmetric.
    """
    n_total = sum(len(s) for s in streams)
    size = 1 + max(int(s.indices.max()) for s in streams) if n_total else 0
    if size != n_total:
        raise ValueError("stream indices must cover 0..N-1 exactly once")
    directed = np.zeros((n_total, n_total))
    counts = np.zeros((n_total, n_total))
    cums = [_cumulative_lengths(s.shapes) for s in streams]

    for si, s in enumerate(streams):
        intra = np.abs(cums[si][:, None] - cums[si][None, :])
        directed[np.ix_(s.indices, s.indices)] += intra
        counts[np.ix_(s.indices, s.indices)] += 1.0

    for (ai, bi), seg in assignment.segments.items():
        a, b = streams[ai], streams[bi]
        if bi in assignment.degenerate:
            reach = np.linalg.norm(a.shapes - b.shapes[0], axis=1)
            foot_pos = np.zeros(len(a))
        else:
            dist, t = _point_segment_distances(a.shapes, b.shapes)
            rows = np.arange(len(a))
            reach = dist[rows, seg]
            starts = b.shapes[seg]
            vecs = b.shapes[seg + 1] - starts
            foot_pos = cums[bi][seg] + t[rows, seg] * np.linalg.norm(vecs, axis=1)
        inter = reach[:, None] + np.abs(cums[bi][None, :] - foot_pos[:, None])
        directed[np.ix_(a.indices, b.indices)] += inter
        counts[np.ix_(a.indices, b.indices)] += 1.0

    values = directed / np.where(counts > 0, counts, 1.0)
    values = (values + values.T) / 2.0
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values, "arc")


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[int(np.argmax(np.abs(v)))] < 0 else v


def embed_mds(z: DistanceMatrix) -> LineEmbedding:
    """Classical MDS restricted to the leading coordinate.

    Double-centers -Z*Z/2 and returns the top eigenvector scaled by the
    square root of its eigenvalue. The embedding's orientation is arbitrary.
    """
    n = z.n
    sq = z.values**2
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * j @ sq @ j
    vals, vecs = np.linalg.eigh(b)
    top = float(vals[-1])
    if z.values.max() <= 0 or top <= 1e-12 * max(1.0, float(np.abs(vals).max())):
        raise ValueError("degenerate distances")
    f = np.sqrt(top) * _fix_sign(vecs[:, -1])
    return LineEmbedding(f, "mds")


def embed_spectral_rank(z: DistanceMatrix) -> LineEmbedding:
    """Fiedler-vector ordering of a Gaussian similarity graph.

    Similarities use a median-bandwidth Gaussian kernel on the distances; the
    eigenvector of the second-smallest Laplacian eigenvalue is rescaled so its
    range matches the largest distance (for use as a spectral prior).
    """
    off = z.values[np.triu_indices(z.n, 1)]
    nonzero = off[off > 0]
    if nonzero.size == 0:
        raise ValueError("degenerate distances")
    sigma = float(np.median(nonzero))
    sim = np.exp(-(z.values**2) / (2.0 * sigma * sigma))
    np.fill_diagonal(sim, 0.0)
    lap = np.diag(sim.sum(axis=1)) - sim
    vals, vecs = np.linalg.eigh(lap)
    if vals[1] <= 1e-12 * max(1.0, float(vals[-1])):
        raise ValueError("disconnected sequencing graph")
    f = _fix_sign(vecs[:, 1])
    f = f - f.min()
    extent = f.max()
    if extent > 0:
        f *= float(z.values.max()) / extent
    return LineEmbedding(f, "sr")


def _path_length(order: np.ndarray, z: np.ndarray) -> float:
    return float(z[order[:-1], order[1:]].sum())


def embed_shp(z: DistanceMatrix) -> LineEmbedding:
    """Approximate shortest Hamiltonian path embedding.

    Builds a nearest-neighbor path starting from the most distant pair, then
    2-opts until no reversal shortens it. Each image's value is its cumulative
    position along the final path.
    """
    n = z.n
    if n < 2:
        raise ValueError("need at least two images")
    values = z.values
    start = int(np.argmax(values) // n)
    path = [start]
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    while len(path) < n:
        dist = values[path[-1]].copy()
        dist[visited] = np.inf
        nxt = int(np.argmin(dist))
        path.append(nxt)
        visited[nxt] = True
    path = np.array(path, dtype=int)

    improve_tol = 1e-12 * max(1.0, float(values.max()))
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                if i == 0 and j == n - 1:
                    continue  # full reversal never changes a path's length
                removed = added = 0.0
                if i > 0:
                    removed += values[path[i - 1], path[i]]
                    added += values[path[i - 1], path[j]]
                if j < n - 1:
                    removed += values[path[j], path[j + 1]]
                    added += values[path[i], path[j + 1]]
                if added < removed - improve_tol:
                    path[i : j + 1] = path[i : j + 1][::-1]
                    improved = True
        # rescan from scratch after any change; n is small in practice

    f = np.zeros(n)
    cum = 0.0
    for k in range(1, n):
        cum += values[path[k - 1], path[k]]
        f[path[k]] = cum
    return LineEmbedding(f, "shp")


def order_from_embedding(f: LineEmbedding) -> np.ndarray:
    """Image indices sorted by embedding value."""
    return np.argsort(f.values, kind="stable")


def kendall_tau(order_a, order_b) -> float:
    """Kendall tau-b between two orderings of the same images."""
    a = np.asarray(order_a, dtype=int)
    b = np.asarray(order_b, dtype=int)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("orderings must share a length of at least 2")
    if not np.array_equal(np.sort(a), np.sort(b)):
        raise ValueError("orderings must be permutations of the same indices")
    rank_a = np.empty(a.size, dtype=int)
    rank_b = np.empty(b.size, dtype=int)
    rank_a[a] = np.arange(a.size)
    rank_b[b] = np.arange(b.size)
    return float(stats.kendalltau(rank_a, rank_b).statistic)


def global_sequencing_prior(
    x: StructureMatrix,
    streams: list[Stream] | None = None,
    method: str = "mds",
    kind: str = "euclidean",
) -> LineEmbedding:
    """Distance matrix -> embedding composition used as the sequencing prior."""
    if kind == "arc":
        if streams is None:
            raise ValueError("stream metadata required for arc distances")
        z = arc_distance_matrix(streams, dtw_register(streams))
    elif kind == "euclidean":
        z = euclidean_distance_matrix(x)
    else:
        raise ValueError(f"unknown distance kind {kind!r}")
    if z.values.max() <= 0:
        raise ValueError("degenerate distances")
    embedders = {"mds": embed_mds, "sr": embed_spectral_rank, "shp": embed_shp}
    if method not in embedders:
        raise ValueError(f"unknown embedding method {method!r}")
    return embedders[method](z)
