"""Alternating convex search over the weight, degree and structure blocks.

Each sweep minimizes the total cost exactly over W (one simplex QP per row,
rows are independent), then over the degree diagonal (one simplex QP), then
over the structure (one linear solve per tracked point). Every step is an
exact convex minimization of the shared objective, so the recorded cost is
non-increasing. An optional line-embedding prior replaces the structure with
a scalar embedding inside the W/D subproblems.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import SceneObservations, StructureMatrix, initialize_structure_details
from .laplacian import DegreeMatrix, LaplaceFactors, WeightMatrix
from .objective import (
    CostBreakdown,
    CostWeights,
    pairwise_sq_distances,
    ray_alignment_matrix,
    total_cost,
)
from .sequencing import LineEmbedding, global_sequencing_prior, streams_from_scene
from .simplex_qp import SimplexQP, solve_simplex_qp

__all__ = [
    "SolverConfig",
    "SolveResult",
    "IntraStreamPrior",
    "build_intra_stream_prior",
    "step_X",
    "step_W",
    "step_D",
    "solve",
]

THREADS_ENV = "MOTIONGRAPH_THREADS"


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the alternating solver; defaults follow the synthetic protocol."""

    weights: CostWeights = field(default_factory=CostWeights)
    max_iterations: int = 300
    convergence_rel_tol: float = 1e-6
    epsilon_degree: float | None = None  # default 1e-6 / N, resolved per scene
    w_prior_value: float = 0.05
    use_spectral_prior: bool = False
    embedding_method: str = "mds"
    distance_kind: str = "euclidean"
    ablate: frozenset = field(default_factory=frozenset)
    threads: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.convergence_rel_tol > 0:
            raise ValueError("convergence_rel_tol must be positive")
        if self.w_prior_value < 0:
            raise ValueError("w_prior_value must be nonnegative")
        if self.embedding_method not in ("mds", "sr", "shp"):
            raise ValueError(f"unknown embedding method {self.embedding_method!r}")
        if self.distance_kind not in ("euclidean", "arc"):
            raise ValueError(f"unknown distance kind {self.distance_kind!r}")
        bad = set(self.ablate) - {"s", "t", "r"}
        if bad:
            raise ValueError(f"unknown ablation terms {sorted(bad)}")
        object.__setattr__(self, "ablate", frozenset(self.ablate))


@dataclass
class IntraStreamPrior:
    """Small constant weights linking each frame to its stream neighbors.

    The optimized weight rows sum to 1 minus the prior mass so the effective
    W (variable plus prior) stays row-stochastic.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.min() < 0:
            raise ValueError("prior must be a square nonnegative matrix")
        self.values = v


def build_intra_stream_prior(scene: SceneObservations, value: float) -> IntraStreamPrior | None:
    """Prior with ``value`` at (i, j) for stream-adjacent frames; None without streams."""
    groups = scene.stream_groups()
    if groups is None or value <= 0:
        return None
    n = scene.n_images
    prior = np.zeros((n, n))
    for members in groups:
        for a, b in zip(members[:-1], members[1:]):
            prior[a, b] = value
            prior[b, a] = value
    return IntraStreamPrior(prior)


@dataclass
class SolveResult:
    structure: StructureMatrix
    factors: LaplaceFactors
    cost_history: list[CostBreakdown]
    iterations: int
    converged: bool
    embedding: LineEmbedding | None = None


def _rows_of(x_or_f) -> np.ndarray:
    if isinstance(x_or_f, StructureMatrix):
        return x_or_f.as_rows()
    values = np.asarray(getattr(x_or_f, "values", x_or_f), dtype=float)
    if values.ndim == 1:
        return values[:, None]
    return values


def step_X(
    scene: SceneObservations,
    factors: LaplaceFactors,
    w: CostWeights,
    spectral: bool = False,
    o_mask: np.ndarray | None = None,
    ablate: frozenset = frozenset(),
) -> StructureMatrix:
    """Exact minimizer of the cost over the structure with (W, D) fixed.

    Solves one 3N x 3N positive-definite system per tracked point; the
    convergence term is constant in X and the locality term drops when a
    spectral prior is active.
    """
    n, p = scene.n_images, scene.n_points
    lap = factors.laplacian()
    k = np.zeros((n, n))
    if "s" not in ablate:
        k += (lap.T @ lap) / p
    if not spectral and "t" not in ablate and w.lambda1 > 0:
        k += (w.lambda1 / p) * factors.symmetrized_laplacian()
    base = np.kron(k, np.eye(3))
    coef = w.lambda2 / (n * p)
    rays = scene.ray_directions
    centers = scene.centers
    mask = scene.present if o_mask is None else (scene.present & o_mask)

    points = np.empty((n, p, 3))
    for pt in range(p):
        mat = base.copy()
        rhs = np.zeros(3 * n)
        for img in np.flatnonzero(mask[:, pt]):
            r = rays[img, pt]
            proj = np.eye(3) - np.outer(r, r)
            mat[3 * img : 3 * img + 3, 3 * img : 3 * img + 3] += coef * proj
            rhs[3 * img : 3 * img + 3] += coef * (proj @ centers[img])
        try:
            chol = np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            raise ValueError(f"unconstrained point {pt}: singular normal matrix") from None
        y = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        points[:, pt, :] = y.reshape(n, 3)
    return StructureMatrix(points)


def _weight_row_qp(i, rows, gram, sqd, d, w, n, p, prior_row, align_row, ablate):
    d_i = d[i]
    q_mat = np.zeros((n, n))
    c_vec = np.zeros(n)
    if "s" not in ablate:
        target = rows[i] - prior_row @ rows
        q_mat += (2.0 * d_i * d_i / p) * gram
        c_vec += (-2.0 * d_i * d_i / p) * (rows @ target)
    if "t" not in ablate and w.lambda1 > 0:
        c_vec += (w.lambda1 * d_i / p) * sqd[i]
    if "r" not in ablate and w.lambda3 > 0:
        coef = 2.0 * w.lambda3 * d_i * d_i / (n * p)
        q_mat[np.diag_indices(n)] += coef * align_row
        c_vec += coef * (align_row * prior_row)
    return q_mat, c_vec


def step_W(
    scene: SceneObservations,
    x_or_f,
    degree: DegreeMatrix,
    w: CostWeights,
    prior: IntraStreamPrior | None = None,
    warm: np.ndarray | None = None,
    ray_gram: np.ndarray | None = None,
    ablate: frozenset = frozenset(),
    threads: int = 1,
) -> WeightMatrix:
    """Exact per-row minimizer of the cost over W with (X or f, D) fixed."""
    n, p = scene.n_images, scene.n_points
    rows = _rows_of(x_or_f)
    gram = rows @ rows.T
    sqd = pairwise_sq_distances(rows)
    if ray_gram is None:
        need_r = "r" not in ablate and w.lambda3 > 0
        ray_gram = ray_alignment_matrix(scene) if need_r else np.zeros((n, n))
    prior_values = prior.values if prior is not None else np.zeros((n, n))
    d = degree.values

    def solve_row(i):
        prior_row = prior_values[i]
        target = 1.0 - prior_row.sum()
        if target <= 1e-12:
            raise ValueError(f"prior exceeds stochastic budget in row {i}")
        q_mat, c_vec = _weight_row_qp(i, rows, gram, sqd, d, w, n, p, prior_row, ray_gram[i], ablate)
        qp = SimplexQP(q_mat, c_vec, frozenset([i]), target)
        start = warm[i] if warm is not None else None
        return solve_simplex_qp(qp, start)

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = list(pool.map(solve_row, range(n)))
    else:
        solved = [solve_row(i) for i in range(n)]
    w_var = np.vstack(solved)
    return WeightMatrix(w_var + prior_values)


def step_D(
    scene: SceneObservations,
    x_or_f,
    weight: WeightMatrix,
    w: CostWeights,
    epsilon: float | None = None,
    warm: np.ndarray | None = None,
    ray_gram: np.ndarray | None = None,
    ablate: frozenset = frozenset(),
) -> DegreeMatrix:
    """Exact minimizer of the cost over the degree diagonal with (X or f, W) fixed.

    The lower bound epsilon (default 1e-6/N) is folded into the QP by a
    variable shift, so the returned degrees minimize the cost over
    {sum d = 1, d >= epsilon} exactly.
    """
    n, p = scene.n_images, scene.n_points
    if epsilon is None:
        epsilon = 1e-6 / n
    if not 0 <= epsilon * n < 1:
        raise ValueError("epsilon_degree must satisfy 0 <= N*epsilon < 1")
    rows = _rows_of(x_or_f)
    wv = weight.values
    quad = np.zeros(n)
    lin = np.zeros(n)
    if "s" not in ablate:
        resid = rows - wv @ rows
        quad += (2.0 / p) * np.einsum("ij,ij->i", resid, resid)
    if "t" not in ablate and w.lambda1 > 0:
        lin += (w.lambda1 / p) * np.einsum("ij,ij->i", wv, pairwise_sq_distances(rows))
    if "r" not in ablate and w.lambda3 > 0:
        if ray_gram is None:
            ray_gram = ray_alignment_matrix(scene)
        quad += (2.0 * w.lambda3 / (n * p)) * np.einsum("ij,ij->i", wv * wv, ray_gram)

    # shift d = e + epsilon so the degree floor is part of the feasible set
    shifted_target = 1.0 - n * epsilon
    lin_shifted = lin + quad * epsilon
    qp = SimplexQP(np.diag(quad), lin_shifted, frozenset(), shifted_target)
    start = None
    if warm is not None:
        start = np.clip(np.asarray(warm, dtype=float) - epsilon, 0.0, None)
        total = start.sum()
        start = start * (shifted_target / total) if total > 0 else None
    e = solve_simplex_qp(qp, start)
    d = e + epsilon
    d *= 1.0 / d.sum()
    np.clip(d, epsilon, None, out=d)
    return DegreeMatrix(d)


def _thread_count(config: SolverConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, config.threads)


def solve(
    scene: SceneObservations,
    config: SolverConfig | None = None,
    initial_structure: StructureMatrix | None = None,
) -> SolveResult:
    """Run alternating sweeps (W, D, X) until the total cost settles.

    Structure starts from pseudo-triangulation (or the supplied estimate) and
    degrees start uniform. With ``use_spectral_prior`` a line embedding is
    refreshed from the current structure before each sweep and substitutes the
    structure inside the W/D subproblems. The cost is recorded after every
    block step.
    """
    config = config or SolverConfig()
    n = scene.n_images
    weights = config.weights
    epsilon = config.epsilon_degree if config.epsilon_degree is not None else 1e-6 / n
    threads = _thread_count(config)
    ablate = config.ablate

    if initial_structure is not None:
        structure, o_mask = initial_structure, None
    else:
        structure, flags = initialize_structure_details(scene)
        o_mask = ~flags if flags.any() else None

    degree = DegreeMatrix.uniform(n)
    prior = build_intra_stream_prior(scene, config.w_prior_value)
    need_r = "r" not in ablate and weights.lambda3 > 0
    ray_gram = ray_alignment_matrix(scene) if need_r else np.zeros((n, n))

    history: list[CostBreakdown] = []
    w_var_prev: np.ndarray | None = None
    factors: LaplaceFactors | None = None
    embedding: LineEmbedding | None = None
    converged = False
    sweeps = 0
    prev_total: float | None = None
    s_scale = 0.0 if "s" in ablate else 1.0
    eff_weights = weights
    if "t" in ablate and weights.lambda1 != 0:
        eff_weights = replace(eff_weights, lambda1=0.0)
    if "r" in ablate and weights.lambda3 != 0:
        eff_weights = replace(eff_weights, lambda3=0.0)

    def record(fac):
        prior_arg = embedding if config.use_spectral_prior and embedding is not None else None
        history.append(
            total_cost(scene, structure, fac, eff_weights, prior_arg, s_scale, o_mask)
        )

    for sweeps in range(1, config.max_iterations + 1):
        if config.use_spectral_prior:
            streams = streams_from_scene(scene, structure)
            embedding = global_sequencing_prior(
                structure, streams, config.embedding_method, config.distance_kind
            )
            wd_input = embedding
        else:
            wd_input = structure

        weight = step_W(
            scene, wd_input, degree, weights, prior,
            warm=w_var_prev, ray_gram=ray_gram, ablate=ablate, threads=threads,
        )
        w_var_prev = weight.values - (prior.values if prior is not None else 0.0)
        factors = LaplaceFactors(degree, weight)
        record(factors)

        degree = step_D(
            scene, wd_input, weight, weights,
            epsilon=epsilon, warm=degree.values, ray_gram=ray_gram, ablate=ablate,
        )
        factors = LaplaceFactors(degree, weight)
        record(factors)

        structure = step_X(
            scene, factors, weights,
            spectral=config.use_spectral_prior, o_mask=o_mask, ablate=ablate,
        )
        o_mask = None  # fabricated-entry masking ends at the first structure update
        record(factors)

        total_now = history[-1].total
        if prev_total is not None:
            rel = abs(total_now - prev_total) / max(abs(prev_total), 1e-12)
            if rel < config.convergence_rel_tol:
                converged = True
                break
        prev_total = total_now

    return SolveResult(structure, factors, history, sweeps, converged, embedding)
