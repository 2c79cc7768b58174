"""Active-set solver for small dense convex QPs on a scaled simplex.

Solves   min 1/2 x^T Q x + c^T x   s.t.  sum(x) = s,  x >= 0,  x_i = 0 for
pinned indices. This is the per-row weight subproblem and the degree
subproblem of the alternating solver. The method is a primal active-set
iteration: solve the equality-constrained problem on the current support,
step to the first blocking bound when infeasible, and grow the support by
the most violated dual. Ties always break to the lowest index so identical
inputs give identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = ["SimplexQP", "QPResult", "solve_simplex_qp", "solve_simplex_qp_full"]

_SYM_TOL = 1e-9


@dataclass
class SimplexQP:
    """One simplex-constrained QP instance."""

    hessian: np.ndarray
    linear: np.ndarray
    fixed_zero: frozenset = field(default_factory=frozenset)
    sum_target: float = 1.0

    def __post_init__(self):
        q = np.array(self.hessian, dtype=float)
        c = np.array(self.linear, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or c.shape != (q.shape[0],):
            raise ValueError("hessian must be square and match the linear term")
        if not (np.isfinite(q).all() and np.isfinite(c).all()):
            raise ValueError("QP data must be finite")
        scale = max(1.0, float(np.abs(q).max()))
        if np.abs(q - q.T).max() > _SYM_TOL * scale:
            raise ValueError("hessian must be symmetric")
        if not self.sum_target > 0:
            raise ValueError("sum_target must be positive")
        self.hessian = (q + q.T) / 2.0
        self.linear = c
        self.fixed_zero = frozenset(int(i) for i in self.fixed_zero)

    @property
    def n(self) -> int:
        return self.hessian.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.hessian @ x + self.linear @ x)


class QPResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int


def _check_convex(q: np.ndarray):
    scale = max(1.0, float(np.abs(q).max()))
    shifted = q + (1e-8 * scale) * np.eye(q.shape[0])
    try:
        np.linalg.cholesky(shifted)
    except np.linalg.LinAlgError:
        raise ValueError("nonconvex subproblem") from None


def _equality_solve(q: np.ndarray, c: np.ndarray, support: np.ndarray, target: float):
    """Minimize on the support subject only to the sum constraint."""
    k = support.size
    sub = q[np.ix_(support, support)].copy()
    ridge = 1e-12 * max(1.0, float(np.abs(np.diag(sub)).max()))
    sub[np.diag_indices(k)] += ridge
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = sub
    kkt[:k, k] = -1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([-c[support], [target]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:k], float(sol[k])


def solve_simplex_qp_full(qp: SimplexQP, start=None) -> QPResult:
    """Solve the QP; also report convergence and the iteration count.

    The returned point always satisfies the constraints exactly (the support
    is renormalized to the target sum). When the iteration cap of 10 n is hit
    the best feasible iterate is returned with ``converged=False``.
    """
    n = qp.n
    free = np.array(sorted(set(range(n)) - qp.fixed_zero), dtype=int)
    if free.size == 0:
        raise ValueError("infeasible: every variable is pinned to zero")
    x = np.zeros(n)
    if free.size == 1:
        x[free[0]] = qp.sum_target
        return QPResult(x, True, 0)
    _check_convex(qp.hessian[np.ix_(free, free)])

    if start is not None:
        cand = np.asarray(start, dtype=float).copy()
        pinned_ok = all(abs(cand[i]) <= 1e-12 for i in qp.fixed_zero)
        if (
            cand.shape == (n,)
            and pinned_ok
            and cand[free].min() >= -1e-12
            and abs(cand.sum() - qp.sum_target) <= 1e-9 * qp.sum_target
        ):
            x[free] = np.clip(cand[free], 0.0, None)
            x[free] *= qp.sum_target / x[free].sum()
        else:
            start = None
    if start is None:
        x[free] = qp.sum_target / free.size

    q, c = qp.hessian, qp.linear
    grad_scale = max(1.0, float(np.abs(q).max() * qp.sum_target + np.abs(c).max()))
    tol = 1e-9 * grad_scale
    best_x = x.copy()
    best_obj = qp.objective(x)
    support = free[x[free] > 0].tolist()
    max_iter = 10 * n
    converged = False
    iterations = 0

    while iterations < max_iter:
        iterations += 1
        sup = np.array(support, dtype=int)
        x_eq, mu = _equality_solve(q, c, sup, qp.sum_target)
        if x_eq.min() >= -1e-12:
            x = np.zeros(n)
            x[sup] = np.clip(x_eq, 0.0, None)
            obj = qp.objective(x)
            if obj < best_obj:
                best_obj, best_x = obj, x.copy()
            grad = q @ x + c
            outside = np.array([j for j in free if j not in support], dtype=int)
            if outside.size:
                violation = mu - grad[outside]
                worst = float(violation.max())
                if worst > tol:
                    # lowest index among the most violated duals enters
                    enter = int(outside[np.flatnonzero(violation >= worst - 1e-15 * grad_scale)[0]])
                    support.append(enter)
                    support.sort()
                    continue
            converged = True
            break
        # step toward the equality minimizer until the first bound blocks
        cur = x[sup]
        delta = x_eq - cur
        blocking = np.flatnonzero(x_eq < -1e-12)
        alphas = cur[blocking] / (cur[blocking] - x_eq[blocking])
        alpha = float(alphas.min())
        leave_local = int(blocking[np.flatnonzero(alphas <= alpha + 1e-15)[0]])
        x_new = np.zeros(n)
        x_new[sup] = np.clip(cur + alpha * delta, 0.0, None)
        x_new[sup[leave_local]] = 0.0
        x = x_new
        obj = qp.objective(x)
        if obj < best_obj:
            best_obj, best_x = obj, x.copy()
        support.remove(int(sup[leave_local]))
        if not support:
            # numerical corner: restart from the best bound variable
            support = [int(free[np.argmin((q @ x + c)[free])])]

    if not converged:
        x = best_x
    x[np.abs(x) < 1e-15 * qp.sum_target] = 0.0
    total = x.sum()
    if total > 0:
        x *= qp.sum_target / total
    return QPResult(x, converged, iterations)


def solve_simplex_qp(qp: SimplexQP, start=None) -> np.ndarray:
    """Solve the QP and return only the minimizer."""
    return solve_simplex_qp_full(qp, start).x
