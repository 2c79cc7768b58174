import numpy as np
import pytest

from motiongraph.simplex_qp import SimplexQP, solve_simplex_qp, solve_simplex_qp_full


def simplex_grid(n, steps=100):
    """All grid points with coordinates k/steps summing to 1, as an (M, n) array."""
    if n == 1:
        return np.array([[steps]], dtype=np.int32) / steps
    blocks = []
    for k in range(steps + 1):
        rest = simplex_grid_int(steps - k, n - 1)
        first = np.full((rest.shape[0], 1), k, dtype=np.int32)
        blocks.append(np.hstack([first, rest]))
    return np.vstack(blocks) / steps


def simplex_grid_int(total, parts):
    if parts == 1:
        return np.array([[total]], dtype=np.int32)
    blocks = []
    for k in range(total + 1):
        rest = simplex_grid_int(total - k, parts - 1)
        first = np.full((rest.shape[0], 1), k, dtype=np.int32)
        blocks.append(np.hstack([first, rest]))
    return np.vstack(blocks)


def grid_minimum(qp, steps=100):
    """Brute-force minimum over the 1/steps-spaced simplex grid on free indices."""
    free = sorted(set(range(qp.n)) - qp.fixed_zero)
    pts = simplex_grid(len(free), steps) * qp.sum_target
    full = np.zeros((pts.shape[0], qp.n))
    full[:, free] = pts
    vals = 0.5 * np.einsum("mi,ij,mj->m", full, qp.hessian, full) + full @ qp.linear
    return float(vals.min())


def kkt_residual(qp, x):
    """Stationarity violation of a feasible point: deviation of support
    gradients from a shared multiplier, plus negative slack off support."""
    grad = qp.hessian @ x + qp.linear
    free = sorted(set(range(qp.n)) - qp.fixed_zero)
    support = [i for i in free if x[i] > 1e-12]
    mu = float(np.mean(grad[support]))
    res = max(abs(grad[i] - mu) for i in support)
    off = [i for i in free if i not in support]
    if off:
        res = max(res, max(mu - grad[i] for i in off))
    return max(res, 0.0)


def random_psd_qp(rng, n, fixed=frozenset()):
    m = rng.normal(size=(n, n))
    q = m @ m.T / n
    c = rng.normal(size=n)
    return SimplexQP(q, c, fixed, 1.0)


class TestBasicContracts:
    def test_unique_feasible_point(self, rng):
        qp = SimplexQP(rng.normal(size=(2, 2)) * 0.0 + np.eye(2) * 3.0, rng.normal(size=2), frozenset([0]), 1.0)
        assert np.allclose(solve_simplex_qp(qp), [0.0, 1.0])

    def test_symmetric_minimum_on_simplex(self):
        qp = SimplexQP(np.eye(3), np.zeros(3), frozenset(), 1.0)
        assert np.allclose(solve_simplex_qp(qp), np.full(3, 1 / 3), atol=1e-12)

    def test_infeasible_when_all_pinned(self):
        qp = SimplexQP(np.eye(2), np.zeros(2), frozenset([0, 1]), 1.0)
        with pytest.raises(ValueError, match="infeasible"):
            solve_simplex_qp(qp)

    def test_nonconvex_rejected(self):
        q = np.diag([1.0, -5.0, 1.0])
        qp = SimplexQP(q, np.zeros(3), frozenset(), 1.0)
        with pytest.raises(ValueError, match="nonconvex"):
            solve_simplex_qp(qp)

    def test_asymmetric_hessian_rejected(self):
        q = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            SimplexQP(q, np.zeros(2), frozenset(), 1.0)

    def test_constraints_hold_exactly(self, rng):
        for k in range(20):
            qp = random_psd_qp(rng, int(rng.integers(2, 7)))
            x = solve_simplex_qp(qp)
            assert x.min() >= 0.0
            assert abs(x.sum() - qp.sum_target) <= 1e-12


class TestOptimality:
    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_matches_grid_oracle(self, n, rng):
        for _ in range(5):
            qp = random_psd_qp(rng, n)
            x = solve_simplex_qp(qp)
            assert qp.objective(x) <= grid_minimum(qp) + 1e-6
            assert kkt_residual(qp, x) < 1e-8

    def test_grid_oracle_with_pinned_variable(self, rng):
        qp = random_psd_qp(rng, 4, fixed=frozenset([2]))
        x = solve_simplex_qp(qp)
        assert x[2] == 0.0
        assert qp.objective(x) <= grid_minimum(qp) + 1e-6

    def test_linear_objective_reaches_vertex(self, rng):
        c = np.array([3.0, -1.0, 2.0, 0.5])
        qp = SimplexQP(np.zeros((4, 4)), c, frozenset(), 1.0)
        x = solve_simplex_qp(qp)
        assert np.allclose(x, [0.0, 1.0, 0.0, 0.0], atol=1e-9)


class TestDeterminismAndDescent:
    def test_identical_inputs_identical_outputs(self, rng):
        qp = random_psd_qp(rng, 5)
        a = solve_simplex_qp(qp)
        b = solve_simplex_qp(qp)
        assert np.array_equal(a, b)

    def test_objective_never_worse_than_start(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 6))
            qp = random_psd_qp(rng, n)
            start = rng.random(n)
            start /= start.sum()
            x = solve_simplex_qp(qp, start)
            assert qp.objective(x) <= qp.objective(start) + 1e-12

    def test_warm_start_agrees_with_cold_start(self, rng):
        qp = random_psd_qp(rng, 4)
        cold = solve_simplex_qp(qp)
        warm = solve_simplex_qp(qp, cold)
        assert np.abs(cold - warm).max() < 1e-9

    def test_reports_iterations(self, rng):
        qp = random_psd_qp(rng, 4)
        result = solve_simplex_qp_full(qp)
        assert result.converged
        assert result.iterations >= 1
