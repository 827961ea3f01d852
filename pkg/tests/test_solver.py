"""Damped least-squares engine, single and batched."""

import numpy as np
import pytest

from scenelift.solver import LMResult, lm_batch, lm_minimize


def rosenbrock_residual(x):
    return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])


def rosenbrock_jacobian(x):
    return np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])


class TestLmMinimize:
    def test_rosenbrock_from_standard_start(self):
        res = lm_minimize(rosenbrock_residual, rosenbrock_jacobian, [-1.2, 1.0])
        assert isinstance(res, LMResult)
        assert res.converged
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-6)
        assert res.objective <= 1e-12

    def test_linear_least_squares_matches_normal_equations(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(12, 4))
        b = rng.normal(size=12)
        res = lm_minimize(lambda x: a @ x - b, lambda x: a, np.zeros(4))
        want = np.linalg.solve(a.T @ a, a.T @ b)
        assert res.converged
        assert np.allclose(res.x, want, atol=1e-9)
        assert res.objective == pytest.approx(0.5 * np.sum((a @ want - b) ** 2), rel=1e-9)

    def test_starting_at_the_optimum_takes_no_iterations(self):
        res = lm_minimize(rosenbrock_residual, rosenbrock_jacobian, [1.0, 1.0])
        assert res.converged
        assert res.iterations == 0
        assert res.objective == 0.0

    def test_non_finite_initial_residual_raises(self):
        with pytest.raises(ValueError):
            lm_minimize(lambda x: np.array([np.nan]), lambda x: np.zeros((1, 1)), [0.0])

    def test_iteration_cap_is_respected(self):
        res = lm_minimize(rosenbrock_residual, rosenbrock_jacobian, [-1.2, 1.0],
                          max_iterations=2)
        assert not res.converged
        assert res.iterations == 2

    def test_trace_records_strictly_decreasing_objectives(self):
        trace = []
        lm_minimize(rosenbrock_residual, rosenbrock_jacobian, [-1.2, 1.0], trace=trace)
        objs = [e["objective"] for e in trace]
        assert len(objs) >= 2
        assert all(b < a for a, b in zip(objs, objs[1:]))
        assert all(e["problem"] == 0 for e in trace)


class TestLmBatch:
    def test_independent_bowls_converge_to_their_own_centers(self):
        centers = np.array([[1.0, -2.0], [3.0, 0.5], [-4.0, 4.0]])

        def rfn(xs, idx):
            r = xs - centers[idx]
            return r, np.zeros(len(xs)), np.ones(len(xs), dtype=bool)

        def jfn(xs, idx):
            return np.broadcast_to(np.eye(2), (len(xs), 2, 2)).copy()

        x, f, conv, iters = lm_batch(rfn, jfn, np.zeros((3, 2)))
        assert conv.all()
        assert np.allclose(x, centers, atol=1e-6)
        assert np.all(f <= 1e-10)

    def test_additive_constant_flows_into_the_objective(self):
        def rfn(xs, idx):
            return xs.copy(), np.full(len(xs), 2.5), np.ones(len(xs), dtype=bool)

        def jfn(xs, idx):
            return np.broadcast_to(np.eye(1), (len(xs), 1, 1)).copy()

        x, f, conv, _ = lm_batch(rfn, jfn, np.array([[3.0]]))
        assert conv[0]
        assert x[0, 0] == pytest.approx(0.0, abs=1e-8)
        assert f[0] == pytest.approx(2.5, abs=1e-10)

    def test_invalid_initial_problem_finishes_immediately(self):
        def rfn(xs, idx):
            valid = np.asarray(idx) != 0
            return xs.copy(), np.zeros(len(xs)), valid

        def jfn(xs, idx):
            return np.broadcast_to(np.eye(2), (len(xs), 2, 2)).copy()

        x, f, conv, iters = lm_batch(rfn, jfn, np.ones((2, 2)))
        assert not conv[0] and np.isinf(f[0]) and iters[0] == 0
        assert conv[1] and f[1] <= 1e-10

    def test_lockstep_matches_one_at_a_time(self):
        # Batched trajectories must be identical to solving each problem
        # alone; per-problem damping state cannot leak across rows.
        rng = np.random.default_rng(6)
        mats = rng.normal(size=(4, 5, 3))
        rhss = rng.normal(size=(4, 5))

        def rfn(xs, idx):
            r = np.einsum("bmn,bn->bm", mats[idx], xs) - rhss[idx]
            return r, np.zeros(len(xs)), np.ones(len(xs), dtype=bool)

        def jfn(xs, idx):
            return mats[idx].copy()

        x_all, f_all, conv_all, it_all = lm_batch(rfn, jfn, np.zeros((4, 3)))
        for i in range(4):
            def rfn1(xs, idx, i=i):
                r = np.einsum("mn,bn->bm", mats[i], xs) - rhss[i]
                return r, np.zeros(len(xs)), np.ones(len(xs), dtype=bool)

            def jfn1(xs, idx, i=i):
                return np.broadcast_to(mats[i], (len(xs), 5, 3)).copy()

            x1, f1, conv1, it1 = lm_batch(rfn1, jfn1, np.zeros((1, 3)))
            assert np.array_equal(x1[0], x_all[i])
            assert f1[0] == f_all[i]
            assert it1[0] == it_all[i]
        assert conv_all.all()
