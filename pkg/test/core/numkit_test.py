#!/usr/bin/env python3
"""
test/core/numkit_test.py - Tests for the numerical kernels

Covers grids and trajectories, the guarded matrix exponential, RK4 in both
directions with escape detection, Euler-Maruyama and the noise streams.
"""

import unittest
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.core.numkit import (
    TimeGrid, Trajectory, WhiteNoisePath, EscapeTime, MatrixOverflow, NumkitError, ShapeError,
    NonFiniteError, as_matrix, as_vector, mat_exp, zoh_discretize, smallest_eigenvalue,
    trapezoid, ode_rk4, euler_maruyama, counter_stream, central_difference_residual,
)


class TestTimeGrid(unittest.TestCase):
    """Uniform time grid"""

    def test_knots_and_step(self):
        """Knots are evenly spaced between the endpoints"""
        grid = TimeGrid(2.0, 4)
        self.assertAlmostEqual(grid.dt, 0.5)
        assert_allclose(grid.knots, [0.0, 0.5, 1.0, 1.5, 2.0])
        self.assertEqual(len(grid), 5)

    def test_trapezoid_weights_sum_to_length(self):
        """Trapezoid weights integrate constants exactly"""
        grid = TimeGrid(1.3, 10)
        self.assertAlmostEqual(grid.trapezoid_weights.sum(), 1.3)

    def test_invalid_grids_rejected(self):
        """Too few steps or an empty interval raise ValueError"""
        with self.assertRaises(ValueError):
            TimeGrid(1.0, 1)
        with self.assertRaises(ValueError):
            TimeGrid(0.0, 10)
        with self.assertRaises(ValueError):
            TimeGrid(float("inf"), 10)

    def test_half_and_knot_index(self):
        """Midpoints map to odd half indices; off-grid times raise"""
        grid = TimeGrid(1.0, 10)
        self.assertEqual(grid.half_index(0.05), 1)
        self.assertEqual(grid.knot_index(0.3), 3)
        with self.assertRaises(ValueError):
            grid.knot_index(0.05)
        with self.assertRaises(ValueError):
            grid.half_index(0.0123)

    def test_refined_grid(self):
        """Refining doubles the number of steps on the same interval"""
        grid = TimeGrid(1.0, 10).refined()
        self.assertEqual(grid.n_steps, 20)
        self.assertEqual(grid.t1, 1.0)


class TestTrajectory(unittest.TestCase):
    """Knot-valued trajectories"""

    def setUp(self):
        self.grid = TimeGrid(1.0, 20)

    def test_values_are_read_only(self):
        """Stored values cannot be modified in place"""
        traj = Trajectory(self.grid, np.zeros(21))
        with self.assertRaises(ValueError):
            traj.values[0] = 1.0

    def test_wrong_length_rejected(self):
        """Value count must match the knot count"""
        with self.assertRaises(ShapeError):
            Trajectory(self.grid, np.zeros(20))

    def test_non_finite_rejected(self):
        """NaN values are refused"""
        values = np.zeros(21)
        values[3] = np.nan
        with self.assertRaises(NonFiniteError):
            Trajectory(self.grid, values)

    def test_midpoints_exact_for_cubics(self):
        """Four-point interpolation reproduces cubic polynomials"""
        t = self.grid.knots
        traj = Trajectory(self.grid, t ** 3 - 2 * t)
        mid = t[:-1] + 0.5 * self.grid.dt
        assert_allclose(traj.midpoints(), mid ** 3 - 2 * mid, atol=1e-12)

    def test_sampler_reads_knots_and_midpoints(self):
        """Sampler returns stored knots and interpolated midpoints"""
        t = self.grid.knots
        traj = Trajectory(self.grid, t ** 2)
        sample = traj.sampler()
        self.assertAlmostEqual(float(sample(0.5)), 0.25)
        self.assertAlmostEqual(float(sample(0.525)), 0.525 ** 2, places=12)

    def test_distance_and_sup_norm(self):
        """Distance is the sup over knots of the pointwise norm"""
        a = Trajectory.constant(self.grid, [1.0, 0.0])
        b = Trajectory.constant(self.grid, [1.0, 2.0])
        self.assertAlmostEqual(a.distance(b), 2.0)
        self.assertAlmostEqual(b.sup_norm(), np.sqrt(5.0))

    def test_distance_across_grids_rejected(self):
        """Trajectories on different grids are not comparable"""
        a = Trajectory.constant(self.grid, 0.0)
        b = Trajectory.constant(TimeGrid(1.0, 10), 0.0)
        with self.assertRaises(ShapeError):
            a.distance(b)

    def test_columns_naming(self):
        """Scalar, vector and matrix trajectories flatten to named columns"""
        self.assertEqual(list(Trajectory.constant(self.grid, [[1.0]]).columns("P")), ["P"])
        self.assertEqual(list(Trajectory.constant(self.grid, [1.0, 2.0]).columns("m")), ["m_0", "m_1"])
        self.assertEqual(list(Trajectory.constant(self.grid, np.eye(2)).columns("P")),
                         ["P_0_0", "P_0_1", "P_1_0", "P_1_1"])


class TestMatrixKernels(unittest.TestCase):
    """Matrix exponential, discretization and eigenvalues"""

    def test_coercions(self):
        """Scalars promote to 1x1 matrices and length-1 vectors"""
        self.assertEqual(as_matrix(2.0).shape, (1, 1))
        self.assertEqual(as_vector(2.0).shape, (1,))
        self.assertEqual(as_vector([[1.0], [2.0]]).shape, (2,))
        with self.assertRaises(ShapeError):
            as_matrix(np.zeros((2, 2, 2)))

    def test_mat_exp_scalar(self):
        """e^{at} for a 1x1 matrix"""
        assert_allclose(mat_exp([[0.5]], 2.0), [[np.e]])

    def test_mat_exp_rotation(self):
        """A skew generator gives a rotation"""
        E = mat_exp([[0.0, 1.0], [-1.0, 0.0]], np.pi / 2)
        assert_allclose(E, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-12)

    def test_mat_exp_overflow(self):
        """Huge exponents raise MatrixOverflow instead of returning inf"""
        with self.assertRaises(MatrixOverflow):
            mat_exp([[1.0]], 1000.0)

    def test_mat_exp_non_square(self):
        """Non-square input is a shape error"""
        with self.assertRaises(ShapeError):
            mat_exp(np.zeros((2, 3)))

    def test_zoh_scalar(self):
        """Zero-order hold of x' = a x + b u"""
        a, b, dt = -0.7, 2.0, 0.3
        E, F = zoh_discretize(np.array([[a]]), np.array([[b]]), dt)
        assert_allclose(E, [[np.exp(a * dt)]])
        assert_allclose(F, [[(np.exp(a * dt) - 1.0) / a * b]])

    def test_smallest_eigenvalue(self):
        """Smallest eigenvalue of a symmetric matrix; asymmetric input raises"""
        self.assertAlmostEqual(smallest_eigenvalue([[2.0, 1.0], [1.0, 2.0]]), 1.0)
        with self.assertRaises(NumkitError):
            smallest_eigenvalue([[1.0, 2.0], [0.0, 1.0]])

    def test_trapezoid(self):
        """Trapezoid rule integrates linear functions exactly"""
        grid = TimeGrid(2.0, 8)
        self.assertAlmostEqual(float(trapezoid(3.0 * grid.knots, grid)), 6.0)


class TestIntegrators(unittest.TestCase):
    """RK4 and Euler-Maruyama"""

    def test_rk4_forward_exponential(self):
        """x' = -x from 1 reaches e^{-1}"""
        grid = TimeGrid(1.0, 100)
        traj = ode_rk4(lambda t, x: -x, [1.0], grid)
        assert_allclose(traj.final, [np.exp(-1.0)], rtol=1e-9)

    def test_rk4_backward_starts_at_end(self):
        """Backward runs take their initial value at t1"""
        grid = TimeGrid(1.0, 100)
        traj = ode_rk4(lambda t, x: x, [1.0], grid, direction="backward")
        assert_allclose(traj.final, [1.0])
        assert_allclose(traj.initial, [np.exp(-1.0)], rtol=1e-9)

    def test_rk4_time_dependent_field(self):
        """x' = t integrates to t^2 / 2 exactly"""
        grid = TimeGrid(2.0, 10)
        traj = ode_rk4(lambda t, x: np.array([t]), [0.0], grid)
        assert_allclose(traj.final, [2.0], atol=1e-12)

    def test_rk4_escape(self):
        """x' = x^2 from 1 escapes before t = 1"""
        grid = TimeGrid(2.0, 400)
        with self.assertRaises(EscapeTime) as ctx:
            ode_rk4(lambda t, x: x ** 2, [1.0], grid)
        self.assertLess(ctx.exception.time, 1.1)

    def test_rk4_step_ratio_flags_unresolved_pole(self):
        """x' = x^2 on h = 0.5: the step into t = 1 has stages ~20 times 1 + |x|"""
        grid = TimeGrid(2.0, 4)
        with self.assertRaises(EscapeTime) as ctx:
            ode_rk4(lambda t, x: x ** 2, [1.0], grid, max_step_ratio=10.0)
        self.assertTrue(ctx.exception.unresolved)
        self.assertEqual(ctx.exception.knot, 2)
        self.assertAlmostEqual(ctx.exception.time, 1.0)

    def test_rk4_step_ratio_leaves_smooth_flows(self):
        """A resolved linear flow is untouched by the step ratio test"""
        grid = TimeGrid(1.0, 10)
        traj = ode_rk4(lambda t, x: -x, [1.0], grid, max_step_ratio=1.0)
        assert_allclose(traj.final, [np.exp(-1.0)], rtol=1e-5)

    def test_rk4_bad_direction(self):
        """Only forward and backward are accepted"""
        with self.assertRaises(ValueError):
            ode_rk4(lambda t, x: x, [1.0], TimeGrid(1.0, 10), direction="sideways")

    def test_euler_maruyama_zero_noise_matches_euler(self):
        """With zero increments the scheme is explicit Euler"""
        grid = TimeGrid(1.0, 50)
        noise = WhiteNoisePath.zeros(grid, 1)
        traj = euler_maruyama(lambda t, x: -x, [[1.0]], noise, [1.0], grid)
        assert_allclose(traj.final, [(1.0 - grid.dt) ** 50])

    def test_euler_maruyama_pure_noise(self):
        """With zero drift the path is the scaled noise sum"""
        grid = TimeGrid(1.0, 20)
        noise = WhiteNoisePath.sample(grid, 1, counter_stream(1, 0, 0), batch=(3,))
        traj = euler_maruyama(lambda t, x: 0.0 * x, [[0.5]], noise, np.zeros((3, 1)), grid)
        assert_allclose(traj.final, 0.5 * noise.increments.sum(axis=0))

    def test_euler_maruyama_shape_checks(self):
        """Diffusion and noise dimensions must match the state"""
        grid = TimeGrid(1.0, 20)
        noise = WhiteNoisePath.zeros(grid, 2)
        with self.assertRaises(ShapeError):
            euler_maruyama(lambda t, x: x, [[1.0]], noise, [1.0], grid)

    def test_euler_maruyama_escape_reports_agent(self):
        """Escaping batch members are named in the error"""
        grid = TimeGrid(1.0, 100)
        noise = WhiteNoisePath.zeros(grid, 1, batch=(2,))
        init = np.array([[0.0], [1.0]])
        with self.assertRaises(EscapeTime) as ctx:
            euler_maruyama(lambda t, x: 50.0 * x, [[0.0]], noise, init, grid, escape_threshold=1e6)
        self.assertEqual(ctx.exception.agent, 1)

    def test_central_difference_residual(self):
        """Exact solutions have a small residual"""
        grid = TimeGrid(1.0, 200)
        traj = Trajectory(grid, np.exp(-grid.knots)[:, None])
        self.assertLess(central_difference_residual(traj, lambda t, x: -x), 1e-8)


class TestNoiseStreams(unittest.TestCase):
    """Counter-keyed random streams"""

    def test_same_key_same_stream(self):
        """Equal keys reproduce the same draws"""
        a = counter_stream(7, 1, 3).standard_normal(5)
        b = counter_stream(7, 1, 3).standard_normal(5)
        assert_allclose(a, b)

    def test_different_keys_differ(self):
        """Changing any key component changes the stream"""
        base = counter_stream(7, 1, 3).standard_normal(5)
        for key in ((8, 1, 3), (7, 2, 3), (7, 1, 4)):
            self.assertFalse(np.allclose(base, counter_stream(*key).standard_normal(5)))

    def test_noise_variance_scales_with_dt(self):
        """Increments have variance dt"""
        grid = TimeGrid(1.0, 100)
        noise = WhiteNoisePath.sample(grid, 1, counter_stream(0, 0, 0), batch=(400,))
        self.assertAlmostEqual(noise.increments.var(), grid.dt, delta=0.1 * grid.dt)

    def test_noise_length_checked(self):
        """Noise must have one increment per step"""
        with self.assertRaises(ShapeError):
            WhiteNoisePath(TimeGrid(1.0, 10), np.zeros((9, 1)))


if __name__ == "__main__":
    unittest.main(verbosity=2)
