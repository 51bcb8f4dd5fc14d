#!/usr/bin/env python3
"""
test/core/simulator_test.py - Tests for the population simulator, worst-case costs and experiments
"""

import unittest
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.core.model import ModelParams, InitSpec
from src.core.numkit import TimeGrid, Trajectory, counter_stream
from src.core.consistency import solve_consistency
from src.core.strategy import StrategyFamily, GridMismatch
from src.core.simulator import (
    SimulationError, DegenerateFit, CostBreakdown, DisturbanceResponse, build_population,
    simulate_population, evaluate_cost, worst_case_f, fit_loglog, convergence_experiment,
    nash_gap_experiment, random_initial_mode, scaled_deviations, random_affine_deviations,
    offset_response_deviation, shifted_law, OFFSET_STEP,
)


def base_params(**changes) -> ModelParams:
    base = dict(A=0.5, B=1.0, G=0.25, Q=1.0, Gamma=0.8, R=1.5, H=0.0, gamma=1.0,
                T=1.3, D=0.3, eta=1.0, m0=1.0)
    base.update(changes)
    return ModelParams.scalar(**base)


def solved(p: ModelParams, n_steps: int):
    grid = TimeGrid(p.T, n_steps)
    cs = solve_consistency(p, grid, validate_with_fixed_point=False)
    return grid, cs, StrategyFamily(p, cs, grid)


class TestPopulation(unittest.TestCase):
    """Population assembly and Euler-Maruyama runs"""

    @classmethod
    def setUpClass(cls):
        cls.p = base_params()
        cls.grid, cls.cs, cls.family = solved(cls.p, 200)
        cls.f = cls.family.base.f_hat

    def test_groups_by_initial_mean(self):
        """Agents with equal initial means share a law"""
        pop = build_population(self.p, self.family, InitSpec.deterministic([1.0, 1.0, 2.0]), 3)
        assert_array_equal(pop.which, [0, 0, 1])
        self.assertEqual(len(pop.laws), 2)

    def test_population_size_checked(self):
        """N must be positive"""
        with self.assertRaises(SimulationError):
            build_population(self.p, self.family, InitSpec.shared(), 0)

    def test_noiseless_reference_run_uses_mean_control(self):
        """Without noise every control equals u*"""
        p = self.p.replace(D=np.zeros((1, 1)))
        run = simulate_population(p, self.family.base, InitSpec.shared(), self.f, 4, 0, self.grid)
        assert_allclose(run.u_avg.values, self.cs.u_bar.values, atol=1e-6)
        assert_allclose(run.reference.values, 0.0)

    def test_same_seed_same_run(self):
        """Runs are reproducible from (seed, replication)"""
        a = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 3, 11, self.grid, 2)
        b = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 3, 11, self.grid, 2)
        assert_array_equal(a.paths.values, b.paths.values)
        c = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 3, 11, self.grid, 3)
        self.assertFalse(np.array_equal(a.paths.values, c.paths.values))

    def test_agent_stream_independent_of_population(self):
        """Agent 0 sees the same noise whatever the population size"""
        a = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 2, 5, self.grid)
        b = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 5, 5, self.grid)
        assert_allclose(a.reference.values[:, 0], b.reference.values[:, 0])
        assert_allclose(a.agent_controls(0), b.agent_controls(0))

    def test_state_realization(self):
        """The state realization feeds back on the realized state"""
        run = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 3, 1, self.grid,
                                  realization="state")
        self.assertEqual(run.realization, "state")
        law = self.family.base.control_law(self.p)
        assert_allclose(run.agent_controls(1)[7], law.control_from_state(7, run.agent_path(1)[7]))

    def test_unknown_realization(self):
        """Only reference and state are accepted"""
        with self.assertRaises(ValueError):
            simulate_population(self.p, self.family, InitSpec.shared(), self.f, 2, 0, self.grid,
                                realization="mixed")

    def test_grid_mismatch(self):
        """Disturbance must live on the simulation grid"""
        f = Trajectory.constant(TimeGrid(self.p.T, 100), np.zeros(1))
        with self.assertRaises(GridMismatch):
            simulate_population(self.p, self.family, InitSpec.shared(), f, 2, 0, self.grid)

    def test_columns(self):
        """Run export shows averages, disturbance and each agent"""
        run = simulate_population(self.p, self.family, InitSpec.shared(), self.f, 2, 0, self.grid)
        self.assertEqual(set(run.columns()), {"t", "x_avg", "u_avg", "f", "x0", "u0", "x1", "u1"})


class TestRealizedCost(unittest.TestCase):
    """Cost quadrature along a run"""

    @classmethod
    def setUpClass(cls):
        cls.p = base_params()
        cls.grid, cls.cs, cls.family = solved(cls.p, 200)
        cls.pop_run = simulate_population(cls.p, cls.family, InitSpec.shared(), cls.family.base.f_hat,
                                      3, 0, cls.grid)

    def test_parts_sum(self):
        """total is the sum of the parts"""
        cost = evaluate_cost(self.pop_run, self.p, 0)
        self.assertAlmostEqual(cost.total, cost.tracking + cost.effort + cost.disturbance_credit
                               + cost.terminal)
        self.assertEqual(CostBreakdown.from_parts(1.0, 2.0, -0.5, 0.0).total, 2.5)

    def test_credit_quadratic_in_f(self):
        """Doubling f multiplies the disturbance credit by four"""
        f = self.pop_run.f_used
        doubled = Trajectory(self.grid, 2.0 * f.values)
        a = evaluate_cost(self.pop_run, self.p, 1, f)
        b = evaluate_cost(self.pop_run, self.p, 1, doubled)
        self.assertAlmostEqual(b.disturbance_credit, 4.0 * a.disturbance_credit)
        self.assertEqual(a.tracking, b.tracking)

    def test_agent_range(self):
        """Unknown agents are rejected"""
        with self.assertRaises(SimulationError):
            evaluate_cost(self.pop_run, self.p, 3)


class TestWorstCase(unittest.TestCase):
    """Exact worst-case disturbance"""

    @classmethod
    def setUpClass(cls):
        # no coupling: a single agent is its own mean field
        cls.p = ModelParams.scalar(A=0.5, B=1.0, Q=1.0, R=1.5, gamma=0.5, T=1.0,
                                   D=0.3, eta=1.0, m0=1.0)
        cls.grid, cls.cs, cls.family = solved(cls.p, 400)

    def test_single_agent_matches_costate(self):
        """N = 1: f* is gamma times the mean-field costate"""
        wc = worst_case_f(self.p, self.family, InitSpec.shared(), 1, self.grid)
        self.assertTrue(wc.hessian_definite)
        self.assertLess(wc.hessian_max_eigenvalue, 0.0)
        assert_allclose(wc.f_cells[:, 0], self.p.gamma * self.cs.p.midpoints()[:, 0], atol=1e-4)

    def test_stationary(self):
        """The maximizer has a vanishing gradient"""
        wc = worst_case_f(self.p, self.family, InitSpec.shared(), 3, self.grid)
        self.assertLessEqual(wc.gradient_norm, 1e-8 * (1.0 + abs(wc.J_wo)) + 1e-8)
        self.assertGreater(wc.fluctuation, 0.0)
        self.assertEqual(wc.summary()["N"], 3)

    def test_maximizer_beats_perturbations(self):
        """Moving away from f* lowers the expected cost"""
        resp = DisturbanceResponse(self.p, self.grid)
        rng = counter_stream(0, 0, 0)
        b = rng.standard_normal(self.grid.n_steps)
        F = resp.maximize(b)
        value = 2.0 * b @ F + F @ resp.hessian @ F
        for _ in range(3):
            G = F + 0.1 * rng.standard_normal(F.shape)
            self.assertLess(2.0 * b @ G + G @ resp.hessian @ G, value)

    def test_indefinite_beyond_horizon(self):
        """Past the escape horizon the worst case is unbounded"""
        p = base_params(T=3.0)
        resp = DisturbanceResponse(p, TimeGrid(p.T, 300))
        self.assertFalse(resp.definite)
        self.assertGreater(resp.max_eigenvalue, 0.0)

    def test_state_realization_rejected(self):
        """Worst-case evaluation needs the reference realization"""
        with self.assertRaises(SimulationError):
            worst_case_f(self.p, self.family, InitSpec.shared(), 2, self.grid, realization="state")

    def test_agent_range(self):
        """The focal agent must be in the population"""
        with self.assertRaises(SimulationError):
            worst_case_f(self.p, self.family, InitSpec.shared(), 2, self.grid, agent=2)


class TestLogLogFit(unittest.TestCase):
    """Rate fitting"""

    def test_exact_power_law(self):
        """stat = 3/N has slope -1"""
        N = np.array([10, 20, 40, 80])
        fit = fit_loglog(N, 3.0 / N)
        self.assertAlmostEqual(fit.slope, -1.0)
        self.assertAlmostEqual(fit.r_squared, 1.0)
        self.assertAlmostEqual(fit.ci_low, fit.ci_high)
        self.assertEqual(fit.points, 4)

    def test_noisy_interval_contains_slope(self):
        """The confidence interval brackets the estimate"""
        N = np.array([10, 20, 40, 80, 160])
        stats = 2.0 / N * np.array([1.1, 0.9, 1.05, 0.95, 1.0])
        fit = fit_loglog(N, stats)
        self.assertLess(fit.ci_low, fit.slope)
        self.assertGreater(fit.ci_high, fit.slope)

    def test_drops_non_positive(self):
        """Zero statistics are skipped; fewer than 3 left is degenerate"""
        fit = fit_loglog([1, 2, 4, 8], [0.0, 1.0, 0.5, 0.25])
        self.assertEqual(fit.points, 3)
        with self.assertRaises(DegenerateFit):
            fit_loglog([1, 2, 4], [0.0, 1.0, 0.5])

    def test_length_mismatch(self):
        """N values and statistics must pair up"""
        with self.assertRaises(SimulationError):
            fit_loglog([1, 2, 3], [1.0, 2.0])


class TestExperiments(unittest.TestCase):
    """Convergence and Nash-gap experiments"""

    @classmethod
    def setUpClass(cls):
        cls.p = base_params()
        cls.grid, cls.cs, cls.family = solved(cls.p, 100)

    def test_noiseless_convergence_statistic_vanishes(self):
        """D = 0 with shared initial states has u^(N) = u*"""
        p = self.p.replace(D=np.zeros((1, 1)))
        grid, cs, family = solved(p, 100)
        report = convergence_experiment(p, family, InitSpec.shared(), grid, [2, 4, 8], 2, 0)
        for row in report.rows:
            self.assertLess(row["statistic"], 1e-10)

    def test_thread_count_does_not_change_results(self):
        """Rows are identical for 1 and 3 worker threads"""
        args = (self.p, self.family, InitSpec.shared(), self.grid, [2, 4, 8], 4, 7)
        one = convergence_experiment(*args, threads=1)
        three = convergence_experiment(*args, threads=3)
        self.assertEqual(one.rows, three.rows)

    def test_convergence_report_layout(self):
        """Rows carry the statistic and its uncertainty"""
        report = convergence_experiment(self.p, self.family, InitSpec.shared(), self.grid,
                                        [2, 4, 8], 3, 0)
        self.assertEqual([r["N"] for r in report.rows], [2, 4, 8])
        self.assertEqual(set(report.table()), {"N", "statistic", "std_error", "t_argmax",
                                               "mean_field_gap", "mean_field_std_error",
                                               "initial_offset"})
        self.assertEqual(report.metadata["replications"], 3)
        self.assertIn("fit", report.to_dict())

    def test_convergence_rate_is_one_over_n(self):
        """Equal initials: sup_t E|u^(N) - u*|^2 decays like 1/N"""
        report = convergence_experiment(self.p, self.family, InitSpec.shared(), self.grid,
                                        [8, 32, 128, 512], 32, 5)
        self.assertIsNotNone(report.fit)
        self.assertAlmostEqual(report.fit.slope, -1.0, delta=0.3)

    def test_initial_offset_plateau_is_quadratic(self):
        """A common initial offset leaves a plateau growing with its square"""
        plateau = {}
        for offset in (0.1, 0.2):
            init = InitSpec.shared(self.p.m0 + offset)
            report = convergence_experiment(self.p, self.family.base, init, self.grid,
                                            [128, 256, 512], 8, 5)
            plateau[offset] = report.rows[-1]["statistic"]
            self.assertAlmostEqual(report.rows[-1]["initial_offset"], offset)
        self.assertAlmostEqual(plateau[0.2] / plateau[0.1], 4.0, delta=1.0)

    def test_convergence_argument_checks(self):
        """Too few or unsorted N values are rejected"""
        with self.assertRaises(DegenerateFit):
            convergence_experiment(self.p, self.family, InitSpec.shared(), self.grid, [2, 4], 2, 0)
        with self.assertRaises(SimulationError):
            convergence_experiment(self.p, self.family, InitSpec.shared(), self.grid, [4, 2, 8], 2, 0)

    def test_self_deviation_gap_is_zero(self):
        """Deviating to one's own strategy gains nothing"""
        report = nash_gap_experiment(self.p, self.family, InitSpec.shared(), [2, 4], self.grid,
                                     deviations=["scaled"], scales=(0.1,))
        selfs = [g for g in report.gaps if g["deviation"] == "self"]
        self.assertEqual(len(selfs), 2)
        for g in selfs:
            self.assertEqual(g["gap"], 0.0)
        self.assertEqual(len(report.gaps), 2 * 3)
        for row in report.rows:
            self.assertGreaterEqual(row["eps_hat"], 0.0)
        self.assertIsNone(report.fit)

    def test_offset_response_beats_every_basis_shift(self):
        """The fitted shift is at least as good as zero and each single cosine shift"""
        pop = build_population(self.p, self.family, InitSpec.shared(), 4)
        law = pop.law_of(0)

        def J(dev):
            return worst_case_f(self.p, pop, InitSpec.shared(), 4, self.grid, 0, deviation=dev).J_wo

        best = J(offset_response_deviation(self.p, pop, InitSpec.shared(), self.grid, 0, modes=3))
        self.assertLessEqual(best, J(shifted_law(law, np.zeros((len(self.grid), 1)), "zero")) + 1e-10)
        t = self.grid.knots / self.p.T
        for j in range(3):
            for sign in (1.0, -1.0):
                shift = sign * OFFSET_STEP * np.cos(j * np.pi * t)[:, None]
                with self.subTest(mode=j, sign=sign):
                    self.assertLessEqual(best, J(shifted_law(law, shift, "single")) + 1e-10)

    def test_nash_gap_properties(self):
        """eps_hat >= 0, self gap exactly 0, and the gap shrinks from N = 2 to N = 32"""
        report = nash_gap_experiment(self.p, self.family, InitSpec.shared(), [2, 8, 32], self.grid,
                                     deviations=["exact_offset", "scaled"], scales=(0.05,),
                                     offset_modes=3)
        for g in report.gaps:
            if g["deviation"] == "self":
                self.assertEqual(g["gap"], 0.0)
            if g["deviation"] == "exact_offset":
                self.assertGreaterEqual(g["gap"], -1e-10)
        eps = [row["eps_hat"] for row in report.rows]
        self.assertTrue(all(e >= 0.0 for e in eps))
        self.assertGreater(eps[0], eps[-1])
        self.assertEqual(report.metadata["offset_modes"], 3)

    def test_best_response_deviation(self):
        """Best responses to pilot runs produce finite gaps"""
        report = nash_gap_experiment(self.p, self.family, InitSpec.shared(), [2], self.grid,
                                     deviations=["best_response"], replications=2, seed=3)
        br = [g for g in report.gaps if g["deviation"] == "best_response"][0]
        self.assertTrue(np.isfinite(br["gap"]))

    def test_unknown_deviation_family(self):
        """Deviation families are validated"""
        with self.assertRaises(SimulationError):
            nash_gap_experiment(self.p, self.family, InitSpec.shared(), [2], self.grid,
                                deviations=["bang_bang"])

    def test_deviation_builders(self):
        """Scaled deviations come in pairs; random affine ones are labelled"""
        law = self.family.base.control_law(self.p)
        scaled = scaled_deviations(law, (0.05, 0.2))
        assert_allclose([d.scale for d in scaled], [1.05, 0.95, 1.2, 0.8])
        affine = random_affine_deviations(self.p, self.family.base, 3, 0.05, counter_stream(0, 0, 1))
        self.assertEqual([d.label for d in affine], ["random_affine_0", "random_affine_1",
                                                     "random_affine_2"])

    def test_random_initial_mode(self):
        """Random initial states are drawn and recorded"""
        init = InitSpec.random([1.0], [[0.04]])
        report = random_initial_mode(self.p, self.family, init, self.grid, N_list=[2, 4, 8],
                                     replications=2, seed=0)
        self.assertTrue(report.metadata["random_initial_states"])
        with self.assertRaises(SimulationError):
            random_initial_mode(self.p, self.family, InitSpec.shared(), self.grid,
                                N_list=[2, 4, 8], replications=2, seed=0)


if __name__ == "__main__":
    unittest.main(verbosity=2)
