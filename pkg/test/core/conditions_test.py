#!/usr/bin/env python3
"""
test/core/conditions_test.py - Tests for the solvability condition checks

Regression data: the scalar datum (A=.5, B=1, G=.25, Q=1, Gamma=.8, R=1.5,
gamma=1) on several horizons, with A=-.5 for the stable long-horizon case
and Gamma=1 for the case where the tracking weight on the mean vanishes.
"""

import unittest
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.core.model import ModelParams, ModelValidationError
from src.core.numkit import TimeGrid
from src.core.riccati import solve_indefinite_K, closed_form_for
from src.core.conditions import (
    Verdict, ConditionError, NotApplicable, h1_determinants, check_h1_determinant,
    check_h1_riccati, check_h2, assemble_h2_form, h2_form_value, stochastic_h2_form_value,
    compute_Cq_bound, check_contraction, check_bvp_solvability, theta_tilde,
    build_conditions_report,
)


def base_params(**changes) -> ModelParams:
    base = dict(A=0.5, B=1.0, G=0.25, Q=1.0, Gamma=0.8, R=1.5, H=0.0, gamma=1.0,
                T=1.3, D=0.3, eta=1.0, m0=1.0)
    base.update(changes)
    return ModelParams.scalar(**base)


class TestVerdict(unittest.TestCase):
    """Verdict bookkeeping"""

    def test_decide_strict(self):
        """holds iff margin > threshold"""
        self.assertTrue(Verdict.decide(0.5, 0.0).holds)
        self.assertFalse(Verdict.decide(0.0, 0.0).holds)

    def test_not_applicable(self):
        """Not-applicable verdicts do not hold and serialize without a margin"""
        v = Verdict.not_applicable("H != 0")
        self.assertFalse(v.holds)
        self.assertEqual(v.to_dict(), {"applicable": False, "note": "H != 0"})

    def test_to_dict_drops_arrays(self):
        """Only scalar details are serialized"""
        doc = Verdict.decide(1.0, 0.0, values=np.ones(3), where=0.5).to_dict()
        self.assertNotIn("values", doc)
        self.assertEqual(doc["where"], 0.5)


class TestH1(unittest.TestCase):
    """Determinant and Riccati criteria"""

    def test_determinant_closed_form(self):
        """det = cosh(at) - Ah sinh(at)/a for scalar data"""
        p = base_params()
        grid = TimeGrid(p.T, 200)
        alpha = closed_form_for(p).alpha
        t = grid.knots
        expected = np.cosh(alpha * t) - 0.75 * np.sinh(alpha * t) / alpha
        assert_allclose(h1_determinants(p, grid), expected, rtol=1e-10)

    def test_stable_long_horizon_determinant(self):
        """A = -0.5: det = (4/3) e^{0.15t} - (1/3) e^{-0.15t} on [0, 10]"""
        p = base_params(A=-0.5, T=10.0)
        grid = TimeGrid(p.T, 200)
        t = grid.knots
        expected = (4.0 / 3.0) * np.exp(0.15 * t) - (1.0 / 3.0) * np.exp(-0.15 * t)
        assert_allclose(h1_determinants(p, grid), expected, rtol=1e-10)
        self.assertTrue(check_h1_determinant(p, grid).holds)

    def test_unit_gamma_determinant(self):
        """Gamma = 1 gives det = e^{-(A + G) t}"""
        p = base_params(Gamma=1.0, T=2.0)
        grid = TimeGrid(p.T, 100)
        assert_allclose(h1_determinants(p, grid), np.exp(-0.75 * grid.knots), rtol=1e-10)

    def test_failure_beyond_horizon(self):
        """T = 3: determinant crosses zero near t_max"""
        p = base_params(T=3.0)
        grid = TimeGrid(p.T, 3000)
        verdict = check_h1_determinant(p, grid)
        self.assertFalse(verdict.holds)
        t_max = closed_form_for(p).t_max
        self.assertAlmostEqual(verdict.details["first_failure_time"], t_max, delta=2e-3)

    def test_riccati_criterion_agrees(self):
        """The Riccati criterion holds at T = 1.3 and fails at T = 3"""
        p = base_params()
        self.assertTrue(check_h1_riccati(p, TimeGrid(p.T, 500)).holds)
        q = base_params(T=3.0)
        result = check_h1_riccati(q, TimeGrid(q.T, 2000))
        self.assertFalse(result.holds)
        self.assertIsNotNone(result.escape_time)

    def test_coarse_grid_past_t_max_fails(self):
        """T = 2.8 on 20 and 50 steps: RK4 must not step over the escape"""
        p = base_params(T=2.8)
        for steps in (20, 50):
            with self.subTest(steps=steps):
                grid = TimeGrid(p.T, steps)
                result = check_h1_riccati(p, grid)
                self.assertFalse(check_h1_determinant(p, grid).holds)
                self.assertFalse(result.holds)
                self.assertFalse(result.resolved)
                self.assertIsNotNone(result.escape_time)

    def test_just_below_t_max_holds_on_coarse_grids(self):
        """T = 2.76 stays solvable on every grid"""
        p = base_params(T=2.76)
        for steps in (10, 20, 50, 200):
            with self.subTest(steps=steps):
                grid = TimeGrid(p.T, steps)
                self.assertTrue(check_h1_determinant(p, grid).holds)
                self.assertTrue(check_h1_riccati(p, grid).holds)

    def test_criteria_agree_on_random_scalar_data(self):
        """Determinant and Riccati verdicts coincide away from the boundary"""
        rng = np.random.default_rng(20240611)
        accepted = 0
        while accepted < 20:
            p = ModelParams.scalar(A=rng.uniform(-1.0, 1.5), B=1.0, Q=rng.uniform(0.0, 1.0),
                                   R=1.0, gamma=rng.uniform(0.2, 2.0), T=rng.uniform(0.2, 4.0))
            margin = np.min(h1_determinants(p, TimeGrid(p.T, 400)))
            if abs(margin) < 0.05:
                continue
            grid = TimeGrid(p.T, (10, 25, 100)[accepted % 3])
            with self.subTest(A=float(p.A[0, 0]), Q=float(p.Q[0, 0]),
                              gamma=p.gamma, T=p.T, steps=grid.n_steps):
                self.assertEqual(check_h1_determinant(p, grid).holds,
                                 check_h1_riccati(p, grid).holds)
            accepted += 1


class TestH2(unittest.TestCase):
    """Galerkin estimate of the auxiliary cost form"""

    def test_reference_datum_holds(self):
        """The reference datum satisfies (H2) at T = 1.3"""
        p = base_params()
        grid = TimeGrid(p.T, 256)
        verdict = check_h2(p, grid, basis_size=16)
        self.assertTrue(verdict.holds)
        self.assertTrue(verdict.details["stable"])

    def test_unit_gamma_bounded_by_effort(self):
        """Gamma = 1 leaves the adversary inactive, so delta0 >= R"""
        p = base_params(Gamma=1.0, T=2.0)
        grid = TimeGrid(p.T, 256)
        delta0 = assemble_h2_form(p, None, grid, 16).delta0
        self.assertGreaterEqual(delta0, 1.5 - 1e-8)

    def test_form_value_matches_gram(self):
        """The cost of a basis combination is c^T G c"""
        p = base_params()
        grid = TimeGrid(p.T, 64)
        form = assemble_h2_form(p, None, grid, 8)
        c = np.linspace(-1.0, 1.0, form.gram.shape[0])
        nu = form.basis @ c
        self.assertAlmostEqual(h2_form_value(p, nu, grid), float(c @ form.gram @ c), places=10)

    def test_stochastic_form_reduces_to_deterministic(self):
        """Identical samples give the deterministic value"""
        p = base_params()
        grid = TimeGrid(p.T, 64)
        nu = np.sin(grid.knots[:-1])[:, None]
        samples = np.stack([nu, nu, nu])
        self.assertAlmostEqual(stochastic_h2_form_value(p, samples, grid),
                               h2_form_value(p, nu, grid), places=10)

    def test_stochastic_form_dominates_mean_control(self):
        """Mean-zero fluctuations only add tracking and effort cost"""
        p = base_params()
        grid = TimeGrid(p.T, 64)
        rng = np.random.default_rng(7)
        nu = np.cos(2.0 * grid.knots[:-1])[:, None]
        for trial in range(5):
            noise = rng.normal(scale=0.5, size=(16, grid.n_steps, 1))
            noise -= noise.mean(axis=0)
            with self.subTest(trial=trial):
                value = stochastic_h2_form_value(p, nu[None] + noise, grid)
                self.assertGreater(value, h2_form_value(p, nu, grid))

    def test_stochastic_form_shape_checked(self):
        """Samples must be (S, K, n1)"""
        p = base_params()
        grid = TimeGrid(p.T, 64)
        with self.assertRaises(ValueError):
            stochastic_h2_form_value(p, np.zeros((64, 1)), grid)


class TestSufficientBounds(unittest.TestCase):
    """C_q bound and contraction"""

    def test_unit_gamma_cq_zero(self):
        """Q(I - Gamma) = 0 makes C_q vanish"""
        p = base_params(Gamma=1.0, T=2.0)
        bound = compute_Cq_bound(p, TimeGrid(p.T, 200))
        self.assertEqual(bound.C_q, 0.0)
        self.assertTrue(bound.verdict.holds)
        self.assertAlmostEqual(bound.verdict.margin, 1.5)

    def test_cq_needs_zero_terminal_weight(self):
        """H != 0 is not covered by the C_q bound"""
        p = base_params(H=1.0)
        with self.assertRaises(NotApplicable):
            compute_Cq_bound(p, TimeGrid(p.T, 100))

    def test_contraction_reference(self):
        """c1 = |K(0)| and the contraction holds at T = 1.3"""
        p = base_params()
        grid = TimeGrid(p.T, 400)
        check = check_contraction(p, solve_indefinite_K(p, grid), grid)
        self.assertAlmostEqual(check.c["c1"], 0.171417, delta=1e-4)
        self.assertLessEqual(check.c["c2"], 3.312961)
        self.assertLessEqual(check.c["c3"], 1.318243 + 1e-3)
        self.assertLessEqual(check.lhs, 0.861493 + 1e-3)
        self.assertTrue(check.verdict.holds)

    def test_contraction_grid_mismatch(self):
        """K must live on the check grid"""
        p = base_params()
        K = solve_indefinite_K(p, TimeGrid(p.T, 100))
        with self.assertRaises(ConditionError):
            check_contraction(p, K, TimeGrid(p.T, 200))


class TestBvpSolvability(unittest.TestCase):
    """Determinant of the terminal shooting matrix"""

    def test_unit_gamma_closed_form(self):
        """Gamma = 1: det = e^{-(2A + G) T}"""
        p = base_params(Gamma=1.0, T=2.0)
        self.assertAlmostEqual(float(np.linalg.det(theta_tilde(p))), np.exp(-2.5), places=10)
        verdict = check_bvp_solvability(p)
        self.assertTrue(verdict.holds)
        self.assertAlmostEqual(verdict.details["det_theta"], np.exp(-2.5), places=10)

    def test_reference_datum(self):
        """The reference datum has a solvable consistency problem"""
        self.assertTrue(check_bvp_solvability(base_params()).holds)


class TestConditionsReport(unittest.TestCase):
    """All checks together"""

    def test_reference_report(self):
        """Every required condition holds for the reference datum"""
        p = base_params()
        report = build_conditions_report(p, TimeGrid(p.T, 256), basis_size=16)
        self.assertTrue(report.required_hold)
        self.assertEqual(report.failed(), [])
        self.assertTrue(report.contraction.holds)
        self.assertIn("c1", report.constants)
        doc = report.to_dict()
        self.assertTrue(doc["required_hold"])
        self.assertEqual(doc["h1_method"], "Both")

    def test_escape_report(self):
        """T = 3 fails (H1) and (H2) is not assessed"""
        p = base_params(T=3.0)
        report = build_conditions_report(p, TimeGrid(p.T, 600), basis_size=16)
        self.assertFalse(report.h1.holds)
        self.assertIn("h1", report.failed())
        self.assertIn("not assessed", report.h2.note)
        self.assertIsNotNone(report.h1_escape_time)

    def test_terminal_weight_marks_not_applicable(self):
        """H != 0 makes the sufficient checks not applicable"""
        p = base_params(H=0.05)
        report = build_conditions_report(p, TimeGrid(p.T, 256), basis_size=16)
        self.assertFalse(report.h2_sufficient_Cq.applicable)
        self.assertFalse(report.contraction.applicable)

    def test_invalid_datum_rejected(self):
        """Broken data never reach the checks"""
        p = base_params(gamma=-1.0)
        with self.assertRaises(ModelValidationError):
            build_conditions_report(p, TimeGrid(1.3, 100))


if __name__ == "__main__":
    unittest.main(verbosity=2)
