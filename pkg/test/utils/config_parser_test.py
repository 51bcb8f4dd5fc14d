#!/usr/bin/env python3
"""
test/utils/config_parser_test.py - Tests for model config ingestion
"""

import unittest
import tempfile
import shutil
import json
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.core.model import InitMode, InitSpec, ModelParams, ModelValidationError
from src.utils.config_parser import (
    ConfigError, parse_config, load_config, save_config, config_to_dict,
)

CONFIGS_DIR = Path(__file__).parent.parent.parent / "configs"

SCALAR_DOC = {"A": 0.5, "B": 1.0, "G": 0.25, "D": 0.3, "Gamma": 0.8, "eta": 1.0,
              "Q": 1.0, "R": 1.5, "gamma": 1.0, "H": 0.0, "T": 1.3, "m0": 1.0}


class TestParseConfig(unittest.TestCase):
    """Parsing config text"""

    def test_scalar_promotion(self):
        """Scalar fields become 1x1 matrices"""
        cfg = parse_config(json.dumps(SCALAR_DOC))
        self.assertEqual(cfg.params.A.shape, (1, 1))
        self.assertEqual(cfg.params.m0.shape, (1,))
        self.assertEqual(cfg.init.mode, InitMode.SHARED)

    def test_optional_defaults(self):
        """Missing optional fields default to zero"""
        doc = {key: SCALAR_DOC[key] for key in ("A", "B", "Q", "R", "gamma", "T")}
        cfg = parse_config(json.dumps(doc))
        assert_allclose(cfg.params.G, 0.0)
        assert_allclose(cfg.params.eta, 0.0)
        self.assertEqual(cfg.params.n2, 1)

    def test_column_input_matrix(self):
        """A flat B for a 2-state model is a column"""
        doc = {"A": [[0.0, 1.0], [0.0, 0.0]], "B": [0.0, 1.0], "Q": [[1, 0], [0, 1]],
               "R": 1.0, "gamma": 1.0, "T": 1.0, "D": [0.1, 0.2]}
        cfg = parse_config(json.dumps(doc))
        self.assertEqual(cfg.params.B.shape, (2, 1))
        self.assertEqual(cfg.params.D.shape, (2, 1))

    def test_missing_required(self):
        """Missing required fields are named"""
        doc = dict(SCALAR_DOC)
        del doc["gamma"]
        with self.assertRaises(ConfigError) as ctx:
            parse_config(json.dumps(doc))
        self.assertEqual(ctx.exception.field, "gamma")

    def test_invalid_json_has_position(self):
        """Syntax errors report line and column"""
        with self.assertRaises(ConfigError) as ctx:
            parse_config('{\n  "A": 0.5,\n  "B": \n}')
        self.assertEqual(ctx.exception.line, 4)

    def test_bad_value_has_line(self):
        """Non-numeric entries point at their line"""
        text = '{\n "A": 0.5,\n "B": "one",\n "Q": 1, "R": 1, "gamma": 1, "T": 1\n}'
        with self.assertRaises(ConfigError) as ctx:
            parse_config(text)
        self.assertEqual(ctx.exception.field, "B")
        self.assertEqual(ctx.exception.line, 3)

    def test_model_violations(self):
        """Semantic violations raise ModelValidationError"""
        doc = dict(SCALAR_DOC, R=-1.0)
        with self.assertRaises(ModelValidationError):
            parse_config(json.dumps(doc))

    def test_unknown_fields_warn(self):
        """Unknown keys are ignored with a warning"""
        cfg = parse_config(json.dumps(dict(SCALAR_DOC, colour="blue")))
        self.assertTrue(any("colour" in w for w in cfg.warnings))

    def test_solver_block(self):
        """The solver block overrides settings"""
        cfg = parse_config(json.dumps(dict(SCALAR_DOC, solver={"grid": {"n_steps": 300}})))
        self.assertEqual(cfg.settings.get_setting("grid.n_steps"), 300)

    def test_init_modes(self):
        """Deterministic and random initial states parse"""
        det = parse_config(json.dumps(dict(SCALAR_DOC, init={"mode": "deterministic",
                                                              "states": [1.0, 2.0]})))
        self.assertEqual(det.init.mode, InitMode.DETERMINISTIC)
        rnd = parse_config(json.dumps(dict(SCALAR_DOC, init={"mode": "random", "means": [1.0],
                                                              "covariances": [[0.1]]})))
        self.assertEqual(rnd.init.mode, InitMode.RANDOM)

    def test_bad_init(self):
        """Unknown modes and incomplete random specs are rejected"""
        with self.assertRaises(ConfigError):
            parse_config(json.dumps(dict(SCALAR_DOC, init={"mode": "magic"})))
        with self.assertRaises(ConfigError):
            parse_config(json.dumps(dict(SCALAR_DOC, init={"mode": "random", "means": [1.0]})))


class TestConfigFiles(unittest.TestCase):
    """Reading and writing config files"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_shipped_configs_load(self):
        """Every config in configs/ is valid"""
        for path in sorted(CONFIGS_DIR.glob("*.json")):
            with self.subTest(config=path.name):
                cfg = load_config(path)
                self.assertEqual(cfg.params.n, 1)

    def test_missing_file(self):
        """Unreadable files raise ConfigError"""
        with self.assertRaises(ConfigError):
            load_config(self.test_dir / "absent.json")

    def test_save_and_reload(self):
        """save_config output loads back to the same datum"""
        p = ModelParams.scalar(A=0.5, B=1.0, Q=1.0, R=1.5, gamma=1.0, T=1.3, D=0.3, m0=1.0)
        init = InitSpec.deterministic([1.0, 2.0])
        path = save_config(p, init, self.test_dir / "out" / "cfg.json", name="roundtrip")
        cfg = load_config(path)
        assert_allclose(cfg.params.A, p.A)
        assert_allclose(cfg.init.states, init.states)
        self.assertEqual(cfg.name, "roundtrip")

    def test_config_to_dict(self):
        """Serialized config names its init mode"""
        p = ModelParams.scalar(A=0.5, B=1.0, Q=1.0, R=1.5, gamma=1.0, T=1.3)
        doc = config_to_dict(p, InitSpec.shared())
        self.assertEqual(doc["init"], {"mode": "shared"})
        self.assertNotIn("solver", doc)


if __name__ == "__main__":
    unittest.main(verbosity=2)
