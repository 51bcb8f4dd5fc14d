#!/usr/bin/env python3
"""
src/utils/config_parser.py - Model configuration ingestion

Reads the JSON model config {A, B, G, D, Gamma, eta, Q, R, gamma, H, T, m0,
init, solver} into (ModelParams, InitSpec, SolverSettings). Scalars promote
to 1x1 matrices and length-1 vectors; missing optional fields take their
zero defaults. Every problem is reported with the offending field and, when
it can be located, its line in the file.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from ..core.model import InitMode, InitSpec, ModelParams, ModelValidationError, validate
from ..core.numkit import NumkitError
from .log_manager import get_logger
from .settings_manager import SolverSettings

logger = get_logger("config_parser")

REQUIRED_FIELDS = ("A", "B", "Q", "R", "gamma", "T")
MATRIX_FIELDS = ("A", "B", "G", "D", "Gamma", "Q", "R", "H")
VECTOR_FIELDS = ("eta", "m0")
KNOWN_FIELDS = set(MATRIX_FIELDS + VECTOR_FIELDS + ("gamma", "T", "init", "solver", "name", "description"))


class ConfigError(Exception):
    """Unreadable or malformed model configuration"""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None,
                 column: Optional[int] = None):
        self.field = field
        self.line = line
        self.column = column
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}" + (f", column {column}" if column is not None else ""))
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)


@dataclass
class LoadedConfig:
    """A parsed model configuration"""
    params: ModelParams
    init: InitSpec
    settings: SolverSettings
    path: Optional[Path] = None
    name: str = ""
    warnings: List[str] = field(default_factory=list)


def _line_of(text: str, key: str) -> Optional[int]:
    match = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def _matrix(doc: Dict[str, Any], key: str, default, text: str, column: bool = False) -> np.ndarray:
    value = doc.get(key, default)
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"not a numeric matrix: {e}", key, _line_of(text, key)) from e
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 1 and column:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ConfigError(f"expected a matrix, got shape {arr.shape}", key, _line_of(text, key))
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite entries", key, _line_of(text, key))
    return arr


def _vector(doc: Dict[str, Any], key: str, n: int, text: str) -> np.ndarray:
    value = doc.get(key, np.zeros(n))
    try:
        arr = np.array(value, dtype=float).reshape(-1)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"not a numeric vector: {e}", key, _line_of(text, key)) from e
    if arr.size == 1 and n > 1:
        arr = np.full(n, float(arr[0]))
    if not np.all(np.isfinite(arr)):
        raise ConfigError("contains non-finite entries", key, _line_of(text, key))
    return arr


def _scalar(doc: Dict[str, Any], key: str, text: str) -> float:
    value = doc[key]
    if isinstance(value, list):
        flat = np.array(value, dtype=float).reshape(-1)
        if flat.size != 1:
            raise ConfigError("expected a scalar", key, _line_of(text, key))
        value = flat[0]
    try:
        return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"expected a number, got {value!r}", key, _line_of(text, key)) from e


def parse_params(doc: Dict[str, Any], text: str = "") -> ModelParams:
    """Build ModelParams from a config dict, applying defaults and promotions"""
    missing = [key for key in REQUIRED_FIELDS if key not in doc]
    if missing:
        raise ConfigError(f"missing required fields: {', '.join(missing)}", missing[0])

    A = _matrix(doc, "A", None, text)
    n = A.shape[0]
    B = _matrix(doc, "B", None, text, column=True)
    zeros = np.zeros((n, n))
    try:
        return ModelParams(
            A=A, B=B,
            G=_matrix(doc, "G", zeros, text),
            D=_matrix(doc, "D", np.zeros((n, 1)), text, column=True),
            Gamma=_matrix(doc, "Gamma", zeros, text),
            eta=_vector(doc, "eta", n, text),
            Q=_matrix(doc, "Q", None, text),
            R=_matrix(doc, "R", None, text),
            gamma=_scalar(doc, "gamma", text),
            H=_matrix(doc, "H", zeros, text),
            T=_scalar(doc, "T", text),
            m0=_vector(doc, "m0", n, text),
        )
    except NumkitError as e:
        raise ConfigError(str(e)) from e


def parse_init(doc: Optional[Dict[str, Any]], n: int, text: str = "") -> InitSpec:
    """Initial-state spec: shared (default), deterministic or random"""
    if doc is None:
        return InitSpec.shared()
    if not isinstance(doc, dict):
        raise ConfigError("init must be an object", "init", _line_of(text, "init"))
    try:
        mode = InitMode(doc.get("mode", InitMode.SHARED.value))
    except ValueError as e:
        raise ConfigError(f"unknown init mode {doc.get('mode')!r}", "init.mode",
                          _line_of(text, "mode")) from e
    try:
        if mode == InitMode.SHARED:
            spec = InitSpec.shared(doc.get("value"))
        elif mode == InitMode.DETERMINISTIC:
            if "states" not in doc:
                raise ConfigError("deterministic init needs 'states'", "init.states", _line_of(text, "init"))
            spec = InitSpec.deterministic(doc["states"])
        else:
            if "means" not in doc or "covariances" not in doc:
                raise ConfigError("random init needs 'means' and 'covariances'", "init",
                                  _line_of(text, "init"))
            spec = InitSpec.random(doc["means"], doc["covariances"])
    except (NumkitError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"malformed initial states: {e}", "init", _line_of(text, "init")) from e
    errors = spec.check(n)
    if errors:
        raise ConfigError("; ".join(errors), "init", _line_of(text, "init"))
    return spec


def parse_config(text: str, path: Optional[Path] = None) -> LoadedConfig:
    """Parse config text; raises ConfigError or ModelValidationError"""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno, column=e.colno) from e
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", line=1)

    warnings = [f"unknown field '{key}' ignored" for key in doc if key not in KNOWN_FIELDS]
    params = parse_params(doc, text)
    result = validate(params)
    if not result.ok:
        raise ModelValidationError(result.errors)
    warnings.extend(result.warnings)

    init = parse_init(doc.get("init"), params.n, text)
    solver = doc.get("solver", {})
    if not isinstance(solver, dict):
        raise ConfigError("solver must be an object", "solver", _line_of(text, "solver"))
    settings = SolverSettings(overrides=solver)

    for message in warnings:
        logger.warning(f"Config: {message}")
    return LoadedConfig(params=params, init=init, settings=settings, path=path,
                        name=str(doc.get("name", path.stem if path else "")), warnings=warnings)


def load_config(path) -> LoadedConfig:
    """Load a model config file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    logger.io_event("read config", str(path))
    return parse_config(text, path)


def config_to_dict(params: ModelParams, init: InitSpec,
                   settings: Optional[SolverSettings] = None, name: str = "") -> Dict[str, Any]:
    doc: Dict[str, Any] = {}
    if name:
        doc["name"] = name
    doc.update(params.to_dict())
    doc["init"] = init.to_dict()
    if settings is not None:
        doc["solver"] = settings.overrides()
    return doc


def save_config(params: ModelParams, init: InitSpec, path, settings: Optional[SolverSettings] = None,
                name: str = "") -> Path:
    """Write a config that load_config reads back to the same datum"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(params, init, settings, name), f, indent=2)
    logger.io_event("wrote config", str(path))
    return path
