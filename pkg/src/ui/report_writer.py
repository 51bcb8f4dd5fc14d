#!/usr/bin/env python3
"""
src/ui/report_writer.py - CSV / JSON outputs and the run manifest

All numeric CSVs are written with %.17g so a re-run from the manifest
reproduces them byte for byte.
"""

import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .. import __version__
from ..utils.log_manager import get_logger

logger = get_logger("report_writer")

FLOAT_FORMAT = "%.17g"


class _NumpyEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays"""

    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, Path):
            return str(o)
        return super().default(o)


def _finite_or_none(value: Any) -> Any:
    """NaN / inf are not JSON; write them as null"""
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    return value


@dataclass
class RunManifest:
    """What was run, with which settings, and which files it produced"""
    subcommand: str
    config_path: Optional[str]
    settings: Dict[str, Any]
    argv: List[str] = field(default_factory=list)
    tool_version: str = __version__
    python_version: str = field(default_factory=platform.python_version)
    numpy_version: str = np.__version__
    started_at: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))
    wall_clock_seconds: float = 0.0
    operations: Dict[str, Dict[str, float]] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    exit_code: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ReportWriter:
    """Writes every output of one CLI run under out_dir and records it for the manifest"""

    def __init__(self, out_dir, subcommand: str):
        self.out_dir = Path(out_dir)
        self.subcommand = subcommand
        self.outputs: List[Path] = []
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _target(self, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_csv(self, name: str, columns: Dict[str, Any]) -> Path:
        """One column per key; scalar-valued columns are not allowed"""
        path = self._target(name)
        frame = pd.DataFrame({key: np.asarray(value) for key, value in columns.items()})
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        self.outputs.append(path)
        logger.io_event("wrote CSV", str(path))
        return path

    def write_json(self, name: str, doc: Dict[str, Any]) -> Path:
        path = self._target(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_finite_or_none(doc), f, indent=2, cls=_NumpyEncoder)
            f.write("\n")
        self.outputs.append(path)
        logger.io_event("wrote JSON", str(path))
        return path

    def write_manifest(self, manifest: RunManifest) -> Path:
        """Manifest goes last and lists every file written before it"""
        manifest.outputs = [str(p) for p in self.outputs]
        path = self._target("manifest.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_finite_or_none(manifest.to_dict()), f, indent=2, cls=_NumpyEncoder)
            f.write("\n")
        logger.io_event("wrote manifest", str(path))
        return path


def read_manifest(path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
