import copy
import json
from pathlib import Path
from typing import Dict, Any, Optional
from loguru import logger


class SolverSettings:
    """
    Solver and experiment settings with defaults
    - nested sections addressed by dot paths ('grid.n_steps')
    - overrides (config 'solver' block, settings file) merge over the defaults
    - API: get_setting, set_setting, load_settings, save_settings
    """

    def __init__(self, overrides: Optional[Dict[str, Any]] = None, settings_file: Optional[str] = None):
        self.settings_file = Path(settings_file) if settings_file else None
        self.logger = logger.bind(name="settings_manager")
        self.default_settings = self._get_default_settings()
        self.settings = copy.deepcopy(self.default_settings)
        if self.settings_file is not None:
            self.load_settings()
        if overrides:
            self.settings = self._merge(self.settings, overrides)

    def _get_default_settings(self) -> Dict[str, Any]:
        """Get default settings structure"""
        return {
            "version": "1.0.0",

            "grid": {
                "n_steps": 2000,
                "escape_threshold": 1e8
            },

            "thresholds": {
                "determinant": 1e-10,
                "eigenvalue": 1e-8,
                "psd": 1e-10,
                "residual": 1e-6
            },

            "h2": {
                "basis_size": 32,
                "stability_check": True
            },

            "consistency": {
                "method": "shooting",
                "validate_with_fixed_point": True,
                "fixed_point": {
                    "tol": 1e-10,
                    "max_iter": 200
                }
            },

            "simulation": {
                "N": 128,
                "N_list": [8, 32, 128, 512],
                "replications": 64,
                "seed": 20240601,
                "n_steps": 500,
                "agent": 0,
                "threads": 1,
                "realization": "reference"
            },

            "nash_gap": {
                "N_list": [32, 128, 512],
                "deviations": ["best_response", "exact_offset", "scaled", "random_affine"],
                "scales": [0.05, 0.2],
                "random_affine_count": 8,
                "random_affine_size": 0.05,
                "offset_modes": 6
            },

            "logging": {
                "console_level": "INFO",
                "file_level": "DEBUG",
                "file_settings": {
                    "rotation_size": "10 MB",
                    "retention": 5,
                    "compression": "zip"
                },
                "session_cleanup": {
                    "max_sessions": 3
                }
            },

            "output": {
                "out_dir": "out"
            }
        }

    def load_settings(self) -> bool:
        """Load settings from the JSON settings file, if one was given"""
        try:
            if self.settings_file.exists():
                with open(self.settings_file, 'r', encoding='utf-8') as f:
                    loaded_settings = json.load(f)

                # Merge with defaults to handle missing fields
                self.settings = self._merge(self.default_settings, loaded_settings)
                self.logger.info(f"Settings loaded from {self.settings_file}")
                return True
            self.logger.warning(f"Settings file not found, using defaults: {self.settings_file}")
            return False

        except (OSError, json.JSONDecodeError) as e:
            self.logger.error(f"Failed to load settings: {e}")
            self.settings = copy.deepcopy(self.default_settings)
            return False

    def save_settings(self, path: Optional[str] = None) -> bool:
        """Save settings to JSON file"""
        target = Path(path) if path else self.settings_file
        if target is None:
            self.logger.error("No settings file to save to")
            return False
        try:
            with open(target, 'w', encoding='utf-8') as f:
                json.dump(self.settings, f, indent=2, ensure_ascii=False)

            self.logger.info(f"Settings saved to {target}")
            return True

        except OSError as e:
            self.logger.error(f"Failed to save settings: {e}")
            return False

    @staticmethod
    def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
        """Recursive merge of overrides over a copy of base"""
        merged = copy.deepcopy(base)

        def merge_dict(target: Dict, source: Dict):
            for key, value in source.items():
                if key in target and isinstance(target[key], dict) and isinstance(value, dict):
                    merge_dict(target[key], value)
                else:
                    target[key] = copy.deepcopy(value)

        merge_dict(merged, overrides)
        return merged

    def get_setting(self, path: str, default: Any = None) -> Any:
        """Get setting value by dot notation path (e.g., 'grid.n_steps')"""
        try:
            value = self.settings
            for key in path.split('.'):
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def set_setting(self, path: str, value: Any) -> bool:
        """Set setting value by dot notation path"""
        try:
            keys = path.split('.')
            target = self.settings

            # Navigate to parent of target key
            for key in keys[:-1]:
                if key not in target:
                    target[key] = {}
                target = target[key]

            target[keys[-1]] = value

            self.logger.debug(f"Setting updated: {path} = {value}")
            return True

        except (KeyError, TypeError) as e:
            self.logger.error(f"Failed to set setting {path}: {e}")
            return False

    def get_all_settings(self) -> Dict[str, Any]:
        """Get all settings"""
        return copy.deepcopy(self.settings)

    def get_settings_section(self, section: str) -> Dict[str, Any]:
        """Get settings for a specific section"""
        return self.settings.get(section, {})

    def overrides(self) -> Dict[str, Any]:
        """Only the entries that differ from the defaults"""
        def diff(current: Dict, default: Dict) -> Dict:
            out = {}
            for key, value in current.items():
                if isinstance(value, dict) and isinstance(default.get(key), dict):
                    sub = diff(value, default[key])
                    if sub:
                        out[key] = sub
                elif default.get(key, object()) != value:
                    out[key] = value
            return out
        return diff(self.settings, self.default_settings)

    def reset_to_defaults(self) -> bool:
        """Reset all settings to default values"""
        self.settings = copy.deepcopy(self.default_settings)
        self.logger.info("Settings reset to defaults")
        return True
