from typing import Optional

from .logger import log_config


class LogManager:
    """Per-module logging facade with the solver's event vocabulary"""

    def __init__(self, module_name: str = "main"):
        self.module_name = module_name
        self.logger = log_config.get_logger(module_name)

    def debug(self, message: str, **kwargs):
        self.logger.debug(message, **kwargs)

    def info(self, message: str, **kwargs):
        self.logger.info(message, **kwargs)

    def warning(self, message: str, **kwargs):
        self.logger.warning(message, **kwargs)

    def error(self, message: str, **kwargs):
        self.logger.error(message, **kwargs)

    def critical(self, message: str, **kwargs):
        self.logger.critical(message, **kwargs)

    def exception(self, message: str, error: Optional[BaseException] = None):
        """Error record carrying the active (or given) exception and its traceback"""
        self.logger.opt(exception=error if error is not None else True).error(message)

    def performance(self, operation: str, seconds: float):
        """Wall-clock of a finished operation"""
        self.logger.info(f"Performance: {operation} took {seconds:.3f}s")

    def solver_event(self, solver: str, action: str, details: str = ""):
        """Solver progress (escapes, iterations, residuals); debug only"""
        self.logger.debug(f"Solver {solver}: {action} {details}".strip())

    def condition_event(self, condition: str, verdict: bool, margin: Optional[float] = None):
        """Condition verdict; failures are warnings"""
        margin_text = "" if margin is None else f" (margin {margin:.6g})"
        level = "INFO" if verdict else "WARNING"
        self.logger.log(level, f"Condition {condition}: {'holds' if verdict else 'fails'}{margin_text}")

    def experiment_event(self, experiment: str, details: str = ""):
        self.logger.info(f"Experiment {experiment}: {details}".strip())

    def io_event(self, action: str, path: str = ""):
        self.logger.debug(f"IO: {action} {path}".strip())


def get_logger(module_name: str = "main") -> LogManager:
    return LogManager(module_name)
