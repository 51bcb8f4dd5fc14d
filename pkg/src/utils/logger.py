import sys
from pathlib import Path
from datetime import datetime
from typing import Optional
from loguru import logger

CONSOLE_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{extra[name]}</cyan>: <level>{message}</level>"
FILE_FORMAT = "[{time:YYYY-MM-DD HH:mm:ss.SSS}] [{level}] [{extra[name]}] {message}"


class LoggerConfig:
    """Loguru configuration for the solver with optional per-session log files"""

    def __init__(self, console_level: str = "INFO"):
        self.logs_dir: Optional[Path] = None
        self.session_id = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
        self.log_file: Optional[Path] = None
        self.console_level = console_level
        self._console_id = None
        self._file_id = None
        logger.configure(extra={"name": "root"})
        self._setup_logger()

    def _setup_logger(self):
        """Setup the console handler; stdout is reserved for the run summary"""

        # Remove default logger
        logger.remove()

        self._console_id = logger.add(
            sys.stderr,
            level=self.console_level,
            format=CONSOLE_FORMAT,
            colorize=True,
            backtrace=False,
            diagnose=False
        )

    def set_console_level(self, level: str):
        if level == self.console_level:
            return
        self.console_level = level
        if self._console_id is not None:
            logger.remove(self._console_id)
        self._console_id = logger.add(sys.stderr, level=level, format=CONSOLE_FORMAT,
                                      colorize=True, backtrace=False, diagnose=False)

    def start_session(self, logs_dir, file_level: str = "DEBUG", rotation: str = "10 MB",
                      retention: int = 5, compression: Optional[str] = "zip", max_sessions: int = 3) -> Path:
        """Add a file handler for this run under logs_dir"""
        self.logs_dir = Path(logs_dir)
        self.logs_dir.mkdir(parents=True, exist_ok=True)
        self.log_file = self.logs_dir / f"{self.session_id}.log"
        if self._file_id is not None:
            logger.remove(self._file_id)

        # File handler - all levels with rotation per session
        self._file_id = logger.add(
            self.log_file,
            level=file_level,
            format=FILE_FORMAT,
            rotation=rotation,
            retention=retention,
            compression=compression,
            backtrace=True,
            diagnose=False,
            enqueue=False
        )
        self._cleanup_old_sessions(max_sessions)
        return self.log_file

    def end_session(self):
        if self._file_id is not None:
            logger.remove(self._file_id)
            self._file_id = None

    def _cleanup_old_sessions(self, max_sessions: int = 3):
        """Clean up old log sessions, keeping only the most recent ones"""
        try:
            log_files = list(self.logs_dir.glob("*.log*"))
            if not log_files:
                return

            # Group files by session (e.g. "2024-01-15_14-30-25" from "2024-01-15_14-30-25.log.1")
            sessions = {}
            for log_file in log_files:
                base_name = log_file.name.split(".log")[0]
                sessions.setdefault(base_name, []).append(log_file)

            session_times = []
            for session_name, files in sessions.items():
                main_file = self.logs_dir / f"{session_name}.log"
                stamp_file = main_file if main_file.exists() else files[0]
                session_times.append((session_name, stamp_file.stat().st_mtime))

            # Newest first
            session_times.sort(key=lambda x: x[1], reverse=True)
            sessions_to_keep = set(name for name, _ in session_times[:max_sessions])
            sessions_to_keep.add(self.session_id)

            deleted_count = 0
            for session_name, files in sessions.items():
                if session_name in sessions_to_keep:
                    continue
                for file in files:
                    try:
                        file.unlink()
                        deleted_count += 1
                    except OSError as e:
                        logger.bind(name="logger").warning(f"Could not delete old log file {file}: {e}")

            if deleted_count > 0:
                logger.bind(name="logger").debug(
                    f"Cleaned up {deleted_count} old log files, keeping {max_sessions} most recent sessions"
                )

        except OSError as e:
            logger.bind(name="logger").warning(f"Could not cleanup old log sessions: {e}")

    def get_logger(self, name: str = None):
        """Get logger instance with module name"""
        if name:
            return logger.bind(name=name)
        return logger


# Global logger instance
log_config = LoggerConfig()
