import time
import threading
from contextlib import contextmanager
from typing import Dict, List, Optional
from collections import deque
from loguru import logger


class PerformanceMonitor:
    """
    Wall-clock timing of solver stages
    - named operations timed with the track() context manager
    - per-operation totals and call counts for the run manifest
    - slow-operation alerts with a cooldown
    """

    def __init__(self, history_size: int = 100):
        self.history_size = history_size
        self.logger = logger.bind(name="performance_monitor")
        self._lock = threading.Lock()

        # Timing
        self.totals: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}
        self.history = deque(maxlen=history_size)

        # Alerts
        self.slow_threshold = 60.0  # seconds
        self.alert_history = deque(maxlen=50)
        self.last_warning_time = 0.0
        self.warning_cooldown = 5.0

    @contextmanager
    def track(self, operation: str):
        """Time the enclosed block under the given operation name"""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.record(operation, time.perf_counter() - start)

    def record(self, operation: str, duration: float):
        """Record one timed operation"""
        with self._lock:
            self.totals[operation] = self.totals.get(operation, 0.0) + duration
            self.counts[operation] = self.counts.get(operation, 0) + 1
            self.history.append({'operation': operation, 'duration': duration})
        self.logger.debug(f"Performance: {operation} took {duration:.3f}s")
        self._check_performance_alerts(operation, duration)

    def _check_performance_alerts(self, operation: str, duration: float):
        """Warn about slow operations, at most once per cooldown window"""
        if duration <= self.slow_threshold:
            return
        current_time = time.time()
        if current_time - self.last_warning_time < self.warning_cooldown:
            return
        message = f"Slow operation: {operation} took {duration:.1f}s (threshold: {self.slow_threshold:.0f}s)"
        self.logger.warning(f"Performance alert: {message}")
        self.alert_history.append({'time': current_time, 'message': message})
        self.last_warning_time = current_time

    def get_performance_stats(self) -> Dict[str, Dict[str, float]]:
        """Per-operation totals, counts and means"""
        with self._lock:
            return {
                name: {
                    'total_seconds': total,
                    'calls': self.counts[name],
                    'mean_seconds': total / self.counts[name],
                }
                for name, total in self.totals.items()
            }

    def get_recent_alerts(self, count: int = 10) -> List[Dict]:
        """Get recent performance alerts"""
        return list(self.alert_history)[-count:]

    def reset(self, threshold: Optional[float] = None):
        """Clear all timings; optionally change the slow threshold"""
        with self._lock:
            self.totals.clear()
            self.counts.clear()
            self.history.clear()
            self.alert_history.clear()
        if threshold is not None:
            self.slow_threshold = threshold


# Global performance monitor instance
performance_monitor = PerformanceMonitor()
