"""Model quality monitoring: running error aggregates, staleness detection,
and the version history that backs retrain bookkeeping and rollbacks.

Cross-validated errors from the observe path stream into an ErrorAggregate.
Staleness is an ordinary-least-squares slope fit over the trailing error
window: when errors trend upward faster than the configured threshold, the
model is declared stale and a retrain should be triggered.
"""

from __future__ import annotations

import enum
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import RetrainInFlight, UnknownVersion

DEFAULT_WINDOW = 500
DEFAULT_MIN_WINDOW = 100


class Staleness(enum.Enum):
    FRESH = "fresh"
    STALE = "stale"


class ErrorAggregate:
    """Running per-user mean squared errors plus a global trailing window.

    Per-user means are updated only by the shard that owns the uid; the
    global window is shared across shards and guarded by a lock. When
    ``exploratory_only`` is set, only errors tagged as coming from
    exploratory serving decisions enter the window, realizing a validation
    pool the model's own choices did not influence.
    """

    def __init__(self, window: int = DEFAULT_WINDOW, exploratory_only: bool = False):
        if window < 2:
            raise ValueError("window must hold at least 2 errors")
        self.window_size = window
        self.exploratory_only = exploratory_only
        self._per_user: dict[int, tuple[float, int]] = {}
        self._window: deque[float] = deque(maxlen=window)
        self._lock = threading.Lock()
        self.total_count = 0

    def record(self, uid: int, squared_error: float, exploratory: bool = False) -> None:
        mean, count = self._per_user.get(uid, (0.0, 0))
        count += 1
        mean += (squared_error - mean) / count
        self._per_user[uid] = (mean, count)
        with self._lock:
            self.total_count += 1
            if exploratory or not self.exploratory_only:
                self._window.append(squared_error)

    def user_mean(self, uid: int) -> tuple[float, int]:
        """(running mean squared error, count) for one user; (0.0, 0) if unseen."""
        return self._per_user.get(uid, (0.0, 0))

    def window_snapshot(self) -> list[float]:
        with self._lock:
            return list(self._window)

    def reset_window(self) -> None:
        with self._lock:
            self._window.clear()

    def global_mean(self) -> float:
        with self._lock:
            if not self._window:
                return 0.0
            return sum(self._window) / len(self._window)


def ols_slope(values) -> float:
    """Least-squares slope of values against their indices 0..n-1."""
    n = len(values)
    if n < 2:
        return 0.0
    mean_x = (n - 1) / 2.0
    mean_y = sum(values) / n
    num = 0.0
    den = 0.0
    for i, y in enumerate(values):
        dx = i - mean_x
        num += dx * (y - mean_y)
        den += dx * dx
    return num / den


def staleness_check(
    agg: ErrorAggregate,
    threshold_slope: float,
    min_window: int = DEFAULT_MIN_WINDOW,
) -> Staleness:
    """Stale iff the window holds at least min_window errors and their OLS
    slope exceeds threshold_slope (error units per observation)."""
    if threshold_slope <= 0:
        raise ValueError("threshold_slope must be positive")
    window = agg.window_snapshot()
    if len(window) < min_window:
        return Staleness.FRESH
    if ols_slope(window) > threshold_slope:
        return Staleness.STALE
    return Staleness.FRESH


@dataclass
class VersionRecord:
    version: int
    created_at: float
    reason: str
    metrics: dict = field(default_factory=dict)


class VersionHistory:
    """Ordered record of installed versions with an active pointer.

    The most recent ``retain`` versions keep full state snapshots for
    rollback; older entries keep metrics only. The active version's snapshot
    is never evicted.
    """

    def __init__(self, retain: int = 3):
        self.retain = retain
        self._records: list[VersionRecord] = []
        self._snapshots: dict[int, object] = {}
        self.active: int | None = None
        self._lock = threading.Lock()

    def install(self, version: int, snapshot, reason: str = "", metrics: dict | None = None) -> None:
        with self._lock:
            if self._records and version <= self._records[-1].version:
                raise ValueError(
                    f"version {version} does not increase on {self._records[-1].version}"
                )
            self._records.append(
                VersionRecord(version=version, created_at=time.time(), reason=reason,
                              metrics=dict(metrics or {}))
            )
            self._snapshots[version] = snapshot
            self.active = version
            self._evict()

    def rollback_to(self, version: int):
        with self._lock:
            if version not in self._snapshots:
                raise UnknownVersion(f"version {version} is not retained")
            self.active = version
            return self._snapshots[version]

    def _evict(self) -> None:
        retained = sorted(self._snapshots)
        while len(retained) > self.retain:
            victim = retained.pop(0)
            if victim == self.active:
                continue
            del self._snapshots[victim]

    def retained_versions(self) -> list[int]:
        with self._lock:
            return sorted(self._snapshots)

    def records(self) -> list[VersionRecord]:
        with self._lock:
            return list(self._records)


class RetrainGuard:
    """Ensures at most one retrain job is in flight per model."""

    def __init__(self):
        self._lock = threading.Lock()
        self._in_flight = False

    def acquire(self) -> None:
        with self._lock:
            if self._in_flight:
                raise RetrainInFlight("a retrain job is already running")
            self._in_flight = True

    def release(self) -> None:
        with self._lock:
            self._in_flight = False

    @property
    def in_flight(self) -> bool:
        with self._lock:
            return self._in_flight
