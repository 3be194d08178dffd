"""Thread-safe LRU caches for feature vectors and final predictions.

Cache keys embed the model version, so a version swap implicitly invalidates
stale entries; the serving layer still purges explicitly to reclaim space.
The prediction cache additionally groups keys by uid so that an observe can
drop exactly that user's entries in O(entries for that user).
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Hashable, Iterable

import numpy as np


class LruCache:
    """Bounded map with least-recently-used eviction.

    ``group_key``, when given, maps a cache key to a group id; purge_group
    removes every live entry of a group without scanning the whole cache.
    get/put touch recency; bulk variants take the internal lock once, which
    is what the topK hot path uses.
    """

    def __init__(self, capacity: int, group_key: Callable[[Hashable], Hashable] | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._group_key = group_key
        self._groups: dict[Hashable, set] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)

    def get(self, key, default=None):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
            self.misses += 1
            return default

    def put(self, key, value) -> None:
        with self._lock:
            self._put_locked(key, value)

    def get_many(self, keys: list) -> list:
        """Values for keys (None for misses), touching recency, in one lock hold."""
        out = [None] * len(keys)
        with self._lock:
            data = self._data
            hits = 0
            for i, key in enumerate(keys):
                if key in data:
                    data.move_to_end(key)
                    out[i] = data[key]
                    hits += 1
            self.hits += hits
            self.misses += len(keys) - hits
        return out

    def put_many(self, pairs: Iterable[tuple]) -> None:
        with self._lock:
            for key, value in pairs:
                self._put_locked(key, value)

    def _put_locked(self, key, value) -> None:
        data = self._data
        if key in data:
            data.move_to_end(key)
            data[key] = value
            return
        data[key] = value
        if self._group_key is not None:
            self._groups.setdefault(self._group_key(key), set()).add(key)
        while len(data) > self.capacity:
            victim, _ = data.popitem(last=False)
            self.evictions += 1
            if self._group_key is not None:
                group = self._group_key(victim)
                members = self._groups.get(group)
                if members is not None:
                    members.discard(victim)
                    if not members:
                        del self._groups[group]

    def purge_group(self, group) -> int:
        """Drop every entry whose key maps to ``group``; returns count removed."""
        if self._group_key is None:
            raise ValueError("cache was built without a group_key")
        with self._lock:
            members = self._groups.pop(group, None)
            if not members:
                return 0
            for key in members:
                self._data.pop(key, None)
            return len(members)

    def clear(self) -> None:
        with self._lock:
            self._data.clear()
            self._groups.clear()

    def keys(self) -> list:
        """Snapshot of keys from least to most recently used."""
        with self._lock:
            return list(self._data.keys())

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


class NullCache:
    """Cache stand-in that stores nothing; used when caching is disabled."""

    capacity = 0
    hits = 0
    misses = 0
    evictions = 0

    def __len__(self):
        return 0

    def get(self, key, default=None):
        return default

    def put(self, key, value):
        pass

    def get_many(self, keys):
        return [None] * len(keys)

    def put_many(self, pairs):
        pass

    def purge_group(self, group):
        return 0

    def clear(self):
        pass

    def keys(self):
        return []

    def hit_rate(self):
        return 0.0


def prediction_key(model: str, version: int, uid: int, item_key) -> tuple:
    return (model, version, uid, item_key)


def feature_key(model: str, version: int, item_key) -> tuple:
    return (model, version, item_key)


def item_cache_key(item):
    """Hashable identity of an item descriptor: the id itself for table
    lookups, a tuple of floats for raw computed-feature inputs."""
    if isinstance(item, int):
        return item
    if isinstance(item, np.integer):
        return int(item)
    if isinstance(item, str):
        return item
    return tuple(float(x) for x in item)
