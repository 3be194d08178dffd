"""Sharding and routing: hash-partitioned per-user tables and the worker
pool that serializes writes per shard.

Shards are worker threads inside one process. Every uid maps to exactly one
shard (uid mod num_shards), all mutations for a uid execute on its owner
worker, and reads go straight to the owning partition. This mirrors a
partitioned deployment closely enough to test routing, locality, and
replay semantics without cross-machine transport.
"""

from __future__ import annotations

import queue
import threading
from concurrent.futures import Future
from contextlib import contextmanager
from dataclasses import dataclass

_current_shard = threading.local()


@dataclass(frozen=True)
class ShardMap:
    """Deterministic uid -> shard assignment."""

    num_shards: int

    def __post_init__(self):
        if self.num_shards < 1:
            raise ValueError("num_shards must be >= 1")

    def route(self, uid: int) -> int:
        return int(uid) % self.num_shards


def route(shard_map: ShardMap, uid: int) -> int:
    return shard_map.route(uid)


class ShardedTable:
    """uid-keyed table partitioned by a ShardMap.

    With ``check_locality`` enabled, mutations assert they run on the owning
    shard's worker thread, catching routing bugs in tests.
    """

    def __init__(self, shard_map: ShardMap, check_locality: bool = False):
        self.shard_map = shard_map
        self.check_locality = check_locality
        self._parts: list[dict] = [dict() for _ in range(shard_map.num_shards)]

    @classmethod
    def from_dict(cls, items: dict, shard_map: ShardMap, check_locality: bool = False):
        table = cls(shard_map, check_locality)
        for uid, value in items.items():
            table._parts[shard_map.route(uid)][uid] = value
        return table

    def _owner_part(self, uid: int, mutating: bool) -> dict:
        shard = self.shard_map.route(uid)
        if mutating and self.check_locality:
            running_on = getattr(_current_shard, "index", None)
            if running_on is not None and running_on != shard:
                raise AssertionError(
                    f"uid {uid} owned by shard {shard} but mutated on shard {running_on}"
                )
        return self._parts[shard]

    def get(self, uid: int, default=None):
        return self._owner_part(uid, mutating=False).get(uid, default)

    def set(self, uid: int, value) -> None:
        self._owner_part(uid, mutating=True)[uid] = value

    def __contains__(self, uid: int) -> bool:
        return uid in self._owner_part(uid, mutating=False)

    def __len__(self) -> int:
        return sum(len(p) for p in self._parts)

    def items(self):
        for part in self._parts:
            yield from list(part.items())

    def values(self):
        for part in self._parts:
            yield from list(part.values())

    def keys(self):
        for part in self._parts:
            yield from list(part.keys())

    def to_dict(self) -> dict:
        out = {}
        for part in self._parts:
            out.update(part)
        return out

    def partition_of(self, uid: int) -> int:
        """Shard index whose partition physically holds (or would hold) uid."""
        return self.shard_map.route(uid)


class ShardPool:
    """One worker thread per shard, each draining a dedicated task queue.

    Tasks submitted for the same shard execute in submission order; tasks on
    different shards run concurrently. ``quiesce`` parks every worker at a
    barrier so a caller can swap shared state with no writer running.
    """

    _STOP = object()

    def __init__(self, shard_map: ShardMap):
        self.shard_map = shard_map
        self._queues: list[queue.Queue] = [queue.Queue() for _ in range(shard_map.num_shards)]
        self._threads = [
            threading.Thread(target=self._run, args=(i,), daemon=True, name=f"shard-{i}")
            for i in range(shard_map.num_shards)
        ]
        self._closed = False
        for t in self._threads:
            t.start()

    def _run(self, index: int) -> None:
        _current_shard.index = index
        q = self._queues[index]
        while True:
            task = q.get()
            if task is self._STOP:
                return
            fn, future = task
            if not future.set_running_or_notify_cancel():
                continue
            try:
                future.set_result(fn())
            except BaseException as exc:  # propagate to the waiter
                future.set_exception(exc)

    def submit_for(self, uid: int, fn) -> Future:
        return self.submit(self.shard_map.route(uid), fn)

    def submit(self, shard: int, fn) -> Future:
        if self._closed:
            raise RuntimeError("pool is closed")
        future: Future = Future()
        self._queues[shard].put((fn, future))
        return future

    @contextmanager
    def quiesce(self):
        """Hold every worker at a barrier for the duration of the block."""
        arrived = threading.Barrier(self.shard_map.num_shards + 1)
        resume = threading.Event()

        def _hold():
            arrived.wait()
            resume.wait()

        futures = [self.submit(i, _hold) for i in range(self.shard_map.num_shards)]
        arrived.wait()
        try:
            yield
        finally:
            resume.set()
            for f in futures:
                f.result()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for q in self._queues:
            q.put(self._STOP)
        for t in self._threads:
            t.join(timeout=5)


def current_shard() -> int | None:
    """Shard index of the calling thread, if it is a shard worker."""
    return getattr(_current_shard, "index", None)
