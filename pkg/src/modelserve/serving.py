"""The serving front door: point predictions, bandit-augmented topK, and the
observe path that folds feedback into per-user models.

A ModelEngine owns one model: its active version, per-user learner states and
weights (sharded by uid), the feature and prediction caches, the durable
observation log, and the lifecycle machinery that watches error trends and
swaps in retrained versions. Reads run on the caller's thread against an
immutable snapshot of the active version; writes are routed to the uid's
shard worker, which serializes updates per user.
"""

from __future__ import annotations

import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import learner, lifecycle, storage, trainer
from .caches import LruCache, NullCache, feature_key, item_cache_key, prediction_key
from .cluster import ShardMap, ShardPool, ShardedTable
from .core import FeatureParams, ModelSchema, ModelVersion, featurize
from .errors import (
    DimensionMismatch,
    EmptyLog,
    ModelServeError,
    RetrainInFlight,
    UnknownItem,
)


@dataclass
class EngineConfig:
    num_shards: int = 4
    prediction_cache: int = 100_000
    feature_cache: int = 50_000
    flush_every: int = 1
    staleness_window: int = 500
    staleness_min_window: int = 100
    staleness_threshold: float = 0.05
    staleness_source: str = "all"  # "all" or "exploratory"
    auto_retrain: bool = False
    als_iterations: int = trainer.DEFAULT_ITERATIONS
    als_seed: int = 0
    retained_versions: int = 3
    check_locality: bool = False


@dataclass(frozen=True)
class PredictResult:
    item: object
    score: float
    version: int
    cached: bool


@dataclass(frozen=True)
class TopKResult:
    results: list
    skipped: int
    version: int


@dataclass(frozen=True)
class ObserveResult:
    error: float
    version: int
    seq: int


class _Live:
    """Mutable serving state for one installed version. The object itself is
    swapped atomically; its tables are mutated only by shard workers."""

    __slots__ = ("version", "weights", "states", "last_seq", "_bootstrap_cache")

    def __init__(self, version: ModelVersion, weights: ShardedTable,
                 states: ShardedTable, last_seq: int):
        self.version = version
        self.weights = weights
        self.states = states
        self.last_seq = last_seq
        self._bootstrap_cache: np.ndarray | None = None


@dataclass(frozen=True)
class _MirrorRecord:
    seq: int
    uid: int
    item: object
    label: float
    timestamp: float
    exploratory: bool


class ModelEngine:
    """Serving, online learning, and lifecycle for one named model."""

    def __init__(self, schema: ModelSchema, data_dir, config: EngineConfig | None = None):
        self.schema = schema
        self.config = config or EngineConfig()
        self.data_dir = data_dir
        cfg = self.config
        self.shard_map = ShardMap(cfg.num_shards)
        self._pool = ShardPool(self.shard_map)
        self._log = storage.ObservationLog(
            storage.log_path(data_dir, schema.name), flush_every=cfg.flush_every)
        self._mirror: list[_MirrorRecord] = []
        self._load_mirror()
        self.errors = lifecycle.ErrorAggregate(
            window=cfg.staleness_window,
            exploratory_only=cfg.staleness_source == "exploratory")
        self.history = lifecycle.VersionHistory(retain=cfg.retained_versions)
        self._guard = lifecycle.RetrainGuard()
        self._control = threading.Lock()
        self._retrain_pool = ThreadPoolExecutor(max_workers=1,
                                                thread_name_prefix=f"retrain-{schema.name}")
        if cfg.prediction_cache > 0:
            self._pred_cache = LruCache(cfg.prediction_cache, group_key=lambda k: k[2])
        else:
            self._pred_cache = NullCache()
        self._feat_cache = LruCache(cfg.feature_cache) if cfg.feature_cache > 0 else NullCache()
        self._live: _Live | None = None
        self.replay_skipped = 0

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def create(cls, schema: ModelSchema, params: FeatureParams, data_dir,
               config: EngineConfig | None = None) -> "ModelEngine":
        """Start a brand-new model from feature params, with no users yet."""
        engine = cls(schema, data_dir, config)
        bundle = trainer.build_version(params, {}, schema, [], None,
                                       last_seq=engine._log.last_seq)
        engine._install(bundle, reason="create")
        return engine

    @classmethod
    def open(cls, data_dir, name: str, config: EngineConfig | None = None) -> "ModelEngine":
        """Recover a model from its active snapshot plus the log suffix."""
        active = storage.read_active_version(data_dir, name)
        if active is None:
            versions = storage.list_snapshot_versions(data_dir, name)
            if not versions:
                raise ModelServeError(f"no snapshots found for model {name!r}")
            active = versions[-1]
        bundle = storage.load_snapshot(storage.snapshot_path(data_dir, name, active))
        engine = cls(bundle.version.schema, data_dir, config)
        engine._install(bundle, reason="open", save=False)
        return engine

    def install_bundle(self, bundle: trainer.VersionBundle, reason: str = "train",
                       metrics: dict | None = None) -> None:
        """Install a freshly built version (e.g. from the offline trainer)."""
        self._install(bundle, reason=reason, metrics=metrics)

    def _load_mirror(self) -> None:
        for rec in storage.read_log(self._log.path):
            if rec.model != self.schema.name:
                continue
            self._mirror.append(_MirrorRecord(rec.seq, rec.uid, rec.item, rec.label,
                                              rec.timestamp, rec.exploratory))

    # ------------------------------------------------------------------
    # read path

    @property
    def active_version(self) -> int:
        return self._live.version.version

    def predict(self, uid: int, item) -> PredictResult:
        """Point prediction for (uid, item): cache lookup, else resolve the
        user's weights (bootstrapping if absent), featurize, dot product."""
        live = self._live
        number = live.version.version
        key = item_cache_key(item)
        pkey = prediction_key(self.schema.name, number, uid, key)
        score = self._pred_cache.get(pkey)
        if score is not None:
            return PredictResult(item=item, score=score, version=number, cached=True)
        f = self._feature_vector(live, key, item)
        w = self._resolve_weights(live, uid)
        score = float(w @ f)
        self._pred_cache.put(pkey, score)
        return PredictResult(item=item, score=score, version=number, cached=False)

    def topk(self, uid: int, items, k: int) -> TopKResult:
        """Highest-scoring k items, ranked by prediction plus the bandit
        uncertainty bonus when the schema's exploration alpha is positive.
        Ties break on ascending item id; unknown items are skipped."""
        if k < 1:
            raise ValueError("k must be >= 1")
        items = list(items)
        if not items:
            raise ValueError("items must be non-empty")
        live = self._live
        number = live.version.version
        name = self.schema.name
        alpha = self.schema.exploration
        keys = [item_cache_key(it) for it in items]
        pkeys = [prediction_key(name, number, uid, key) for key in keys]
        means = self._pred_cache.get_many(pkeys)

        new_preds = []
        new_feats = []
        feats: list = [None] * len(items)
        need_feats = alpha > 0
        w = None
        skipped = set()
        for i, item in enumerate(items):
            if means[i] is not None and not need_feats:
                continue
            fkey = feature_key(name, number, keys[i])
            f = self._feat_cache.get(fkey)
            if f is None:
                try:
                    f = featurize(live.version.params, item)
                except (UnknownItem, DimensionMismatch):
                    skipped.add(i)
                    means[i] = None
                    continue
                new_feats.append((fkey, f))
            feats[i] = f
            if means[i] is None:
                if w is None:
                    w = self._resolve_weights(live, uid)
                score = float(w @ f)
                means[i] = score
                new_preds.append((pkeys[i], score))
        if new_feats:
            self._feat_cache.put_many(new_feats)
        if new_preds:
            self._pred_cache.put_many(new_preds)

        valid = [i for i in range(len(items)) if i not in skipped]
        if not valid:
            return TopKResult(results=[], skipped=len(skipped), version=number)

        if alpha > 0:
            state = live.states.get(uid)
            if state is None:
                state = learner.fresh_state(self.schema.dimension,
                                            self.schema.regularization)
            effective = [means[i] + alpha * float(np.sqrt(learner.quadratic_form(state, feats[i])))
                         for i in valid]
        else:
            effective = [means[i] for i in valid]

        if all(isinstance(keys[i], int) for i in valid):
            score_arr = np.array(effective)
            id_arr = np.array([keys[i] for i in valid], dtype=np.uint64)
            order = np.lexsort((id_arr, -score_arr))[:k]
            results = [(items[valid[j]], float(score_arr[j])) for j in order]
        else:
            ranked = sorted(range(len(valid)), key=lambda j: (-effective[j], keys[valid[j]]))
            results = [(items[valid[j]], float(effective[j])) for j in ranked[:k]]
        return TopKResult(results=results, skipped=len(skipped), version=number)

    def bandit_score(self, uid: int, item) -> tuple[float, float]:
        """(predicted mean, alpha-scaled uncertainty) for one item."""
        live = self._live
        f = self._feature_vector(live, item_cache_key(item), item)
        state = live.states.get(uid)
        if state is None:
            state = learner.fresh_state(self.schema.dimension, self.schema.regularization)
        mean = float(self._resolve_weights(live, uid) @ f)
        bonus = self.schema.exploration * float(np.sqrt(learner.quadratic_form(state, f)))
        return mean, bonus

    def _feature_vector(self, live: _Live, key, item) -> np.ndarray:
        fkey = feature_key(self.schema.name, live.version.version, key)
        f = self._feat_cache.get(fkey)
        if f is None:
            f = featurize(live.version.params, item)
            self._feat_cache.put(fkey, f)
        return f

    def _resolve_weights(self, live: _Live, uid: int) -> np.ndarray:
        w = live.weights.get(uid)
        if w is not None:
            return w
        cached = live._bootstrap_cache
        if cached is None:
            cached = learner.bootstrap_weights(live.weights.values(), self.schema.dimension)
            live._bootstrap_cache = cached
        return cached

    # ------------------------------------------------------------------
    # write path

    def observe(self, uid: int, item, label: float, timestamp: float | None = None,
                exploratory: bool = False) -> ObserveResult:
        """Record feedback: append to the log, run the prequential update on
        the uid's learner state, purge that user's cached predictions."""
        return self.observe_async(uid, item, label, timestamp, exploratory).result()

    def observe_async(self, uid: int, item, label: float, timestamp: float | None = None,
                      exploratory: bool = False) -> Future:
        uid = int(uid)
        return self._pool.submit_for(
            uid, lambda: self._observe_on_shard(uid, item, label, timestamp, exploratory))

    def _observe_on_shard(self, uid, item, label, timestamp, exploratory) -> ObserveResult:
        live = self._live
        key = item_cache_key(item)
        f = self._feature_vector(live, key, item)
        label = float(label)
        if not np.isfinite(label):
            raise DimensionMismatch("label must be finite")
        # write-ahead: if the append fails, no in-memory state changes
        seq = self._log.append(self.schema.name, uid, item, label,
                               timestamp=timestamp, exploratory=exploratory)
        self._mirror.append(_MirrorRecord(seq, uid, item, label,
                                          timestamp if timestamp is not None else 0.0,
                                          exploratory))
        state = live.states.get(uid)
        if state is None:
            state = learner.fresh_state(self.schema.dimension, self.schema.regularization)
        err, state = learner.cross_validate_update(state, f, label)
        live.states.set(uid, state)
        live.weights.set(uid, learner.solve_weights(state))
        live._bootstrap_cache = None
        self.errors.record(uid, err, exploratory=exploratory)
        self._pred_cache.purge_group(uid)
        if self.config.auto_retrain:
            self._maybe_auto_retrain()
        return ObserveResult(error=err, version=live.version.version, seq=seq)

    def _maybe_auto_retrain(self) -> None:
        if self._guard.in_flight:
            return
        verdict = lifecycle.staleness_check(self.errors, self.config.staleness_threshold,
                                            self.config.staleness_min_window)
        if verdict is lifecycle.Staleness.STALE:
            try:
                self.trigger_retrain(reason="staleness")
            except (RetrainInFlight, EmptyLog):
                pass

    # ------------------------------------------------------------------
    # lifecycle

    def staleness(self) -> lifecycle.Staleness:
        return lifecycle.staleness_check(self.errors, self.config.staleness_threshold,
                                         self.config.staleness_min_window)

    def trigger_retrain(self, reason: str = "manual") -> Future:
        """Retrain feature params and all user weights from the log snapshot
        on the background worker, then atomically install the new version.
        Raises RetrainInFlight if a job is already running."""
        if self._live.version.params.kind != "materialized":
            raise ModelServeError("embedded retraining requires a materialized model")
        self._guard.acquire()
        try:
            mirror = sorted(self._mirror, key=lambda r: r.seq)
            if not mirror:
                raise EmptyLog("no observations to retrain on")
            last_seq = mirror[-1].seq
            old_version = self._live.version
            records = self.history.records()
            next_number = max(old_version.version,
                              records[-1].version if records else 0) + 1
            pred_keys = self._pred_cache.keys()
            feat_keys = self._feat_cache.keys()
        except BaseException:
            self._guard.release()
            raise

        def job():
            try:
                triples = [(r.uid, r.item, r.label) for r in mirror]
                result = trainer.als_retrain(triples, self.schema, warm_start=old_version,
                                             iterations=self.config.als_iterations,
                                             seed=self.config.als_seed)
                bundle = trainer.build_version(result.params, result.user_weights,
                                               self.schema, triples, old_version,
                                               last_seq=last_seq, number=next_number)
                metrics = {"train_rmse": result.train_rmse,
                           "objective": result.objective_trace[-1],
                           "observations": len(mirror),
                           "reason": reason}
                self._install(bundle, reason=reason, metrics=metrics,
                              pred_keys=pred_keys, feat_keys=feat_keys)
                return bundle.version.version
            finally:
                self._guard.release()

        return self._retrain_pool.submit(job)

    def rollback(self, target: int) -> None:
        """Switch the active version back to a retained snapshot. Caches are
        fully invalidated and the error window resets; online updates made
        since that version was installed are discarded (the log keeps them)."""
        with self._control:
            capture: trainer.VersionBundle = self.history.rollback_to(target)
            restored = self._live_from_bundle(capture)
            current_seq = self._log.last_seq
            with self._pool.quiesce():
                restored.last_seq = current_seq
                self._live = restored
                self._pred_cache.clear()
                self._feat_cache.clear()
                self.errors.reset_window()
            refreshed = replace(capture, last_seq=current_seq)
            storage.save_snapshot(refreshed,
                                  storage.snapshot_path(self.data_dir, self.schema.name, target))
            storage.write_active_version(self.data_dir, self.schema.name, target)

    def _live_from_bundle(self, bundle: trainer.VersionBundle) -> _Live:
        cfg_check = self.config.check_locality
        weights = ShardedTable.from_dict(dict(bundle.version.user_weights), self.shard_map,
                                         check_locality=cfg_check)
        states = ShardedTable.from_dict(dict(bundle.states), self.shard_map,
                                        check_locality=cfg_check)
        return _Live(bundle.version, weights, states, bundle.last_seq)

    def _install(self, bundle: trainer.VersionBundle, reason: str,
                 metrics: dict | None = None, save: bool = True,
                 pred_keys: list | None = None, feat_keys: list | None = None) -> None:
        """Swap in a new version: replay observations that arrived after the
        bundle's log position, pre-warm caches, and move the live pointer,
        all while shard workers are quiesced."""
        new_live = self._live_from_bundle(bundle)
        params = bundle.version.params
        number = bundle.version.version
        lam = self.schema.regularization
        with self._control, self._pool.quiesce():
            for rec in sorted(self._mirror, key=lambda r: r.seq):
                if rec.seq <= new_live.last_seq:
                    continue
                try:
                    f = featurize(params, rec.item)
                except (UnknownItem, DimensionMismatch):
                    self.replay_skipped += 1
                    continue
                state = new_live.states.get(rec.uid)
                if state is None:
                    state = learner.fresh_state(self.schema.dimension, lam)
                state = learner.absorb(state, f, rec.label)
                new_live.states.set(rec.uid, state)
                new_live.weights.set(rec.uid, learner.solve_weights(state))
            new_live.last_seq = self._log.last_seq

            plan = None
            if pred_keys or feat_keys:
                plan = trainer.prewarm_plan(pred_keys or [], feat_keys or [], params, number,
                                            lambda uid: self._resolve_weights(new_live, uid))
            self._pred_cache.clear()
            self._feat_cache.clear()
            if plan is not None:
                self._feat_cache.put_many(plan.features)
                self._pred_cache.put_many(plan.predictions)
                if plan.dropped and metrics is not None:
                    metrics = dict(metrics, prewarm_dropped=plan.dropped)
            self._live = new_live
            self.errors.reset_window()
            capture = trainer.VersionBundle(
                version=ModelVersion(schema=self.schema, params=params,
                                     user_weights=new_live.weights.to_dict(),
                                     version=number),
                states=new_live.states.to_dict(),
                last_seq=new_live.last_seq)
            self.history.install(number, capture, reason=reason, metrics=metrics)
        if save:
            storage.save_snapshot(capture,
                                  storage.snapshot_path(self.data_dir, self.schema.name, number))
            storage.write_active_version(self.data_dir, self.schema.name, number)

    # ------------------------------------------------------------------
    # introspection / maintenance

    def status(self) -> dict:
        window = self.errors.window_snapshot()
        return {
            "model": self.schema.name,
            "version": self.active_version,
            "users": len(self._live.weights),
            "observations": self._log.last_seq,
            "window_mean_error": (sum(window) / len(window)) if window else 0.0,
            "window_length": len(window),
            "window_slope": lifecycle.ols_slope(window),
            "staleness": self.staleness().value,
            "retrain_in_flight": self._guard.in_flight,
            "versions": [r.version for r in self.history.records()],
            "cache": {
                "prediction": {"size": len(self._pred_cache),
                               "hits": self._pred_cache.hits,
                               "misses": self._pred_cache.misses},
                "feature": {"size": len(self._feat_cache),
                            "hits": self._feat_cache.hits,
                            "misses": self._feat_cache.misses},
            },
        }

    def observation_count(self) -> int:
        return len(self._mirror)

    def clear_caches(self) -> None:
        self._pred_cache.clear()
        self._feat_cache.clear()

    def snapshot_now(self) -> trainer.VersionBundle:
        """Capture the live state as a bundle (quiesced, consistent)."""
        with self._pool.quiesce():
            live = self._live
            return trainer.VersionBundle(
                version=ModelVersion(schema=self.schema, params=live.version.params,
                                     user_weights=live.weights.to_dict(),
                                     version=live.version.version),
                states=live.states.to_dict(),
                last_seq=live.last_seq)

    def close(self) -> None:
        self._retrain_pool.shutdown(wait=True)
        self._pool.close()
        self._log.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
