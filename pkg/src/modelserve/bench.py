"""Benchmark harness: latency sweeps, the hybrid online/offline accuracy
experiment, bandit regret simulation, drift-to-retrain timing, and the
Zipfian cache workload.

Every benchmark is deterministic given its seed (latency columns aside) and
returns plain row dicts ready for CSV emission; the CLI renders companion
figures next to the CSV.
"""

from __future__ import annotations

import csv
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learner, lifecycle, trainer
from .core import FeatureParams, ModelSchema
from .datasets import Rating, zipf_indices
from .serving import EngineConfig, ModelEngine


def write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


class _TempModel:
    """Engine on a throwaway data dir, cleaned up on close."""

    def __init__(self, schema: ModelSchema, params: FeatureParams,
                 config: EngineConfig | None = None):
        self.dir = tempfile.mkdtemp(prefix="modelserve-bench-")
        self.engine = ModelEngine.create(schema, params, self.dir, config)

    def install(self, bundle):
        self.engine.install_bundle(bundle)

    def close(self):
        self.engine.close()
        shutil.rmtree(self.dir, ignore_errors=True)


# ----------------------------------------------------------------------
# latency

LATENCY_FIELDS = ["op", "d", "n", "cached", "trials", "mean_ms", "p99_ms"]


def run_latency_bench(
    d_values=(50, 100),
    itemset_sizes=(10, 100, 1000, 10000),
    trials: int = 5,
    k: int = 10,
    update_batches: int = 30,
    update_batch_size: int = 200,
    seed: int = 0,
    regularization: float = 0.1,
) -> list[dict]:
    """Times topK with cold and warm caches over itemset sizes, plus the
    per-observation online-update sweep across model dimensions."""
    rows = []
    rng = np.random.default_rng(seed)
    max_n = max(itemset_sizes)
    for d in d_values:
        table = {i: rng.normal(size=d) for i in range(max_n)}
        schema = ModelSchema(name="latbench", dimension=d, regularization=regularization)
        holder = _TempModel(schema, FeatureParams.materialized(table, d))
        engine = holder.engine
        engine.observe(1, 0, 1.0)  # materialize user 1 so predicts skip bootstrap
        try:
            for n in itemset_sizes:
                items = list(range(n))
                cold, warm = [], []
                for _ in range(trials):
                    engine.clear_caches()
                    t0 = time.perf_counter()
                    engine.topk(1, items, k)
                    cold.append(time.perf_counter() - t0)
                    t0 = time.perf_counter()
                    engine.topk(1, items, k)
                    warm.append(time.perf_counter() - t0)
                for cached, samples in ((False, cold), (True, warm)):
                    rows.append({
                        "op": "topk", "d": d, "n": n, "cached": cached, "trials": trials,
                        "mean_ms": float(np.mean(samples)) * 1e3,
                        "p99_ms": float(np.percentile(samples, 99)) * 1e3,
                    })
        finally:
            holder.close()

    for d in d_values:
        state = learner.fresh_state(d, regularization)
        feats = rng.normal(size=(update_batch_size, d))
        labels = rng.normal(size=update_batch_size)
        state = learner.absorb_stream(state, feats, labels)  # compile + warm
        batch_means = []
        for _ in range(update_batches):
            feats = rng.normal(size=(update_batch_size, d))
            labels = rng.normal(size=update_batch_size)
            t0 = time.perf_counter()
            state = learner.absorb_stream(state, feats, labels)
            batch_means.append((time.perf_counter() - t0) / update_batch_size)
        rows.append({
            "op": "update", "d": d, "n": 1, "cached": False,
            "trials": update_batches * update_batch_size,
            "mean_ms": float(np.mean(batch_means)) * 1e3,
            "p99_ms": float(np.percentile(batch_means, 99)) * 1e3,
        })
    return rows


# ----------------------------------------------------------------------
# hybrid online/offline accuracy

HYBRID_FIELDS = ["seed", "protocol", "users", "excluded", "eval_pairs",
                 "baseline_rmse", "online_rmse", "offline_rmse",
                 "online_gain_pct", "offline_gain_pct", "gain_ratio"]


@dataclass
class HybridReport:
    rows: list[dict] = field(default_factory=list)
    online_gain_pct: float = 0.0
    offline_gain_pct: float = 0.0
    ratio: float = 0.0


def _split_per_user(ratings, seed, protocol, base_count, online_count, min_held):
    by_user: dict[int, list[Rating]] = {}
    for r in ratings:
        by_user.setdefault(r.uid, []).append(r)
    rng = np.random.default_rng(seed)
    base, online, held = [], [], []
    excluded = 0
    for uid in sorted(by_user):
        rs = by_user[uid]
        idx = rng.permutation(len(rs))
        if protocol == "half70":
            n_base = len(rs) // 2
            rest = len(rs) - n_base
            n_online = int(round(rest * 0.7))
            if n_base < 1 or rest - n_online < min_held:
                excluded += 1
                continue
            cut1, cut2 = n_base, n_base + n_online
        else:
            if len(rs) < base_count + online_count + min_held:
                excluded += 1
                continue
            cut1, cut2 = base_count, base_count + online_count
        base.extend(rs[i] for i in idx[:cut1])
        online.extend(rs[i] for i in idx[cut1:cut2])
        held.extend(rs[i] for i in idx[cut2:])
    return base, online, held, excluded


def _clipped_rmse(pairs, weights, table, fallback) -> tuple[float, int]:
    se, n = 0.0, 0
    for r in pairs:
        x = table.get(r.item)
        if x is None:
            continue
        w = weights.get(r.uid, fallback)
        pred = min(5.0, max(1.0, float(w @ x)))
        se += (r.rating - pred) ** 2
        n += 1
    return float(np.sqrt(se / n)) if n else 0.0, n


def run_hybrid_eval(
    ratings,
    d: int = 10,
    regularization: float = 0.1,
    split_seeds=(0, 1, 2),
    protocol: str = "ten_plus_seven",
    base_count: int = 10,
    online_count: int = 7,
    min_held: int = 1,
    iterations: int = 15,
) -> HybridReport:
    """Measures how much of the accuracy gain from a full offline retrain the
    cheap online updates recover.

    Per split seed: train factors on the base slice, score the held-out
    slice; absorb the online slice into per-user states under fixed factors
    and re-score; then fully retrain on base+online and re-score. Reports
    percentage RMSE improvements and their ratio. Predictions are clipped to
    the valid rating range before scoring.
    """
    report = HybridReport()
    for seed in split_seeds:
        base, online, held, excluded = _split_per_user(
            ratings, seed, protocol, base_count, online_count, min_held)
        if not base:
            raise ValueError("no users satisfy the per-user rating minimum")
        schema = ModelSchema(name="hybrid", dimension=d, regularization=regularization)
        base_triples = [(r.uid, r.item, r.rating) for r in base]
        trained = trainer.als_retrain(base_triples, schema, iterations=iterations, seed=seed)
        table = dict(trained.params.table)
        fallback = learner.bootstrap_weights(trained.user_weights.values(), d)
        # evaluate all three models on the same held-out pairs (items known to theta)
        eval_pairs = [r for r in held if r.item in table]

        baseline, n_eval = _clipped_rmse(eval_pairs, trained.user_weights, table, fallback)

        extras: dict[int, list[Rating]] = {}
        for r in online:
            if r.item in table:
                extras.setdefault(r.uid, []).append(r)
        base_by_user: dict[int, list[Rating]] = {}
        for r in base:
            base_by_user.setdefault(r.uid, []).append(r)
        online_weights = dict(trained.user_weights)
        for uid, extra in extras.items():
            state = learner.fresh_state(d, regularization)
            history = base_by_user.get(uid, []) + extra
            feats = np.stack([table[r.item] for r in history])
            labels = np.array([r.rating for r in history])
            state = learner.absorb_stream(state, feats, labels)
            online_weights[uid] = learner.solve_weights(state)
        online_rmse, _ = _clipped_rmse(eval_pairs, online_weights, table, fallback)

        retrained = trainer.als_retrain(
            base_triples + [(r.uid, r.item, r.rating) for r in online],
            schema, iterations=iterations, seed=seed)
        offline_rmse, _ = _clipped_rmse(eval_pairs, retrained.user_weights,
                                        dict(retrained.params.table),
                                        learner.bootstrap_weights(
                                            retrained.user_weights.values(), d))

        online_gain = (baseline - online_rmse) / baseline * 100.0 if baseline else 0.0
        offline_gain = (baseline - offline_rmse) / baseline * 100.0 if baseline else 0.0
        report.rows.append({
            "seed": seed, "protocol": protocol,
            "users": len(base_by_user), "excluded": excluded, "eval_pairs": n_eval,
            "baseline_rmse": baseline, "online_rmse": online_rmse,
            "offline_rmse": offline_rmse,
            "online_gain_pct": online_gain, "offline_gain_pct": offline_gain,
            "gain_ratio": online_gain / offline_gain if offline_gain else 0.0,
        })
    report.online_gain_pct = float(np.mean([r["online_gain_pct"] for r in report.rows]))
    report.offline_gain_pct = float(np.mean([r["offline_gain_pct"] for r in report.rows]))
    report.ratio = (report.online_gain_pct / report.offline_gain_pct
                    if report.offline_gain_pct else 0.0)
    return report


# ----------------------------------------------------------------------
# bandit regret

BANDIT_FIELDS = ["alpha", "step", "mean_cumulative_regret"]


@dataclass
class BanditReport:
    rows: list[dict] = field(default_factory=list)
    final_regret: dict[float, float] = field(default_factory=dict)


def run_bandit_bench(
    d: int = 5,
    n_items: int = 20,
    horizon: int = 2000,
    alphas=(0.0, 0.1, 0.5, 1.0),
    seeds=tuple(range(20)),
    noise: float = 0.05,
    adversarial_init: bool = True,
    regularization: float = 0.1,
) -> BanditReport:
    """Cumulative regret of topK(k=1) serving under a planted linear model.

    Feedback labels are true score plus noise. With adversarial_init the
    state starts from one misleading observation that underestimates the
    truly best item, the trap a purely greedy policy cannot escape.
    """
    report = BanditReport()
    curves = {alpha: np.zeros(horizon) for alpha in alphas}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        feats = rng.normal(0.0, 1.0, size=(n_items, d)) / np.sqrt(d)
        w_star = rng.normal(0.0, 1.0, size=d)
        true_scores = feats @ w_star
        best_item = int(np.argmax(true_scores))
        best_score = float(true_scores[best_item])
        items = list(range(n_items))
        for a_idx, alpha in enumerate(alphas):
            schema = ModelSchema(name="bandit", dimension=d,
                                 regularization=regularization, exploration=alpha)
            params = FeatureParams.materialized({i: feats[i] for i in items}, d)
            holder = _TempModel(schema, params, EngineConfig(num_shards=1))
            engine = holder.engine
            noise_rng = np.random.default_rng([seed, a_idx])
            try:
                if adversarial_init:
                    engine.observe(7, best_item, best_score - 2.0)
                cum = 0.0
                for step in range(horizon):
                    choice = engine.topk(7, items, 1).results[0][0]
                    cum += best_score - float(true_scores[choice])
                    label = float(true_scores[choice]) + noise * noise_rng.standard_normal()
                    engine.observe(7, choice, label)
                    curves[alpha][step] += cum
            finally:
                holder.close()
    n_seeds = len(list(seeds))
    for alpha in alphas:
        curves[alpha] /= n_seeds
        report.final_regret[alpha] = float(curves[alpha][-1])
        for step in range(horizon):
            report.rows.append({"alpha": alpha, "step": step + 1,
                                "mean_cumulative_regret": float(curves[alpha][step])})
    return report


# ----------------------------------------------------------------------
# drift detection end to end

DRIFT_FIELDS = ["run", "step", "phase", "error", "version"]


@dataclass
class DriftReport:
    rows: list[dict] = field(default_factory=list)
    control_triggered: bool = False
    drift_observations_to_stale: int | None = None
    retrained_version: int | None = None
    pre_retrain_trailing_error: float = 0.0
    post_retrain_trailing_error: float = 0.0


def _planted_serving_model(rng, n_users, n_items, d, noise, base_per_user,
                           regularization, engine_config):
    user_true = rng.normal(0.0, 0.7, size=(n_users, d))
    item_true = rng.normal(0.0, 0.7, size=(n_items, d))
    base = []
    for u in range(n_users):
        picks = rng.choice(n_items, size=base_per_user, replace=False)
        for it in picks:
            label = float(user_true[u] @ item_true[it]) + noise * rng.standard_normal()
            base.append((u, int(it), label))
    schema = ModelSchema(name="drift", dimension=d, regularization=regularization)
    trained = trainer.als_retrain(base, schema, iterations=10, seed=0)
    bundle = trainer.build_version(trained.params, trained.user_weights, schema, base)
    holder = _TempModel(schema, trained.params, engine_config)
    holder.engine.install_bundle(bundle)
    return holder, user_true, item_true


def run_drift_bench(
    min_window: int = 80,
    window: int = 240,
    threshold_slope: float = 0.01,
    seed: int = 7,
    d: int = 4,
    n_users: int = 24,
    n_items: int = 60,
    noise: float = 0.05,
    base_per_user: int = 40,
    control_factor: int = 10,
    drift_limit_factor: int = 4,
    post_steps: int = 300,
    trailing: int = 40,
) -> DriftReport:
    """Converge a model, inject a label-negation shift, and measure how many
    observations the staleness detector needs to fire and retrain.

    Runs a no-drift control stream first (the detector must stay quiet),
    then the drift run: a clean warm phase fills the error window, labels
    flip sign, the window slope turns positive, and the triggered retrain
    must leave trailing error below its pre-retrain level.
    """
    report = DriftReport()
    cfg = EngineConfig(num_shards=2, staleness_window=window,
                       staleness_min_window=min_window,
                       staleness_threshold=threshold_slope)

    def clean_label(rng, u, it, user_true, item_true):
        return float(user_true[u] @ item_true[it]) + noise * rng.standard_normal()

    # control: clean stream, no trigger expected
    rng = np.random.default_rng(seed)
    holder, user_true, item_true = _planted_serving_model(
        rng, n_users, n_items, d, noise, base_per_user, 0.1, cfg)
    try:
        engine = holder.engine
        for step in range(control_factor * min_window):
            u = int(rng.integers(n_users))
            it = int(rng.integers(n_items))
            res = engine.observe(u, it, clean_label(rng, u, it, user_true, item_true))
            report.rows.append({"run": "control", "step": step + 1, "phase": "clean",
                                "error": res.error, "version": res.version})
            if engine.staleness() is lifecycle.Staleness.STALE:
                report.control_triggered = True
                break
    finally:
        holder.close()

    # drift: warm the window clean, then negate all labels until stale
    rng = np.random.default_rng(seed + 1)
    holder, user_true, item_true = _planted_serving_model(
        rng, n_users, n_items, d, noise, base_per_user, 0.1, cfg)
    try:
        engine = holder.engine
        step = 0
        errors: list[float] = []

        def observe_one(drifted: bool, phase: str):
            nonlocal step
            step += 1
            u = int(rng.integers(n_users))
            it = int(rng.integers(n_items))
            label = clean_label(rng, u, it, user_true, item_true)
            if drifted:
                label = -float(user_true[u] @ item_true[it]) + noise * rng.standard_normal()
            res = engine.observe(u, it, label)
            errors.append(res.error)
            report.rows.append({"run": "drift", "step": step, "phase": phase,
                                "error": res.error, "version": res.version})

        for _ in range(window):
            observe_one(False, "clean")
        drifted_seen = 0
        for _ in range(drift_limit_factor * min_window):
            observe_one(True, "drift")
            drifted_seen += 1
            if engine.staleness() is lifecycle.Staleness.STALE:
                report.drift_observations_to_stale = drifted_seen
                break
        if report.drift_observations_to_stale is not None:
            report.pre_retrain_trailing_error = float(np.mean(errors[-trailing:]))
            engine.trigger_retrain(reason="drift").result()
            report.retrained_version = engine.active_version
            for _ in range(post_steps):
                observe_one(True, "post")
            report.post_retrain_trailing_error = float(np.mean(errors[-trailing:]))
    finally:
        holder.close()
    return report


# ----------------------------------------------------------------------
# cache workload

def run_zipf_cache_bench(
    n_items: int = 1000,
    capacity_fraction: float = 0.10,
    zipf_s: float = 1.0,
    requests: int = 100_000,
    d: int = 10,
    seed: int = 0,
) -> float:
    """Feature-cache hit rate under a Zipfian item workload with the cache
    capped at a fraction of the catalog. Returns the hit rate."""
    rng = np.random.default_rng(seed)
    table = {i: rng.normal(size=d) for i in range(n_items)}
    schema = ModelSchema(name="zipfbench", dimension=d)
    cfg = EngineConfig(num_shards=1, prediction_cache=0,
                       feature_cache=max(1, int(n_items * capacity_fraction)))
    holder = _TempModel(schema, FeatureParams.materialized(table, d), cfg)
    try:
        engine = holder.engine
        items = zipf_indices(n_items, zipf_s, requests, rng)
        uids = rng.integers(0, 10 ** 9, size=requests)
        for uid, item in zip(uids, items):
            engine.predict(int(uid), int(item))
        return engine._feat_cache.hit_rate()
    finally:
        holder.close()
