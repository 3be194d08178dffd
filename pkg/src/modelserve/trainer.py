"""Embedded offline trainer: alternating least squares over the observation
log, version construction, and cache pre-warming.

The trainer is the in-process stand-in for a cluster compute framework. It
refits the item factor table (theta) and all user weights from the full log,
then packages the result as a new immutable ModelVersion whose learner states
are rebuilt by replaying each user's observations, so online updates continue
seamlessly after the swap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import learner
from .core import FeatureParams, ModelSchema, ModelVersion, featurize, predict_point
from .errors import DimensionMismatch, EmptyLog, UnknownItem

DEFAULT_ITERATIONS = 15
DEFAULT_REL_TOL = 1e-4
INIT_SCALE = 0.05


@dataclass
class AlsResult:
    params: FeatureParams
    user_weights: dict[int, np.ndarray]
    objective_trace: list[float]
    train_rmse: float


@dataclass
class VersionBundle:
    """A ModelVersion plus the learner states that continue its online life.

    last_seq records the log position the bundle covers; replaying records
    after it reproduces the live state.
    """

    version: ModelVersion
    states: dict[int, learner.UserLearnerState] = field(default_factory=dict)
    last_seq: int = 0


def _ridge_solve(feats: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    d = feats.shape[1]
    gram = feats.T @ feats + lam * np.eye(d)
    return np.linalg.solve(gram, feats.T @ targets)


def als_retrain(
    observations,
    schema: ModelSchema,
    warm_start: ModelVersion | None = None,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    rel_tol: float = DEFAULT_REL_TOL,
) -> AlsResult:
    """Alternating ridge solves for the matrix factorization objective.

    Each pass solves every user's weights with item factors fixed, then every
    item's factors with user weights fixed; both half-steps are exact
    minimizers, so the objective never increases. Iteration stops after
    ``iterations`` passes or when the relative improvement drops below
    ``rel_tol``, and a final user half-step leaves the returned weights
    consistent with the returned factor table.

    Deterministic given (observations, schema, seed, warm_start).
    """
    obs = [(int(u), int(i), float(r)) for u, i, r, *_ in observations]
    if not obs:
        raise EmptyLog("cannot retrain on an empty observation log")
    d, lam = schema.dimension, schema.regularization

    uids = sorted({u for u, _, _ in obs})
    iids = sorted({i for _, i, _ in obs})
    urow = {u: k for k, u in enumerate(uids)}
    irow = {i: k for k, i in enumerate(iids)}
    u_idx = np.array([urow[u] for u, _, _ in obs])
    i_idx = np.array([irow[i] for _, i, _ in obs])
    ratings = np.array([r for _, _, r in obs])

    rng = np.random.default_rng(seed)
    user_mat = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(len(uids), d))
    item_mat = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(len(iids), d))
    if warm_start is not None:
        for u, w in warm_start.user_weights.items():
            if u in urow:
                user_mat[urow[u]] = np.asarray(w, dtype=np.float64)
        if warm_start.params.kind == "materialized":
            for i, x in warm_start.params.table.items():
                if i in irow:
                    item_mat[irow[i]] = np.asarray(x, dtype=np.float64)

    by_user = _group_rows(u_idx, len(uids))
    by_item = _group_rows(i_idx, len(iids))

    def objective() -> float:
        pred = np.einsum("ij,ij->i", user_mat[u_idx], item_mat[i_idx])
        reg = (user_mat ** 2).sum() + (item_mat ** 2).sum()
        return float(lam * reg + ((ratings - pred) ** 2).sum())

    def user_step():
        for k in range(len(uids)):
            rows = by_user[k]
            feats = item_mat[i_idx[rows]]
            user_mat[k] = _ridge_solve(feats, ratings[rows], lam)

    trace = [objective()]
    for _ in range(iterations):
        user_step()
        for k in range(len(iids)):
            rows = by_item[k]
            feats = user_mat[u_idx[rows]]
            item_mat[k] = _ridge_solve(feats, ratings[rows], lam)
        trace.append(objective())
        if len(trace) >= 2 and trace[-2] > 0:
            if (trace[-2] - trace[-1]) / trace[-2] < rel_tol:
                break
    # leave user weights consistent with the final factor table
    user_step()
    trace.append(objective())

    pred = np.einsum("ij,ij->i", user_mat[u_idx], item_mat[i_idx])
    rmse = float(np.sqrt(((ratings - pred) ** 2).mean()))
    params = FeatureParams.materialized({i: item_mat[irow[i]] for i in iids}, d)
    weights = {u: user_mat[urow[u]] for u in uids}
    return AlsResult(params=params, user_weights=weights, objective_trace=trace, train_rmse=rmse)


def _group_rows(idx: np.ndarray, n_groups: int) -> list[np.ndarray]:
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(n_groups + 1))
    return [order[bounds[k]:bounds[k + 1]] for k in range(n_groups)]


def build_version(
    params: FeatureParams,
    user_weights: dict[int, np.ndarray],
    schema: ModelSchema,
    observations,
    old_version: ModelVersion | None = None,
    last_seq: int = 0,
    number: int | None = None,
) -> VersionBundle:
    """Assemble the next ModelVersion and rebuild its learner states.

    States are reconstructed by re-featurizing each user's logged
    observations under the new params and absorbing them in log order. Users
    known to the old version but absent from the log get a fresh state and
    bootstrap weights, so they keep serving sensible predictions.

    The version number defaults to old.version + 1; callers that have seen
    higher numbers (e.g. retraining after a rollback) pass ``number``.
    """
    if params.dimension != schema.dimension:
        raise DimensionMismatch(
            f"trained params dimension {params.dimension} != schema {schema.dimension}"
        )
    if number is not None:
        new_number = number
    else:
        new_number = (old_version.version + 1) if old_version is not None else 1

    per_user: dict[int, list[tuple]] = {}
    for u, item, y, *_ in observations:
        per_user.setdefault(int(u), []).append((item, float(y)))

    all_users = set(user_weights) | set(per_user)
    if old_version is not None:
        all_users |= set(old_version.user_weights)

    lam = schema.regularization
    states: dict[int, learner.UserLearnerState] = {}
    weights: dict[int, np.ndarray] = {}
    fallback = learner.bootstrap_weights(user_weights.values(), schema.dimension)
    for uid in sorted(all_users):
        state = learner.fresh_state(schema.dimension, lam)
        items = per_user.get(uid)
        if items:
            feats = np.stack([featurize(params, it) for it, _ in items])
            labels = np.array([y for _, y in items])
            state = learner.absorb_stream(state, feats, labels)
        states[uid] = state
        weights[uid] = user_weights.get(uid, fallback)

    version = ModelVersion(schema=schema, params=params, user_weights=weights, version=new_number)
    return VersionBundle(version=version, states=states, last_seq=last_seq)


@dataclass
class PrewarmPlan:
    """Cache entries recomputed under a new version, plus how many old keys
    referenced items that no longer exist and were dropped."""

    predictions: list[tuple[tuple, float]] = field(default_factory=list)
    features: list[tuple[tuple, np.ndarray]] = field(default_factory=list)
    dropped: int = 0


def prewarm_plan(
    pred_keys,
    feat_keys,
    params: FeatureParams,
    new_number: int,
    resolve_weights,
) -> PrewarmPlan:
    """Re-evaluate previously cached keys under the new version.

    Keys keep their (model, uid, item) identity but are re-tagged with the
    new version number. ``resolve_weights(uid)`` must apply the same
    bootstrap-if-absent rule the serving path uses, so planned values equal
    post-swap on-demand computation exactly.
    """
    plan = PrewarmPlan()
    feat_cache: dict = {}
    for name, _, item in feat_keys:
        try:
            vec = featurize(params, item)
        except (UnknownItem, DimensionMismatch):
            plan.dropped += 1
            continue
        feat_cache[item] = vec
        plan.features.append(((name, new_number, item), vec))
    for name, _, uid, item in pred_keys:
        vec = feat_cache.get(item)
        if vec is None:
            try:
                vec = featurize(params, item)
            except (UnknownItem, DimensionMismatch):
                plan.dropped += 1
                continue
        score = predict_point(resolve_weights(uid), vec)
        if not math.isfinite(score):
            plan.dropped += 1
            continue
        plan.predictions.append(((name, new_number, uid, item), score))
    return plan
