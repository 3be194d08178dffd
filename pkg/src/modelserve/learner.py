"""Per-user online ridge regression maintained with Sherman-Morrison updates.

Each user's model is the closed-form ridge solution
``w = (F'F + lambda I)^-1 F'y`` over that user's observation history. Instead
of re-solving (cubic in d) per observation, the inverse Gram matrix is
maintained directly with the Sherman-Morrison rank-one identity, making every
update quadratic in d. States are value objects: absorb returns a new state,
so a reader holding the old one is never disturbed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numba import njit

from .errors import DimensionMismatch


@njit(cache=True)
def _sm_update(a_inv, b, f, y):
    """In-place rank-one update of (a_inv, b) with observation (f, y).

    a_inv <- a_inv - (a_inv f)(f' a_inv) / (1 + f' a_inv f), then
    re-symmetrized as (A + A') / 2 to suppress floating point drift.
    """
    d = f.shape[0]
    u = np.empty(d)
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += a_inv[i, j] * f[j]
        u[i] = s
    denom = 1.0
    for i in range(d):
        denom += f[i] * u[i]
    for i in range(d):
        ui = u[i] / denom
        for j in range(d):
            a_inv[i, j] -= ui * u[j]
    for i in range(d):
        for j in range(i + 1, d):
            v = 0.5 * (a_inv[i, j] + a_inv[j, i])
            a_inv[i, j] = v
            a_inv[j, i] = v
    for i in range(d):
        b[i] += y * f[i]


@njit(cache=True)
def _sm_update_run(a_inv, b, feats, labels):
    for k in range(feats.shape[0]):
        _sm_update(a_inv, b, feats[k], labels[k])


@njit(cache=True)
def _solve_and_update(a_inv, b, f, y):
    """Prequential step: squared error under pre-update weights, then update."""
    d = f.shape[0]
    pred = 0.0
    for i in range(d):
        wi = 0.0
        for j in range(d):
            wi += a_inv[i, j] * b[j]
        pred += wi * f[i]
    err = y - pred
    _sm_update(a_inv, b, f, y)
    return err * err


@dataclass(frozen=True)
class UserLearnerState:
    """Sufficient statistics for one user's ridge model.

    a_inv  maintained inverse of (F'F + lambda I), d x d
    b      accumulated F'y, length d
    count  observations absorbed
    """

    a_inv: np.ndarray
    b: np.ndarray
    count: int

    @property
    def dimension(self) -> int:
        return self.b.shape[0]


def fresh_state(dimension: int, regularization: float) -> UserLearnerState:
    """State of a user with no observations: a_inv = I/lambda, b = 0."""
    if dimension < 1:
        raise DimensionMismatch(f"dimension must be >= 1, got {dimension}")
    a_inv = np.eye(dimension) / regularization
    return UserLearnerState(a_inv=a_inv, b=np.zeros(dimension), count=0)


def _check_obs(state: UserLearnerState, f, y) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape != state.b.shape:
        raise DimensionMismatch(f"feature shape {f.shape} != state dimension {state.b.shape}")
    if not (np.all(np.isfinite(f)) and np.isfinite(y)):
        raise DimensionMismatch("observation contains non-finite values")
    return f


def absorb(state: UserLearnerState, f, y: float) -> UserLearnerState:
    """Fold one observation into the state in O(d^2)."""
    f = _check_obs(state, f, y)
    a_inv = state.a_inv.copy()
    b = state.b.copy()
    _sm_update(a_inv, b, f, float(y))
    return UserLearnerState(a_inv=a_inv, b=b, count=state.count + 1)


def absorb_stream(state: UserLearnerState, feats, labels) -> UserLearnerState:
    """Fold a batch of observations, equivalent to absorbing them in order.

    Used for log replay and learner-state rebuilds; the per-row arithmetic is
    identical to absorb, so the result is bit-equal to the sequential path.
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != state.dimension:
        raise DimensionMismatch(f"feature block shape {feats.shape} does not match d={state.dimension}")
    if labels.shape != (feats.shape[0],):
        raise DimensionMismatch("labels length does not match feature rows")
    if not (np.all(np.isfinite(feats)) and np.all(np.isfinite(labels))):
        raise DimensionMismatch("observations contain non-finite values")
    a_inv = state.a_inv.copy()
    b = state.b.copy()
    _sm_update_run(a_inv, b, feats, labels)
    return UserLearnerState(a_inv=a_inv, b=b, count=state.count + feats.shape[0])


def solve_weights(state: UserLearnerState) -> np.ndarray:
    """Current ridge solution a_inv . b (the zero vector for a fresh state)."""
    return state.a_inv @ state.b


def cross_validate_update(state: UserLearnerState, f, y: float) -> tuple[float, UserLearnerState]:
    """Prequential evaluation: score the incoming label with the pre-update
    weights, then absorb it. Returns (squared error, new state)."""
    f = _check_obs(state, f, y)
    a_inv = state.a_inv.copy()
    b = state.b.copy()
    err = _solve_and_update(a_inv, b, f, float(y))
    return float(err), UserLearnerState(a_inv=a_inv, b=b, count=state.count + 1)


def quadratic_form(state: UserLearnerState, f) -> float:
    """f' a_inv f, the variance proxy used for bandit uncertainty."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != state.b.shape:
        raise DimensionMismatch(f"feature shape {f.shape} != state dimension {state.b.shape}")
    return float(f @ (state.a_inv @ f))


def bootstrap_weights(weights: Iterable[np.ndarray], dimension: int) -> np.ndarray:
    """Arithmetic mean of the given weight vectors; zeros when there are none."""
    total = np.zeros(dimension)
    n = 0
    for w in weights:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (dimension,):
            raise DimensionMismatch(f"weight vector shape {w.shape}, expected ({dimension},)")
        total += w
        n += 1
    if n == 0:
        return total
    return total / n
