"""Model mathematics: generalized linear prediction over per-user weight
vectors, pluggable feature functions, and the matrix factorization objective.

A model scores an item for a user by evaluating ``w_u . f(x, theta)`` where
``w_u`` is the user's weight vector and ``f`` maps an item descriptor into the
d-dimensional feature space. ``f`` is either a materialized lookup table
(item id -> latent factor vector) or a computed basis expansion evaluated per
request. All types here are immutable after construction; a new model state
is produced only by building a new ModelVersion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, UnknownItem, UnknownUser

MATERIALIZED = "materialized"
COMPUTED = "computed"


def as_vector(values, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce to a float64 1-D array, checking length and finiteness."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise DimensionMismatch(f"{name} contains non-finite entries")
    return v


@dataclass(frozen=True)
class ModelSchema:
    """Static declaration of a model: its name and hyperparameters.

    dimension     d, the length of every weight and feature vector
    regularization  lambda, the ridge constant used by all weight solves
    exploration   alpha, the bandit bonus multiplier used by topK
    """

    name: str
    dimension: int
    regularization: float = 0.1
    exploration: float = 0.0

    def __post_init__(self):
        if self.dimension < 1:
            raise DimensionMismatch(f"dimension must be >= 1, got {self.dimension}")
        if not self.regularization > 0:
            raise ValueError(f"regularization must be > 0, got {self.regularization}")
        if self.exploration < 0:
            raise ValueError(f"exploration must be >= 0, got {self.exploration}")


@dataclass(frozen=True)
class FeatureParams:
    """Global feature parameters theta.

    Materialized models hold an item-id -> factor-vector table. Computed
    models hold the packed coefficients of a radial-basis-function family:
    ``[input_dim, bandwidth, center_1..., center_d...]`` with one center per
    output dimension, each of length input_dim.
    """

    kind: str
    dimension: int
    table: Mapping[int, np.ndarray] | None = None
    coefficients: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == MATERIALIZED:
            if self.table is None:
                raise ValueError("materialized params require a table")
            for item, vec in self.table.items():
                as_vector(vec, self.dimension, f"factor for item {item}")
        elif self.kind == COMPUTED:
            if self.coefficients is None:
                raise ValueError("computed params require coefficients")
            c = np.asarray(self.coefficients, dtype=np.float64)
            if c.ndim != 1 or c.shape[0] < 2:
                raise DimensionMismatch("coefficient vector too short")
            input_dim = int(c[0])
            if input_dim < 1 or c.shape[0] != 2 + self.dimension * input_dim:
                raise DimensionMismatch(
                    f"coefficients pack {c.shape[0]} values, expected "
                    f"{2 + self.dimension * int(c[0])} for input_dim {input_dim}"
                )
            if not c[1] > 0:
                raise ValueError("bandwidth must be positive")
        else:
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @classmethod
    def materialized(cls, table: Mapping[int, Sequence[float]], dimension: int) -> "FeatureParams":
        tbl = {int(k): as_vector(v, dimension, f"factor for item {k}") for k, v in table.items()}
        return cls(kind=MATERIALIZED, dimension=dimension, table=tbl)

    @classmethod
    def rbf(cls, centers, bandwidth: float) -> "FeatureParams":
        """Radial basis family exp(-|x - c_j|^2 / (2 sigma^2)), one output per center."""
        c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        d, input_dim = c.shape
        packed = np.concatenate([[float(input_dim), float(bandwidth)], c.ravel()])
        return cls(kind=COMPUTED, dimension=d, coefficients=packed)

    def rbf_centers(self) -> tuple[np.ndarray, float]:
        input_dim = int(self.coefficients[0])
        bandwidth = float(self.coefficients[1])
        centers = self.coefficients[2:].reshape(self.dimension, input_dim)
        return centers, bandwidth

    def item_ids(self) -> list[int]:
        if self.kind != MATERIALIZED:
            return []
        return list(self.table.keys())


def featurize(params: FeatureParams, item) -> np.ndarray:
    """Evaluate the feature function on an item descriptor.

    Materialized: ``item`` is an item id, resolved by table lookup.
    Computed: ``item`` is a raw input vector fed to the basis family.
    """
    if params.kind == MATERIALIZED:
        try:
            return params.table[int(item)]
        except (KeyError, TypeError, ValueError):
            raise UnknownItem(f"item {item!r} not in feature table") from None
    centers, bandwidth = params.rbf_centers()
    x = as_vector(item, centers.shape[1], "computed-feature input")
    sq = np.sum((centers - x) ** 2, axis=1)
    return np.exp(-sq / (2.0 * bandwidth * bandwidth))


def predict_point(w, f) -> float:
    """Inner product of a weight vector and a feature vector."""
    w = np.asarray(w, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if w.shape != f.shape or w.ndim != 1:
        raise DimensionMismatch(f"shape mismatch: {w.shape} vs {f.shape}")
    return float(w @ f)


def mf_objective(
    user_weights: Mapping[int, np.ndarray],
    item_factors: Mapping[int, np.ndarray],
    observations: Iterable[tuple[int, int, float]],
    regularization: float,
) -> float:
    """Matrix factorization loss: lambda (|W|^2 + |X|^2) + sum (r - w.x)^2.

    Raises UnknownUser/UnknownItem if an observation references an id absent
    from the factor maps.
    """
    reg = 0.0
    for w in user_weights.values():
        reg += float(np.dot(w, w))
    for x in item_factors.values():
        reg += float(np.dot(x, x))
    residual = 0.0
    for uid, item, rating in observations:
        if uid not in user_weights:
            raise UnknownUser(f"observation references unknown user {uid}")
        if item not in item_factors:
            raise UnknownItem(f"observation references unknown item {item}")
        err = rating - float(user_weights[uid] @ item_factors[item])
        residual += err * err
    return regularization * reg + residual


@dataclass(frozen=True)
class ModelVersion:
    """Immutable pairing of feature parameters with a snapshot of all user
    weights, tagged with a monotonically increasing version number."""

    schema: ModelSchema
    params: FeatureParams
    user_weights: Mapping[int, np.ndarray] = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        if self.version < 0:
            raise ValueError("version must be non-negative")
        if self.params.dimension != self.schema.dimension:
            raise DimensionMismatch(
                f"params dimension {self.params.dimension} != schema dimension "
                f"{self.schema.dimension}"
            )
        for uid, w in self.user_weights.items():
            as_vector(w, self.schema.dimension, f"weights for user {uid}")
