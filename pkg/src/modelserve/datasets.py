"""Ratings datasets: MovieLens file parsing and a synthetic stand-in.

Two on-disk formats are supported: the classic ``uid::item::rating::ts``
double-colon layout and comma-separated files with a header row. The
synthetic generator produces a corpus with the same shape as MovieLens-100K
(943 users, 1682 items, 100,000 integer ratings, at least 20 per user) from
a planted low-rank model, so benchmarks run without the real download; point
them at a real ratings file to reproduce on actual data.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

ML100K_USERS = 943
ML100K_ITEMS = 1682
ML100K_RATINGS = 100_000
_MAX_PER_USER = 737  # most active MovieLens-100K user


@dataclass(frozen=True)
class Rating:
    uid: int
    item: int
    rating: float
    timestamp: int


def _parse_fields(fields, line_no: int) -> Rating:
    if len(fields) < 4:
        raise ParseError(line_no, f"expected 4 fields, got {len(fields)}")
    try:
        uid = int(fields[0])
        item = int(fields[1])
        rating = float(fields[2])
        ts = int(float(fields[3]))
    except ValueError as exc:
        raise ParseError(line_no, str(exc)) from None
    if uid < 0 or item < 0:
        raise ParseError(line_no, "ids must be non-negative")
    if not 0.5 <= rating <= 5.0:
        raise ParseError(line_no, f"rating {rating} outside [0.5, 5]")
    return Rating(uid=uid, item=item, rating=rating, timestamp=ts)


def parse_movielens(path, fmt: str = "dat") -> list[Rating]:
    """Parse a ratings file. ``dat`` is ``uid::item::rating::timestamp``;
    ``csv`` is comma-separated with a header row."""
    if fmt not in ("dat", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    text = Path(path).read_text()
    return parse_movielens_text(text, fmt)


def parse_movielens_text(text: str, fmt: str = "dat") -> list[Rating]:
    ratings = []
    if fmt == "dat":
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            ratings.append(_parse_fields(line.split("::"), line_no))
    else:
        reader = csv.reader(io.StringIO(text))
        for line_no, row in enumerate(reader, start=1):
            if line_no == 1:  # header
                continue
            if not row:
                continue
            ratings.append(_parse_fields(row, line_no))
    return ratings


def write_movielens_csv(ratings, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["userId", "movieId", "rating", "timestamp"])
        for r in ratings:
            writer.writerow([r.uid, r.item, _fmt_rating(r.rating), r.timestamp])


def _fmt_rating(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


def generate_ratings(
    seed: int = 13,
    n_users: int = ML100K_USERS,
    n_items: int = ML100K_ITEMS,
    n_ratings: int = ML100K_RATINGS,
    min_per_user: int = 20,
    rank: int = 3,
    user_scale: float = 0.9,
    item_scale: float = 0.12,
    user_bias: float = 0.55,
    item_bias: float = 0.25,
    noise: float = 0.3,
    popularity_skew: float = 1.6,
) -> list[Rating]:
    """Deterministic synthetic ratings from a planted factor model.

    Each rating is ``round(3.6 + b_u + b_i + u_f . i_f + eps)`` clipped to
    [1, 5]. Item popularity follows a Zipf-like law, user activity a heavy
    tail with a floor of ``min_per_user`` ratings. Ids are 1-based.
    """
    if n_ratings < n_users * min_per_user:
        raise ValueError("n_ratings too small for the per-user minimum")
    rng = np.random.default_rng(seed)
    user_f = rng.normal(0.0, user_scale, size=(n_users, rank))
    item_f = rng.normal(0.0, item_scale, size=(n_items, rank))
    b_u = rng.normal(0.0, user_bias, size=n_users)
    b_i = rng.normal(0.0, item_bias, size=n_items)

    cap = min(_MAX_PER_USER, n_items)
    activity = rng.pareto(1.8, size=n_users) + 1.0
    spare = n_ratings - min_per_user * n_users
    counts = np.clip((activity / activity.sum() * spare + min_per_user).astype(int),
                     min_per_user, cap)
    deficit = n_ratings - int(counts.sum())
    order = rng.permutation(n_users)
    i = 0
    while deficit != 0:
        u = order[i % n_users]
        if deficit > 0 and counts[u] < cap:
            counts[u] += 1
            deficit -= 1
        elif deficit < 0 and counts[u] > min_per_user:
            counts[u] -= 1
            deficit += 1
        i += 1

    ranks = rng.permutation(n_items).astype(float) + 1.0
    pop = ranks ** -popularity_skew
    pop /= pop.sum()

    ratings = []
    ts = 978_000_000
    for u in range(n_users):
        items = rng.choice(n_items, size=int(counts[u]), replace=False, p=pop)
        eps = rng.normal(0.0, noise, size=items.shape[0])
        raw = 3.6 + b_u[u] + b_i[items] + item_f[items] @ user_f[u] + eps
        vals = np.clip(np.rint(raw), 1.0, 5.0)
        for item, val in zip(items, vals):
            ratings.append(Rating(uid=u + 1, item=int(item) + 1, rating=float(val),
                                  timestamp=ts))
            ts += 1
    return ratings


def zipf_indices(n_items: int, s: float, size: int, rng) -> np.ndarray:
    """Draws from a bounded Zipf law: P(rank r) proportional to 1/r^s."""
    p = np.arange(1, n_items + 1, dtype=float) ** -s
    p /= p.sum()
    return rng.choice(n_items, size=size, p=p)
