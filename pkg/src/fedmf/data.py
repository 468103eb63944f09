"""Rating data: MovieLens CSV ingestion, item subsetting and synthetic instances."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedmf.mf import RatingTable

MOVIELENS_HEADER = ["userId", "movieId", "rating", "timestamp"]

# ml-latest-small shape, and the item/rating counts of the reference timing
# table; the last anchor is the full item set.
ML_SMALL_USERS = 610
ML_SMALL_ITEMS = 9724
ML_SMALL_RATINGS = 100836
TABLE1_RATINGS = {40: 8307, 50: 9807, 60: 11214, 80: 13817, 160: 22282,
                  320: 34172, 640: 49706, 1280: 67558, 2560: 83616}
TABLE1_SECONDS = {  # items: (PartText, FullText)
    40: (34.39, 90.94), 50: (44.05, 113.34), 60: (46.34, 141.52),
    80: (52.91, 182.27), 160: (92.81, 374.85), 320: (140.51, 725.72),
    640: (178.24, 1479.40), 1280: (264.10, 2919.91), 2560: (334.79, 5786.01),
}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_ratings: int
    density: float

    @classmethod
    def of(cls, table: RatingTable) -> "DatasetStats":
        cells = table.n_users * table.n_items
        return cls(table.n_users, table.n_items, len(table),
                   len(table) / cells if cells else 0.0)


def parse_ratings(path: str | Path) -> RatingTable:
    """Read a MovieLens ``ratings.csv``; ids are re-indexed contiguously.

    Users and items are numbered in ascending order of their original ids,
    which are kept in ``user_ids`` / ``item_ids``.
    """
    raw_users, raw_items, ratings = [], [], []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: missing header")
        if [h.strip() for h in header] != MOVIELENS_HEADER:
            raise DataFormatError(f"{path}:1: expected header {','.join(MOVIELENS_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            try:
                u, i, r = int(row[0]), int(row[1]), float(row[2])
                int(row[3])
            except ValueError:
                raise DataFormatError(f"{path}:{line}: malformed row {row!r}") from None
            if not np.isfinite(r):
                raise DataFormatError(f"{path}:{line}: non-finite rating")
            if (u, i) in seen:
                raise DataFormatError(f"{path}:{line}: duplicate rating for user {u}, movie {i}")
            seen.add((u, i))
            raw_users.append(u)
            raw_items.append(i)
            ratings.append(r)
    user_ids, users = np.unique(np.array(raw_users, dtype=np.int64), return_inverse=True)
    item_ids, items = np.unique(np.array(raw_items, dtype=np.int64), return_inverse=True)
    return RatingTable(len(user_ids), len(item_ids), users, items, ratings,
                       user_ids=user_ids, item_ids=item_ids)


def write_ratings(table: RatingTable, path: str | Path) -> None:
    """Write a table in MovieLens CSV form using its original ids (timestamp 0)."""
    uid = table.user_ids if table.user_ids is not None else np.arange(table.n_users)
    iid = table.item_ids if table.item_ids is not None else np.arange(table.n_items)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MOVIELENS_HEADER)
        for u, i, r in table.entries():
            w.writerow([int(uid[u]), int(iid[i]), repr(r), 0])


def select_top_items(table: RatingTable, k: int, drop_empty_users: bool = False) -> RatingTable:
    """Keep the ``k`` most-rated items, ties broken by smaller original id.

    Kept items retain their relative order. Users are all kept unless
    ``drop_empty_users``, which removes users left without ratings.
    """
    if not 1 <= k <= table.n_items:
        raise ValueError(f"k must be in [1, {table.n_items}], got {k}")
    orig_items = table.item_ids if table.item_ids is not None else np.arange(table.n_items)
    counts = table.item_counts()
    ranked = np.lexsort((orig_items, -counts))
    keep = np.sort(ranked[:k])
    new_index = np.full(table.n_items, -1, dtype=np.int64)
    new_index[keep] = np.arange(k)
    mask = new_index[table.items] >= 0
    users, items, ratings = table.users[mask], new_index[table.items[mask]], table.ratings[mask]
    user_ids = table.user_ids if table.user_ids is not None else np.arange(table.n_users)
    n_users = table.n_users
    if drop_empty_users:
        kept_users = np.unique(users)
        remap = np.full(table.n_users, -1, dtype=np.int64)
        remap[kept_users] = np.arange(len(kept_users))
        users, user_ids, n_users = remap[users], user_ids[kept_users], len(kept_users)
    return RatingTable(n_users, k, users, items, ratings,
                       user_ids=user_ids, item_ids=orig_items[keep])


def synth_lowrank(n: int, m: int, d_true: int, noise: float = 0.0, density: float = 1.0,
                  seed: int = 0, scale: float = 1.0):
    """Ratings ``<u_i, v_j> + N(0, noise**2)`` on a random mask.

    Returns:
        ``(table, U_true, V_true)``
    """
    if n <= 0 or m <= 0 or d_true <= 0:
        raise ValueError("n, m and d_true must be positive")
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.0, scale, (n, d_true))
    V = rng.uniform(0.0, scale, (m, d_true))
    mask = rng.random((n, m)) < density
    users, items = np.nonzero(mask)
    ratings = np.einsum("kd,kd->k", U[users], V[items])
    if noise:
        ratings = ratings + rng.normal(0.0, noise, len(ratings))
    return RatingTable(n, m, users, items, ratings), U, V


def _popularity_curve(n_items: int) -> np.ndarray:
    """Per-rank rating counts whose prefix sums pass through the anchors."""
    anchors = sorted(TABLE1_RATINGS.items()) + [(n_items, ML_SMALL_RATINGS)]
    ks = np.array([0] + [a for a, _ in anchors], dtype=np.float64)
    totals = np.array([0] + [b for _, b in anchors], dtype=np.float64)
    ranks = np.arange(1, n_items + 1)
    cum = np.interp(np.log(ranks), np.log(ks[1:]), totals[1:])
    # below the first anchor grow like a power law through (40, 8307)
    head = ranks < ks[1]
    cum[head] = totals[1] * (ranks[head] / ks[1]) ** 0.75
    cum = np.round(cum).astype(np.int64)
    counts = np.diff(np.concatenate([[0], cum]))
    return np.maximum(counts, 1)


def synth_movielens_like(seed: int = 0, n_users: int = ML_SMALL_USERS,
                         n_items: int = ML_SMALL_ITEMS) -> RatingTable:
    """Stand-in with ml-latest-small's size and a long-tailed popularity curve.

    Item rating counts follow a curve through the reference top-k rating
    totals, raters are drawn with heavy-tailed activity weights and ratings
    are half-stars. It mirrors the shape of the real file for timing sweeps;
    it is not the real data.
    """
    rng = np.random.default_rng(seed)
    counts = np.minimum(_popularity_curve(n_items), n_users)
    activity = rng.pareto(1.2, n_users) + 0.05
    activity /= activity.sum()
    users, items = [], []
    for item, c in enumerate(counts):
        raters = rng.choice(n_users, size=int(c), replace=False, p=activity)
        users.append(raters)
        items.append(np.full(len(raters), item))
    users = np.concatenate(users)
    items = np.concatenate(items)
    stars = np.arange(1, 11) / 2.0
    weights = np.array([1, 3, 2, 7, 5, 20, 13, 26, 9, 14], dtype=np.float64)
    ratings = rng.choice(stars, size=len(users), p=weights / weights.sum())
    item_ids = np.sort(rng.choice(200000, size=n_items, replace=False)) + 1
    # shuffle which original id gets which popularity rank
    perm = rng.permutation(n_items)
    return RatingTable(n_users, n_items, users, perm[items], ratings,
                       user_ids=np.arange(1, n_users + 1), item_ids=item_ids)


def planted_ratings(n_users: int, n_items: int, seed: int = 0, low: int = 1,
                    high: int = 5) -> RatingTable:
    """Fully observed table of integer ratings drawn uniformly from ``[low, high]``."""
    if n_users <= 0 or n_items <= 0:
        raise ValueError("n_users and n_items must be positive")
    if low > high:
        raise ValueError("low must not exceed high")
    rng = np.random.default_rng(seed)
    entries = [(u, j, float(rng.integers(low, high + 1)))
               for u in range(n_users) for j in range(n_items)]
    return RatingTable.from_entries(entries, n_users, n_items)
