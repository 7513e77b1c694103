"""Rating-data ingestion, splits, per-source partitioning, and metrics.

Reads the MovieLens ml-100k ``u.data`` layout (tab-separated
``user_id item_id rating timestamp``, 1-based ids) and compacts ids to
dense 0-based indices, keeping the id maps as a sidecar for reporting.
Also provides synthetic planted-factor data for oracle-style tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, ParseError
from .mf import RatingMatrix

logger = logging.getLogger(__name__)

__all__ = [
    "SplitSpec",
    "MovieLensDataset",
    "SourcePartition",
    "load_movielens",
    "save_movielens",
    "export_csv",
    "split_train_test",
    "partition_users",
    "synth_ratings",
    "synth_movielens_like",
    "take_first_users",
    "rmse",
    "global_mean_rmse",
]


@dataclass(frozen=True)
class SplitSpec:
    """Entry-level train/test split parameters."""

    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


@dataclass(frozen=True)
class MovieLensDataset:
    """Loaded ratings plus the sidecar id maps (original id -> dense index)."""

    ratings: RatingMatrix
    user_ids: np.ndarray
    item_ids: np.ndarray
    duplicates: int = 0


@dataclass(frozen=True)
class SourcePartition:
    """One data source's slice: local rating rows plus their global user ids.

    ``ratings`` uses local row indices 0..len(user_ids)-1; row k belongs to
    global user ``user_ids[k]``.  Item indexing stays global.
    """

    ratings: RatingMatrix
    user_ids: np.ndarray


def load_movielens(path) -> MovieLensDataset:
    """Parse a ``u.data``-layout file into a compact RatingMatrix.

    Duplicate (user, item) pairs keep the last occurrence and are counted;
    a malformed line raises :class:`ParseError` with its line number.
    """
    seen: dict[tuple[int, int], float] = {}
    duplicates = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError(f"{path}: line {lineno}: expected user<TAB>item<TAB>rating")
            try:
                user = int(parts[0])
                item = int(parts[1])
                rating = float(parts[2])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if (user, item) in seen:
                duplicates += 1
            seen[(user, item)] = rating
    if not seen:
        raise DegenerateInputError(f"{path}: no ratings found")
    if duplicates:
        logger.warning("%s: %d duplicate (user, item) pairs, kept last occurrence", path, duplicates)

    user_ids = np.array(sorted({u for u, _ in seen}), dtype=np.int64)
    item_ids = np.array(sorted({i for _, i in seen}), dtype=np.int64)
    user_index = {u: k for k, u in enumerate(user_ids.tolist())}
    item_index = {i: k for k, i in enumerate(item_ids.tolist())}
    users = np.array([user_index[u] for u, _ in seen], dtype=np.int64)
    items = np.array([item_index[i] for _, i in seen], dtype=np.int64)
    values = np.array(list(seen.values()), dtype=np.float64)
    ratings = RatingMatrix(len(user_ids), len(item_ids), users, items, values)
    return MovieLensDataset(ratings, user_ids, item_ids, duplicates)


def save_movielens(R: RatingMatrix, path, timestamp: int = 0):
    """Write entries in the ``u.data`` layout (1-based ids, fixed timestamp).

    Ratings are written with full float precision so save/load round-trips
    are lossless even for synthetic data.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in R.entries:
            fh.write(f"{u + 1}\t{i + 1}\t{r:.17g}\t{timestamp}\n")


def export_csv(R: RatingMatrix, path):
    """Write ``user,item,rating`` rows with 0-based indices."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user,item,rating\n")
        for u, i, r in R.entries:
            fh.write(f"{u},{i},{r:g}\n")


def split_train_test(R: RatingMatrix, spec: SplitSpec) -> tuple[RatingMatrix, RatingMatrix]:
    """Entry-level split: seeded shuffle, first round(frac * nnz) entries train.

    Every observed rating lands in exactly one side; users or items whose
    ratings all fall in test keep their row/column (the matrices share the
    full n_users x n_items frame).
    """
    if R.nnz == 0:
        raise DegenerateInputError("cannot split an empty rating matrix")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(R.nnz)
    n_train = int(round(spec.train_fraction * R.nnz))
    n_train = min(max(n_train, 1), R.nnz - 1)
    train_idx, test_idx = order[:n_train], order[n_train:]

    def take(idx):
        return RatingMatrix(R.n_users, R.n_items, R.users[idx], R.items[idx], R.values[idx])

    return take(train_idx), take(test_idx)


def partition_users(R: RatingMatrix, n_sources: int, seed: int = 0) -> list[SourcePartition]:
    """Assign users to sources round-robin after a seeded shuffle.

    Each source's sub-matrix uses local user rows (ascending global id) and
    keeps the global item indexing, so all sources agree on V's columns.
    """
    if n_sources < 1:
        raise ConfigError("need at least one source")
    if n_sources > R.n_users:
        raise ConfigError(f"cannot split {R.n_users} users across {n_sources} sources")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(R.n_users)
    parts = []
    for t in range(n_sources):
        user_ids = np.sort(shuffled[t::n_sources])
        local_row = {g: k for k, g in enumerate(user_ids.tolist())}
        sel = np.isin(R.users, user_ids)
        local_users = np.array([local_row[g] for g in R.users[sel].tolist()], dtype=np.int64)
        sub = RatingMatrix(len(user_ids), R.n_items, local_users, R.items[sel], R.values[sel])
        parts.append(SourcePartition(sub, user_ids))
    return parts


def synth_ratings(
    n_users: int,
    n_items: int,
    d_true: int,
    noise_sigma: float = 0.0,
    fill_fraction: float = 1.0,
    seed: int = 0,
    unit_norm: bool = False,
) -> tuple[RatingMatrix, np.ndarray, np.ndarray]:
    """Planted low-rank ratings: <u_i, v_j> plus Gaussian noise on a random subset.

    Factors are scaled so ratings are O(1).  With ``unit_norm`` every planted
    user row and item column has unit norm, which makes the per-entry rating
    variance homogeneous across users (useful when loss values of different
    user subsets are compared).  Returns the observed matrix and the planted
    (U, V).
    """
    if n_users < 1 or n_items < 1 or d_true < 1:
        raise ConfigError("n_users, n_items, d_true must all be >= 1")
    if not 0.0 < fill_fraction <= 1.0:
        raise ConfigError("fill_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    scale = d_true ** -0.25
    U = rng.normal(0.0, scale, size=(n_users, d_true))
    V = rng.normal(0.0, scale, size=(d_true, n_items))
    if unit_norm:
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        V /= np.linalg.norm(V, axis=0, keepdims=True)
    n_cells = n_users * n_items
    n_obs = max(1, int(round(fill_fraction * n_cells)))
    flat = rng.choice(n_cells, size=n_obs, replace=False)
    users, items = np.divmod(flat, n_items)
    values = np.einsum("ud,du->u", U[users], V[:, items])
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=n_obs)
    return RatingMatrix(n_users, n_items, users, items, values), U, V


def synth_movielens_like(
    n_users: int = 200,
    n_items: int = 400,
    per_user: int = 35,
    user_sd: float = 1.0,
    item_sd: float = 0.6,
    noise_sigma: float = 0.25,
    seed: int = 0,
) -> RatingMatrix:
    """Integer 1..5 ratings with MovieLens-style structure.

    Global mean 3.5 plus per-user and per-item offsets plus noise, rounded
    and clipped to the 1..5 scale.  Stands in for a real ratings file when
    one is not available; write it out with :func:`save_movielens` to
    exercise the ingestion path.
    """
    if n_users < 1 or n_items < 1 or not 1 <= per_user <= n_items:
        raise ConfigError("need n_users, n_items >= 1 and 1 <= per_user <= n_items")
    rng = np.random.default_rng(seed)
    user_off = rng.normal(0.0, user_sd, size=n_users)
    item_off = rng.normal(0.0, item_sd, size=n_items)
    users, items, values = [], [], []
    for u in range(n_users):
        rated = rng.choice(n_items, size=per_user, replace=False)
        r = 3.5 + user_off[u] + item_off[rated] + rng.normal(0.0, noise_sigma, size=per_user)
        values.append(np.clip(np.rint(r), 1.0, 5.0))
        users.append(np.full(per_user, u, dtype=np.int64))
        items.append(rated.astype(np.int64))
    return RatingMatrix(
        n_users, n_items, np.concatenate(users), np.concatenate(items), np.concatenate(values)
    )


def take_first_users(R: RatingMatrix, n_users: int) -> RatingMatrix:
    """Row-subsample: keep users with index < n_users (item frame unchanged)."""
    if not 1 <= n_users <= R.n_users:
        raise ConfigError(f"n_users must be in [1, {R.n_users}]")
    keep = R.users < n_users
    return RatingMatrix(n_users, R.n_items, R.users[keep], R.items[keep], R.values[keep])


def rmse(U: np.ndarray, V: np.ndarray, R_test: RatingMatrix) -> float:
    """Root mean squared prediction error over observed test entries."""
    if R_test.nnz == 0:
        raise DegenerateInputError("rmse undefined on an empty test set")
    pred = np.einsum("ud,du->u", U[R_test.users], V[:, R_test.items])
    return float(np.sqrt(np.mean((R_test.values - pred) ** 2)))


def global_mean_rmse(R_train: RatingMatrix, R_test: RatingMatrix) -> float:
    """RMSE of the constant predictor fixed at the train-set mean rating."""
    if R_train.nnz == 0 or R_test.nnz == 0:
        raise DegenerateInputError("need nonempty train and test sets")
    mean = float(np.mean(R_train.values))
    return float(np.sqrt(np.mean((R_test.values - mean) ** 2)))
