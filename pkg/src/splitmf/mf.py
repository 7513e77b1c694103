"""Full-batch matrix factorization: objective, analytic gradients, updates.

Factor matrices are plain float64 ndarrays: U is n_users x dim, V is
dim x n_items, so a predicted rating is U[i] @ V[:, j].  Ratings live in a
:class:`RatingMatrix`, which keeps the observation mask explicit; residuals
at unobserved cells are defined to be zero everywhere in this module.

The single-process :func:`train_centralized` trainer is the correctness
oracle for the distributed protocol: it performs exactly the same sequential
update (user step first, then the item gradient from the updated user
factors) that the sources and server perform jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    ShapeError,
)

__all__ = [
    "RatingMatrix",
    "TrainConfig",
    "predict",
    "loss",
    "grad_user",
    "grad_item",
    "apply_update",
    "init_factors",
    "CentralizedResult",
    "train_centralized",
]


@dataclass(frozen=True)
class RatingMatrix:
    """Sparse observed ratings over n_users x n_items.

    Entries are parallel arrays (users, items, values).  Every (user, item)
    pair appears at most once and all indices are in range; both are
    enforced at construction.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64)
        items = np.asarray(self.items, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if not (users.shape == items.shape == values.shape) or users.ndim != 1:
            raise ShapeError("entry arrays must be 1-d and of equal length")
        if self.n_users < 0 or self.n_items < 0:
            raise ConfigError("matrix dimensions must be non-negative")
        if users.size:
            if users.min() < 0 or users.max() >= self.n_users:
                raise ShapeError(f"user index out of range [0, {self.n_users})")
            if items.min() < 0 or items.max() >= self.n_items:
                raise ShapeError(f"item index out of range [0, {self.n_items})")
            flat = users * self.n_items + items
            if np.unique(flat).size != flat.size:
                raise ShapeError("duplicate (user, item) pair in rating entries")
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_entries(cls, n_users: int, n_items: int, entries) -> "RatingMatrix":
        """Build from an iterable of (user_index, item_index, rating)."""
        entries = list(entries)
        users = np.array([e[0] for e in entries], dtype=np.int64)
        items = np.array([e[1] for e in entries], dtype=np.int64)
        values = np.array([e[2] for e in entries], dtype=np.float64)
        return cls(n_users, n_items, users, items, values)

    @property
    def nnz(self) -> int:
        return int(self.users.size)

    @property
    def entries(self):
        """Iterate (user_index, item_index, rating) tuples."""
        return zip(self.users.tolist(), self.items.tolist(), self.values.tolist())

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (ratings, mask) as dense n_users x n_items float arrays."""
        r = np.zeros((self.n_users, self.n_items))
        mask = np.zeros((self.n_users, self.n_items))
        r[self.users, self.items] = self.values
        mask[self.users, self.items] = 1.0
        return r, mask


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for full-batch gradient-descent training."""

    dim: int = 100
    learning_rate: float = 1e-2
    reg_user: float = 1e-3
    reg_item: float = 1e-3
    stop_threshold: float = 1e-4
    max_epochs: int = 100
    init_seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.reg_user < 0 or self.reg_item < 0:
            raise ConfigError("regularization weights must be >= 0")
        if not self.stop_threshold > 0:
            raise ConfigError("stop_threshold must be > 0")


def _check_factor_shapes(U: np.ndarray, V: np.ndarray, R: RatingMatrix | None = None):
    if U.ndim != 2 or V.ndim != 2:
        raise ShapeError("factor matrices must be 2-d")
    if U.shape[1] != V.shape[0]:
        raise ShapeError(f"inner dimensions differ: U is {U.shape}, V is {V.shape}")
    if R is not None:
        if U.shape[0] != R.n_users:
            raise ShapeError(f"U has {U.shape[0]} rows but ratings have {R.n_users} users")
        if V.shape[1] != R.n_items:
            raise ShapeError(f"V has {V.shape[1]} cols but ratings have {R.n_items} items")


def predict(U: np.ndarray, V: np.ndarray, i: int, j: int) -> float:
    """Predicted rating for user i on item j: dot of U row i with V column j."""
    _check_factor_shapes(U, V)
    if not 0 <= i < U.shape[0]:
        raise IndexError(f"user index {i} out of range [0, {U.shape[0]})")
    if not 0 <= j < V.shape[1]:
        raise IndexError(f"item index {j} out of range [0, {V.shape[1]})")
    return float(U[i, :] @ V[:, j])


def _masked_residual(U: np.ndarray, V: np.ndarray, R: RatingMatrix) -> np.ndarray:
    r, mask = R.dense()
    return mask * (r - U @ V)


def loss(
    U: np.ndarray,
    V: np.ndarray,
    R: RatingMatrix,
    reg_user: float,
    reg_item: float,
    normalized: bool = True,
) -> float:
    """Squared-residual loss over observed entries plus Frobenius penalties.

    With ``normalized=True`` (the monitoring metric) the residual term is
    divided by the observed-entry count.  ``normalized=False`` gives the
    exact antiderivative of :func:`grad_user` / :func:`grad_item`, which is
    what finite-difference checks must differentiate.
    """
    _check_factor_shapes(U, V, R)
    if R.nnz == 0:
        raise DegenerateInputError("loss undefined on an empty rating matrix")
    e = _masked_residual(U, V, R)
    sq = float(np.sum(e * e))
    if normalized:
        sq /= R.nnz
    return sq + reg_user * float(np.sum(U * U)) + reg_item * float(np.sum(V * V))


def grad_user(U: np.ndarray, V: np.ndarray, R: RatingMatrix, reg_user: float) -> np.ndarray:
    """Gradient of the unnormalized objective w.r.t. U: -2 E V^T + 2 reg U."""
    _check_factor_shapes(U, V, R)
    e = _masked_residual(U, V, R)
    return -2.0 * e @ V.T + 2.0 * reg_user * U


def grad_item(
    U: np.ndarray,
    V: np.ndarray,
    R: RatingMatrix,
    reg_item: float,
    reg_weight: float = 1.0,
) -> np.ndarray:
    """Gradient w.r.t. V: -2 U^T E + reg_weight * 2 reg V.

    In distributed runs each of the T sources passes ``reg_weight = 1/T`` so
    the server-side sum applies the regularizer exactly once; centralized
    training uses the default ``reg_weight = 1``.
    """
    _check_factor_shapes(U, V, R)
    if not 0 < reg_weight <= 1:
        raise ConfigError("reg_weight must be in (0, 1]")
    e = _masked_residual(U, V, R)
    return -2.0 * U.T @ e + reg_weight * 2.0 * reg_item * V


def apply_update(M: np.ndarray, G: np.ndarray, alpha: float) -> np.ndarray:
    """One descent step: M - alpha * G."""
    if M.shape != G.shape:
        raise ShapeError(f"update shape {G.shape} does not match matrix shape {M.shape}")
    return M - alpha * G


def init_factors(n_users: int, n_items: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform init of (U, V) in [-1/sqrt(dim), +1/sqrt(dim)].

    U and V are drawn from independent child streams of ``cfg.init_seed``,
    so the V draw does not depend on n_users.  A distributed run can
    therefore reproduce the server's V and hand each source its row slice
    of the same U.
    """
    root = np.random.SeedSequence(cfg.init_seed)
    u_seq, v_seq = root.spawn(2)
    bound = 1.0 / np.sqrt(cfg.dim)
    U = np.random.default_rng(u_seq).uniform(-bound, bound, size=(n_users, cfg.dim))
    V = np.random.default_rng(v_seq).uniform(-bound, bound, size=(cfg.dim, n_items))
    return U, V


@dataclass
class CentralizedResult:
    U: np.ndarray
    V: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    epochs: int = 0
    converged: bool = False


def train_centralized(R: RatingMatrix, cfg: TrainConfig) -> CentralizedResult:
    """Full-batch gradient descent on one process; the distributed oracle.

    Per epoch: user step from the current V, then the item gradient from
    the *updated* U (the same order the per-source round uses), then the
    item step.  Stops when the Frobenius norm of the item gradient drops
    below ``cfg.stop_threshold`` or after ``cfg.max_epochs`` epochs.

    ``loss_history[0]`` is the pre-training loss; one entry follows per
    completed epoch.
    """
    if R.nnz == 0:
        raise DegenerateInputError("cannot train on an empty rating matrix")
    U, V = init_factors(R.n_users, R.n_items, cfg)
    history = [loss(U, V, R, cfg.reg_user, cfg.reg_item)]
    converged = False
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        gu = grad_user(U, V, R, cfg.reg_user)
        U = apply_update(U, gu, cfg.learning_rate)
        gv = grad_item(U, V, R, cfg.reg_item)
        V = apply_update(V, gv, cfg.learning_rate)
        if not (np.isfinite(U).all() and np.isfinite(V).all()):
            raise DivergenceError(epoch)
        history.append(loss(U, V, R, cfg.reg_user, cfg.reg_item))
        if float(np.linalg.norm(gv)) < cfg.stop_threshold:
            converged = True
            break
    return CentralizedResult(U=U, V=V, loss_history=history, epochs=epoch, converged=converged)
