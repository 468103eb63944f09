"""Matrix factorisation by per-user SGD, centralised and user-level distributed.

The objective is

    F(U, V) = (1/M) * sum_{(i,j) rated} (r_ij - <u_i, v_j>)**2
              + lambda * ||U||**2 + mu * ||V||**2

and one iteration visits users in ascending id order. Each user computes its
step from the item profiles left by the previous user, so the distributed
trainer (clients upload scaled item gradients, the server subtracts them) and
the centralised trainer perform exactly the same floating-point operations.

Gradients follow the per-user form without the 1/M factor:

    grad_u_i = -2 sum_j v_j (r_ij - <u_i, v_j>) + 2 lambda u_i
    grad_v_j = -2 u_i (r_ij - <u_i, v_j>) + 2 mu v_j     (user i's share)

Each rater of item j contributes its own ``2 mu v_j`` term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, NamedTuple

import numpy as np

from fedmf.transcript import Transcript, TranscriptRound

PART = "part"
FULL = "full"
PAYLOAD_MODES = (PART, FULL)

ALGORITHM1 = "algorithm1"
ATTACK = "attack"
CONVENTIONS = (ALGORITHM1, ATTACK)


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "profiles"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


class UserRatings(NamedTuple):
    items: np.ndarray
    ratings: np.ndarray


@dataclass
class RatingTable:
    """Sparse ratings with optional maps back to the original ids.

    Entries are kept sorted by ``(user, item)``.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        ratings = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
        if not len(users) == len(items) == len(ratings):
            raise ValueError("users, items and ratings must have equal length")
        if len(users):
            if users.min() < 0 or users.max() >= self.n_users:
                raise ValueError("user id out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise ValueError("item id out of range")
        if not np.all(np.isfinite(ratings)):
            raise ValueError("ratings must be finite")
        order = np.lexsort((items, users))
        users, items, ratings = users[order], items[order], ratings[order]
        if len(users) > 1:
            dup = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
            if dup.any():
                k = int(np.argmax(dup))
                raise ValueError(f"duplicate rating for (user {users[k]}, item {items[k]})")
        self.users, self.items, self.ratings = users, items, ratings
        if self.user_ids is not None:
            self.user_ids = np.asarray(self.user_ids)
            if len(self.user_ids) != self.n_users:
                raise ValueError("user_ids length must equal n_users")
        if self.item_ids is not None:
            self.item_ids = np.asarray(self.item_ids)
            if len(self.item_ids) != self.n_items:
                raise ValueError("item_ids length must equal n_items")

    @classmethod
    def from_entries(cls, entries, n_users: int | None = None,
                     n_items: int | None = None) -> "RatingTable":
        entries = list(entries)
        users = [int(e[0]) for e in entries]
        items = [int(e[1]) for e in entries]
        ratings = [float(e[2]) for e in entries]
        if n_users is None:
            n_users = max(users, default=-1) + 1
        if n_items is None:
            n_items = max(items, default=-1) + 1
        return cls(n_users, n_items, users, items, ratings)

    def __len__(self) -> int:
        return len(self.ratings)

    def entries(self) -> Iterator[tuple[int, int, float]]:
        for u, i, r in zip(self.users, self.items, self.ratings):
            yield int(u), int(i), float(r)

    @cached_property
    def _by_user(self) -> list[UserRatings]:
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [UserRatings(self.items[a:b], self.ratings[a:b])
                for a, b in zip(bounds[:-1], bounds[1:])]

    def user(self, user_id: int) -> UserRatings:
        return self._by_user[user_id]

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 100
    learning_rate: float = 0.01
    lambda_u: float = 1e-4
    mu_v: float = 1e-4
    max_iters: int = 100
    stop_threshold: float = 1e-4
    seed: int = 0
    init_scale: float = 0.1
    payload_mode: str = PART
    # "attack" reproduces the raw-gradient, unit-step relations the leakage
    # derivation assumes; see fedmf.attack.
    convention: str = ALGORITHM1

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_u < 0 or self.mu_v < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.stop_threshold < 0:
            raise ValueError("stop_threshold must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.payload_mode not in PAYLOAD_MODES:
            raise ValueError(f"payload_mode must be one of {PAYLOAD_MODES}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        if self.convention == ATTACK and (self.lambda_u or self.mu_v):
            raise ValueError("the attack convention requires lambda_u = mu_v = 0")


@dataclass
class GradientPayload:
    """One user's upload for one round.

    ``vectors[k]`` belongs to ``items[k]``. A FullText payload lists every item
    in order, with zero rows for items the user did not rate.
    """

    user_id: int
    mode: str
    items: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.mode not in PAYLOAD_MODES:
            raise ValueError(f"unknown payload mode {self.mode!r}")
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.items):
            raise ValueError("vectors must be a (len(items), dim) matrix")
        if self.mode == FULL and not np.array_equal(self.items, np.arange(len(self.items))):
            raise ValueError("a FullText payload must cover items 0..m-1 in order")

    def entries(self) -> list[tuple[int, np.ndarray]]:
        return list(zip(self.items.tolist(), self.vectors))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.vectors))) if self.vectors.size else 0.0

    def __eq__(self, other):
        if not isinstance(other, GradientPayload):
            return NotImplemented
        return (self.user_id == other.user_id and self.mode == other.mode
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.vectors, other.vectors))


class TrainResult(NamedTuple):
    U: np.ndarray
    V: np.ndarray
    loss_history: list[float]
    transcript: Transcript | None = None


def predict(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(u @ v)


def loss(U, V, ratings: RatingTable, lambda_u: float, mu_v: float) -> float:
    if len(ratings) == 0:
        raise ValueError("loss is undefined without ratings")
    U, V = np.asarray(U), np.asarray(V)
    pred = np.einsum("kd,kd->k", U[ratings.users], V[ratings.items])
    resid = ratings.ratings - pred
    return float(resid @ resid / len(ratings)
                 + lambda_u * np.sum(U * U) + mu_v * np.sum(V * V))


def _rated_rows(V: np.ndarray, user_ratings: UserRatings) -> np.ndarray:
    items = user_ratings.items
    if len(items) and (items.min() < 0 or items.max() >= len(V)):
        raise IndexError("rated item outside the item-profile matrix")
    return V[items]


def user_gradient(u, V, user_ratings: UserRatings, lambda_u: float) -> np.ndarray:
    Vr = _rated_rows(V, user_ratings)
    resid = user_ratings.ratings - Vr @ u
    return -2.0 * (Vr.T @ resid) + 2.0 * lambda_u * u


def item_gradients(u, V, user_ratings: UserRatings, mu_v: float,
                   payload_mode: str = PART) -> tuple[np.ndarray, np.ndarray]:
    """Raw item gradients contributed by one user.

    Returns:
        ``(item_ids, vectors)``; PartText gives the rated items only,
        FullText every item with zero rows where nothing was rated.
    """
    Vr = _rated_rows(V, user_ratings)
    resid = user_ratings.ratings - Vr @ u
    grads = -2.0 * resid[:, None] * u[None, :] + 2.0 * mu_v * Vr
    if payload_mode == PART:
        return user_ratings.items, grads
    full = np.zeros_like(V, dtype=np.float64)
    full[user_ratings.items] = grads
    return np.arange(len(V)), full


def _attack_step(u, V, user_ratings: UserRatings):
    Vr = _rated_rows(V, user_ratings)
    resid = user_ratings.ratings - Vr @ u
    return u + 2.0 * (Vr.T @ resid), resid[:, None] * u[None, :]


def local_update(u, V, user_ratings: UserRatings, config: TrainConfig,
                 user_id: int = 0) -> tuple[np.ndarray, GradientPayload]:
    """One user's step against the item profiles it downloaded.

    Both the new user profile and the payload are computed from the same
    ``(u, V)``. Under the attack convention the payload is the raw
    ``u (r - <u, v>)`` and the user takes a unit step.
    """
    u = np.asarray(u, dtype=np.float64)
    if config.convention == ATTACK:
        u_new, grads = _attack_step(u, V, user_ratings)
        items = user_ratings.items
        if config.payload_mode == FULL:
            full = np.zeros_like(V, dtype=np.float64)
            full[items] = grads
            items, grads = np.arange(len(V)), full
        return u_new, GradientPayload(user_id, config.payload_mode, items, grads)
    gamma = config.learning_rate
    u_new = u - gamma * user_gradient(u, V, user_ratings, config.lambda_u)
    items, grads = item_gradients(u, V, user_ratings, config.mu_v, config.payload_mode)
    return u_new, GradientPayload(user_id, config.payload_mode, items, gamma * grads)


def server_scale(config: TrainConfig) -> float:
    """Factor the server multiplies each payload by before subtracting it."""
    return -2.0 * config.learning_rate if config.convention == ATTACK else 1.0


def server_apply(V, payload: GradientPayload, scale: float = 1.0,
                 inplace: bool = False) -> np.ndarray:
    """Subtract ``scale * payload`` from the matching rows of ``V``."""
    V = V if inplace else np.array(V, dtype=np.float64, copy=True)
    items = payload.items
    if len(items) and (items.min() < 0 or items.max() >= len(V)):
        raise IndexError("payload item id out of range")
    if payload.vectors.size and payload.vectors.shape[1] != V.shape[1]:
        raise ValueError("payload dimension does not match the profiles")
    if scale == 1.0:
        V[items] -= payload.vectors
    else:
        V[items] -= scale * payload.vectors
    return V


def init_user_profile(user_id: int, config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0, user_id])
    return rng.uniform(0.0, config.init_scale, config.dim)


def init_item_profiles(n_items: int, config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 1])
    return rng.uniform(0.0, config.init_scale, (n_items, config.dim))


def init_profiles(n_users: int, n_items: int, config: TrainConfig):
    U = np.array([init_user_profile(i, config) for i in range(n_users)]).reshape(n_users, config.dim)
    return U, init_item_profiles(n_items, config)


def train_centralized(ratings: RatingTable, config: TrainConfig) -> TrainResult:
    """Reference trainer holding all ratings and profiles in one place."""
    if len(ratings) == 0:
        raise ValueError("cannot train without ratings")
    U, V = init_profiles(ratings.n_users, ratings.n_items, config)
    history = [loss(U, V, ratings, config.lambda_u, config.mu_v)]
    gamma, attack = config.learning_rate, config.convention == ATTACK
    for it in range(config.max_iters):
        max_step = 0.0
        for i in range(ratings.n_users):
            ur = ratings.user(i)
            u = U[i]
            if attack:
                U[i], grads = _attack_step(u, V, ur)
                V[ur.items] -= -2.0 * gamma * grads
            else:
                gu = user_gradient(u, V, ur, config.lambda_u)
                _, gv = item_gradients(u, V, ur, config.mu_v)
                step = gamma * gv
                U[i] = u - gamma * gu
                V[ur.items] -= step
                grads = step
            if grads.size:
                max_step = max(max_step, float(np.max(np.abs(grads))))
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise DivergenceError(it)
        history.append(loss(U, V, ratings, config.lambda_u, config.mu_v))
        if max_step < config.stop_threshold:
            break
    return TrainResult(U, V, history)


def train_distributed_plaintext(ratings: RatingTable, config: TrainConfig,
                                record_transcript: bool = False) -> TrainResult:
    """Algorithm-1 simulation: clients own ``u_i``, the server owns ``V``.

    Every client works on its own downloaded copy of ``V`` and only its
    payload reaches the server.
    """
    if len(ratings) == 0:
        raise ValueError("cannot train without ratings")
    us = [init_user_profile(i, config) for i in range(ratings.n_users)]
    V = init_item_profiles(ratings.n_items, config)
    scale = server_scale(config)
    transcript = Transcript.for_config(config, ratings.n_users, ratings.n_items) \
        if record_transcript else None

    def current_loss():
        U = np.array(us).reshape(ratings.n_users, config.dim)
        return loss(U, V, ratings, config.lambda_u, config.mu_v)

    history = [current_loss()]
    for it in range(config.max_iters):
        snapshot = V.copy()
        payloads = []
        for i in range(ratings.n_users):
            downloaded = V.copy()
            us[i], payload = local_update(us[i], downloaded, ratings.user(i), config, user_id=i)
            server_apply(V, payload, scale=scale, inplace=True)
            payloads.append(payload)
        if transcript is not None:
            transcript.rounds.append(TranscriptRound(snapshot, payloads))
        if not (np.all(np.isfinite(V)) and all(np.all(np.isfinite(u)) for u in us)):
            raise DivergenceError(it)
        history.append(current_loss())
        if max((p.max_abs() for p in payloads), default=0.0) < config.stop_threshold:
            break
    if transcript is not None:
        transcript.final = V.copy()
    U = np.array(us).reshape(ratings.n_users, config.dim)
    return TrainResult(U, V, history, transcript)


def rmse(U, V, ratings: RatingTable) -> float:
    """Root-mean-square error on the given ratings (convenience metric)."""
    pred = np.einsum("kd,kd->k", np.asarray(U)[ratings.users], np.asarray(V)[ratings.items])
    return float(np.sqrt(np.mean((ratings.ratings - pred) ** 2)))
