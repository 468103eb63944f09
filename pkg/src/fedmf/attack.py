"""Rating reconstruction from two consecutive plaintext gradient uploads.

For a user with profile ``u`` the upload for item ``j`` is (after
normalisation) ``G_j = u * (r_j - <u, v_j>)``, so every row of ``G`` is
parallel to ``u``, and the user's next profile is

    u'_m = u_m + alpha_m / u_m,   alpha_m = 2 * step * sum_n v_nm G_nm.

Writing the residual identity of item ``j`` at both rounds and substituting
``u_m = (G_jm / G_jk) u_k`` leaves one scalar equation in ``x = u_k``:

    f(x) = G_jk/x - G'_jk/(x + alpha_k/x) - x*beta_j/G_jk - G_jk*gamma_j/x

with ``beta_j = sum_m (v'_jm - v_jm) G_jm`` and
``gamma_j = sum_m alpha_m v'_jm / G_jm``. ``f`` is odd, so roots come in
+/- pairs; the plausible rating range picks the sign. Once ``u_k`` is known
the full profile follows from the ratios and ``r_j = G_jk/u_k + <u, v_j>``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fedmf.transcript import PLAINTEXT, Transcript

logger = logging.getLogger(__name__)

GRID_LOW = 1e-6
GRID_HIGH = 1e3
GRID_POINTS = 4000
NEWTON_TOL = 1e-12
RESIDUAL_TOL = 1e-10
MAX_ITERS = 100
CONSISTENCY_TOL = 1e-6


class AttackPreconditionError(ValueError):
    pass


@dataclass
class AttackScratch:
    items: np.ndarray
    G_t: np.ndarray
    G_t1: np.ndarray
    V_t: np.ndarray
    V_t1: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    k: int
    usable: np.ndarray  # rows with every G_jm != 0, i.e. finite gamma_j


@dataclass
class RecoveredRatings:
    user_id: int
    round: int
    ratings: dict[int, float]
    unrecoverable: list[int] = field(default_factory=list)
    errors: dict[int, float] | None = None
    u_estimate: np.ndarray | None = None
    root: float | None = None
    k: int | None = None
    success: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_abs_error(self) -> float | None:
        if not self.errors:
            return None
        return max(self.errors.values())

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "round": self.round,
            "success": self.success,
            "ratings": {str(j): r for j, r in self.ratings.items()},
            "unrecoverable": self.unrecoverable,
            "errors": ({str(j): e for j, e in self.errors.items()}
                       if self.errors is not None else None),
            "max_abs_error": self.max_abs_error,
            "u_estimate": None if self.u_estimate is None else self.u_estimate.tolist(),
            "root": self.root,
            "k": self.k,
            "diagnostics": self.diagnostics,
        }


def _check_transcript(transcript: Transcript, user_id: int, t: int):
    if transcript.mode != PLAINTEXT:
        raise AttackPreconditionError("only plaintext transcripts expose gradients")
    if t < 0 or t + 1 >= len(transcript):
        raise AttackPreconditionError(
            f"need rounds {t} and {t + 1}; transcript has {len(transcript)} round(s)")
    if transcript.config.get("lambda_u", 0.0) != 0.0:
        raise AttackPreconditionError("the reconstruction assumes lambda_u = 0")
    for s in (t, t + 1):
        try:
            transcript.payload(s, user_id)
        except KeyError:
            raise AttackPreconditionError(f"user {user_id} has no upload in round {s}") from None


def normalized_gradient(transcript: Transcript, t: int, user_id: int):
    """Convert an upload to the ``u (r - <u, v>)`` form and its user step.

    Algorithm-1 uploads are ``gamma * (-2 u e + 2 mu v)``; the mu part is
    removed using the profiles the user downloaded, and the user step is
    ``gamma``. Attack-convention uploads are already raw with unit step.

    Returns:
        ``(items, G, V_view, step)``
    """
    payload = transcript.payload(t, user_id)
    V = transcript.view(t, user_id)
    cfg = transcript.config
    if cfg.get("convention") == "attack":
        return payload.items, payload.vectors.copy(), V, 1.0
    gamma, mu = cfg["learning_rate"], cfg.get("mu_v", 0.0)
    rows = payload.vectors.copy()
    if mu:
        rated = np.any(payload.vectors != 0.0, axis=1)
        rows[rated] -= gamma * 2.0 * mu * V[payload.items[rated]]
    return payload.items, rows / (-2.0 * gamma), V, gamma


def choose_reference(G: np.ndarray) -> int:
    """Coordinate maximising ``min_j |G_jk|`` over the non-zero rows."""
    nz = np.any(G != 0.0, axis=1)
    if not nz.any():
        raise AttackPreconditionError("all uploaded gradients are zero")
    return int(np.argmax(np.min(np.abs(G[nz]), axis=0)))


def compute_scalars(transcript: Transcript, user_id: int, t: int,
                    k: int | None = None) -> AttackScratch:
    _check_transcript(transcript, user_id, t)
    items, G_t, V_t, step = normalized_gradient(transcript, t, user_id)
    items1, G_t1, V_t1, _ = normalized_gradient(transcript, t + 1, user_id)
    if not np.array_equal(items, items1):
        # FullText and PartText both keep the item set fixed across rounds.
        raise AttackPreconditionError("uploads of the two rounds cover different items")
    Vt, Vt1 = V_t[items], V_t1[items]
    alpha = 2.0 * step * np.sum(Vt * G_t, axis=0)
    beta = np.sum((Vt1 - Vt) * G_t, axis=1)
    usable = np.all(G_t != 0.0, axis=1)
    gamma = np.full(len(items), np.nan)
    if usable.any():
        gamma[usable] = np.sum(alpha[None, :] * Vt1[usable] / G_t[usable], axis=1)
    if k is None:
        k = choose_reference(G_t)
    return AttackScratch(items, G_t, G_t1, Vt, Vt1, alpha, beta, gamma, k, usable)


def scalar_equation(g_t: float, g_t1: float, alpha_k: float, beta_j: float,
                    gamma_j: float) -> tuple[Callable, Callable]:
    """Return ``f`` and its derivative for one item."""

    def f(x):
        return (g_t / x - g_t1 / (x + alpha_k / x)
                - x * beta_j / g_t - g_t * gamma_j / x)

    def fprime(x):
        w = x + alpha_k / x
        return (-g_t / x**2 + g_t1 * (1.0 - alpha_k / x**2) / w**2
                - beta_j / g_t + g_t * gamma_j / x**2)

    return f, fprime


def newton_bracketed(f, fprime, a: float, b: float, tol: float = NEWTON_TOL,
                     max_iter: int = MAX_ITERS) -> float:
    """Newton iteration kept inside ``[a, b]``; falls back to bisection."""
    fa = f(a)
    x = 0.5 * (a + b)
    for _ in range(max_iter):
        fx = f(x)
        if abs(fx) < tol:
            return x
        if (fx < 0) == (fa < 0):
            a, fa = x, fx
        else:
            b = x
        d = fprime(x)
        nxt = x - fx / d if d != 0 and math.isfinite(d) else None
        if nxt is None or not (min(a, b) < nxt < max(a, b)):
            nxt = 0.5 * (a + b)
        if nxt == x:
            return x
        x = nxt
    return x


def newton(f, fprime, x0: float, tol: float = NEWTON_TOL, max_iter: int = MAX_ITERS) -> float:
    """Plain Newton iteration from ``x0``."""
    x = x0
    for _ in range(max_iter):
        fx = f(x)
        if abs(fx) < tol:
            return x
        x = x - fx / fprime(x)
    raise ArithmeticError(f"Newton did not converge from {x0}")


def find_roots(f, fprime, low: float = GRID_LOW, high: float = GRID_HIGH,
               points: int = GRID_POINTS) -> list[float]:
    """Roots of ``f`` bracketed on a log grid over ``[low, high]`` of both signs."""
    grid = np.geomspace(low, high, points)
    roots = []
    for xs in (grid, -grid):
        with np.errstate(all="ignore"):
            vals = np.array([f(x) for x in xs])
        for i in range(points - 1):
            fa, fb = vals[i], vals[i + 1]
            if not (math.isfinite(fa) and math.isfinite(fb)):
                continue
            if fa == 0.0:
                roots.append(float(xs[i]))
                continue
            if (fa < 0) == (fb < 0):
                continue
            # A sign change across a pole converges to the pole, not a root.
            try:
                with np.errstate(all="ignore"):
                    x = newton_bracketed(f, fprime, float(xs[i]), float(xs[i + 1]))
                    if abs(f(x)) < RESIDUAL_TOL:
                        roots.append(x)
            except ZeroDivisionError:
                continue
    return roots


def solve_uik(scratch: AttackScratch, j: int) -> list[float]:
    """Candidate values of ``u_k`` from the equation of payload row ``j``."""
    if not scratch.usable[j]:
        return []
    k = scratch.k
    f, fp = scalar_equation(scratch.G_t[j, k], scratch.G_t1[j, k], scratch.alpha[k],
                            scratch.beta[j], scratch.gamma[j])
    return find_roots(f, fp)


def recover_user_vector(G_row: np.ndarray, k: int, u_ik: float) -> np.ndarray:
    """``u_m = (G_jm / G_jk) * u_k`` from any non-zero gradient row."""
    G_row = np.asarray(G_row, dtype=np.float64)
    if G_row[k] == 0.0:
        raise ZeroDivisionError("reference gradient component is zero")
    return G_row / G_row[k] * u_ik


def recover_ratings(u_t, V_t, items, G_t, k: int, partial: bool = True) -> RecoveredRatings:
    """``r_j = G_jk / u_k + <u, v_j>`` for every uploaded row.

    ``V_t`` is indexed by row of ``G_t`` (already restricted to ``items``).
    A zero row in a PartText upload means a zero residual, so the rating is
    ``<u, v_j>``; in a FullText upload it could equally be an unrated item and
    is reported as unrecoverable.
    """
    u_t = np.asarray(u_t, dtype=np.float64)
    if u_t[k] == 0.0:
        raise ZeroDivisionError("u_k is zero")
    out, missing = {}, []
    for row, j in enumerate(np.asarray(items).tolist()):
        g = G_t[row]
        if not np.any(g != 0.0):
            if partial:
                out[j] = float(u_t @ V_t[row])
            else:
                missing.append(j)
            continue
        out[j] = float(g[k] / u_t[k] + u_t @ V_t[row])
    return RecoveredRatings(user_id=-1, round=-1, ratings=out, unrecoverable=missing)


def _range_score(values, lo: float, hi: float) -> tuple[float, float]:
    vals = np.asarray(list(values), dtype=np.float64)
    if not len(vals):
        return 0.0, math.inf
    inside = (vals >= lo) & (vals <= hi)
    outside = np.maximum(lo - vals, 0.0) + np.maximum(vals - hi, 0.0)
    return float(inside.mean()), float(outside.sum())


def _consistency(scratch: AttackScratch, x: float) -> float:
    """Worst relative residual of ``x`` across all usable item equations."""
    worst, k = 0.0, scratch.k
    for j in np.flatnonzero(scratch.usable):
        g, g1 = scratch.G_t[j, k], scratch.G_t1[j, k]
        a, b, c = scratch.alpha[k], scratch.beta[j], scratch.gamma[j]
        terms = np.array([g / x, g1 / (x + a / x), x * b / g, g * c / x])
        scale = np.sum(np.abs(terms))
        val = abs(terms[0] - terms[1] - terms[2] - terms[3])
        worst = max(worst, val / scale if scale else val)
    return worst


def attack(transcript: Transcript, user_id: int, t: int,
           rating_range: tuple[float, float] = (0.5, 5.0),
           ground_truth: dict[int, float] | None = None) -> RecoveredRatings:
    """Reconstruct ``user_id``'s ratings from its uploads in rounds t and t+1.

    Every bracketed root of every usable item equation is a candidate. Roots
    that do not satisfy all item equations are discarded when any candidate
    does; the survivor whose ratings best fit ``rating_range`` (share inside,
    then distance outside) wins.
    """
    lo, hi = rating_range
    scratch = compute_scalars(transcript, user_id, t)
    k = scratch.k
    partial = transcript.config.get("payload_mode", "part") == "part"
    diagnostics = {"k": k, "alpha": scratch.alpha.tolist(),
                   "usable_items": int(scratch.usable.sum())}
    if ground_truth is None and transcript.ground_truth is not None:
        ground_truth = {i: r for u, i, r in transcript.ground_truth if u == user_id}

    order = np.flatnonzero(scratch.usable)
    order = order[np.argsort(-np.abs(scratch.G_t[order, k]))]
    candidates: list[float] = []
    for j in order:
        for x in solve_uik(scratch, int(j)):
            if not any(abs(x - c) <= 1e-9 * max(abs(x), abs(c)) for c in candidates):
                candidates.append(float(x))
    diagnostics["candidates"] = candidates
    if not candidates:
        logger.info("user %d round %d: no sign change bracketed a root", user_id, t)
        diagnostics["failure"] = "no_bracket"
        return RecoveredRatings(user_id, t, {}, success=False, k=k, diagnostics=diagnostics)

    ref = int(np.argmax(np.abs(scratch.G_t[:, k])))
    scored = []
    for x in candidates:
        u = recover_user_vector(scratch.G_t[ref], k, x)
        rec = recover_ratings(u, scratch.V_t, scratch.items, scratch.G_t, k, partial)
        frac, dist = _range_score(rec.ratings.values(), lo, hi)
        scored.append((_consistency(scratch, x), frac, dist, x, u, rec))
    consistent = [s for s in scored if s[0] <= CONSISTENCY_TOL]
    pool = consistent or scored
    best = min(pool, key=lambda s: (-s[1], s[2], s[0]))
    cons, frac, dist, x, u, rec = best
    diagnostics.update(consistency=float(cons), in_range_fraction=float(frac), out_of_range=float(dist),
                       consistent_candidates=len(consistent))
    result = RecoveredRatings(user_id, t, rec.ratings, rec.unrecoverable,
                              u_estimate=u, root=x, k=k, success=frac > 0.0,
                              diagnostics=diagnostics)
    if frac == 0.0:
        diagnostics["failure"] = "no_candidate_in_range"
        logger.info("user %d round %d: no candidate gives in-range ratings", user_id, t)
    if ground_truth is not None:
        result.errors = {j: abs(r - ground_truth[j]) for j, r in rec.ratings.items()
                         if j in ground_truth}
    return result
