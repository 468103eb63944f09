import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmf import mf
from fedmf.data import synth_lowrank
from fedmf.mf import RatingTable, TrainConfig, UserRatings


def one_rating(r=5.0):
    return UserRatings(np.array([0]), np.array([r]))


def random_instance(rng, n=5, m=8, d=3, density=0.6):
    mask = rng.random((n, m)) < density
    mask[0, 0] = True
    users, items = np.nonzero(mask)
    table = RatingTable(n, m, users, items, rng.uniform(1, 5, len(users)))
    return table, rng.normal(size=(n, d)), rng.normal(size=(m, d))


# ---- predict / loss ---------------------------------------------------------

@pytest.mark.parametrize("u, v, want", [([1, 2], [3, 4], 11.0), ([0, 0], [5, 5], 0.0),
                                        ([0.5], [4], 2.0)])
def test_predict(u, v, want):
    assert mf.predict(u, v) == want


def test_predict_dimension_mismatch():
    with pytest.raises(ValueError):
        mf.predict([1, 2], [1, 2, 3])


def test_loss_single_residual():
    table = RatingTable.from_entries([(0, 0, 5.0)])
    assert mf.loss([[2.0]], [[1.0]], table, 0, 0) == 9.0


def test_loss_perfect_fit_is_zero():
    table, _, _ = synth_lowrank(4, 6, 2, seed=3)
    _, U, V = synth_lowrank(4, 6, 2, seed=3)
    assert mf.loss(U, V, table, 0, 0) == pytest.approx(0.0, abs=1e-24)


def test_loss_matches_double_loop():
    rng = np.random.default_rng(0)
    table, U, V = random_instance(rng)
    lam, mu = 0.3, 0.7
    total = 0.0
    for i in range(table.n_users):
        for j in range(table.n_items):
            hit = (table.users == i) & (table.items == j)
            if hit.any():
                r = table.ratings[hit][0]
                total += (r - sum(U[i, k] * V[j, k] for k in range(U.shape[1]))) ** 2
    reg = lam * sum(x * x for x in U.ravel()) + mu * sum(x * x for x in V.ravel())
    assert mf.loss(U, V, table, lam, mu) == pytest.approx(total / len(table) + reg, rel=1e-12)


def test_loss_rejects_empty_table():
    with pytest.raises(ValueError):
        mf.loss(np.zeros((1, 1)), np.zeros((1, 1)), RatingTable.from_entries([], 1, 1), 0, 0)


# ---- gradients --------------------------------------------------------------

def test_gradients_one_term():
    u, V = np.array([2.0]), np.array([[1.0]])
    assert mf.user_gradient(u, V, one_rating(), 0.0).tolist() == [-6.0]
    items, g = mf.item_gradients(u, V, one_rating(), 0.0)
    assert items.tolist() == [0] and g.tolist() == [[-12.0]]


def test_zero_residual_gives_zero_user_gradient():
    V = np.array([[1.0, 2.0], [0.5, -1.0]])
    u = np.array([0.3, 0.4])
    ur = UserRatings(np.array([0, 1]), V @ u)
    assert np.allclose(mf.user_gradient(u, V, ur, 0.0), 0.0)


def test_part_text_omits_unrated_and_full_text_zero_fills():
    V = np.ones((4, 2))
    ur = UserRatings(np.array([1, 3]), np.array([4.0, 2.0]))
    u = np.array([0.1, 0.2])
    items, part = mf.item_gradients(u, V, ur, 0.1, mf.PART)
    assert items.tolist() == [1, 3]
    items_f, full = mf.item_gradients(u, V, ur, 0.1, mf.FULL)
    assert items_f.tolist() == [0, 1, 2, 3]
    assert np.array_equal(full[[1, 3]], part)
    assert not full[[0, 2]].any()


def test_gradient_rejects_out_of_range_item():
    with pytest.raises(IndexError):
        mf.user_gradient(np.ones(2), np.ones((2, 2)), UserRatings(np.array([5]), np.array([1.0])), 0)


def user_objective(u, V, ur, lam, mu):
    """Per-user share of the unnormalised objective the gradients differentiate."""
    resid = ur.ratings - V[ur.items] @ u
    return resid @ resid + lam * u @ u + mu * np.sum(V[ur.items] ** 2)


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10), m=st.integers(1, 10),
       d=st.integers(1, 5))
def test_gradients_match_finite_differences(seed, n, m, d):
    rng = np.random.default_rng(seed)
    table, U, V = random_instance(rng, n, m, d)
    lam, mu = rng.uniform(0, 0.5, 2)
    i = int(table.users[0])
    ur = table.user(i)
    gu = mf.user_gradient(U[i], V, ur, lam)
    assert rel_err(gu, central_difference(lambda x: user_objective(x, V, ur, lam, mu), U[i])) < 1e-5
    items, gv = mf.item_gradients(U[i], V, ur, mu)

    def f_v(Vx):
        return user_objective(U[i], Vx, ur, lam, mu)
    fd = central_difference(f_v, V)
    assert rel_err(gv, fd[items]) < 1e-5


def test_user_gradient_is_scaled_loss_gradient_without_regularisation():
    # With one user, M * dF/du equals the user gradient.
    rng = np.random.default_rng(5)
    table, U, V = random_instance(rng, n=1, m=6, d=3, density=1.0)
    M = len(table)

    def f(u):
        return M * mf.loss(u[None, :], V, table, 0.0, 0.0)
    fd = central_difference(f, U[0].copy())
    assert rel_err(mf.user_gradient(U[0], V, table.user(0), 0.0), fd) < 1e-5


# ---- local step and server ---------------------------------------------------

def test_local_update_one_term():
    cfg = TrainConfig(dim=1, learning_rate=0.1, lambda_u=0, mu_v=0)
    u, payload = mf.local_update(np.array([2.0]), np.array([[1.0]]), one_rating(), cfg)
    assert u.tolist() == pytest.approx([2.6])
    assert payload.items.tolist() == [0]
    assert payload.vectors.ravel().tolist() == pytest.approx([-1.2])


def test_zero_step_keeps_user_and_sends_zero_payload():
    # learning rate must be positive; a vanishing step checks the same degenerate limit
    cfg = TrainConfig(dim=2, learning_rate=1e-300)
    u0 = np.array([0.3, 0.1])
    u, payload = mf.local_update(u0, np.ones((3, 2)), one_rating(), cfg)
    assert np.array_equal(u, u0)
    assert payload.max_abs() < 1e-290


def test_server_apply_changes_only_payload_rows():
    V = np.arange(8.0).reshape(4, 2)
    p = mf.GradientPayload(0, mf.PART, [2], [[1.0, -1.0]])
    out = mf.server_apply(V, p)
    assert np.array_equal(out[[0, 1, 3]], V[[0, 1, 3]])
    assert out[2].tolist() == [3.0, 6.0]
    zero = mf.GradientPayload(0, mf.PART, [0, 1], np.zeros((2, 2)))
    assert np.array_equal(mf.server_apply(V, zero), V)


def test_server_apply_rejects_bad_item():
    with pytest.raises(IndexError):
        mf.server_apply(np.zeros((2, 2)), mf.GradientPayload(0, mf.PART, [2], [[0.0, 0.0]]))


def test_full_payload_must_cover_every_item():
    with pytest.raises(ValueError):
        mf.GradientPayload(0, mf.FULL, [0, 2], np.zeros((2, 1)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_full_and_part_payloads_update_identically(seed):
    rng = np.random.default_rng(seed)
    table, U, V = random_instance(rng, 3, 7, 2, density=0.4)
    ur = table.user(0)
    out = {}
    for pm in mf.PAYLOAD_MODES:
        cfg = TrainConfig(dim=2, payload_mode=pm, mu_v=0.01)
        _, payload = mf.local_update(U[0], V, ur, cfg)
        out[pm] = mf.server_apply(V, payload)
    assert np.array_equal(out[mf.PART], out[mf.FULL])


def test_one_user_step_matches_centralised_single_step():
    rng = np.random.default_rng(11)
    table, _, _ = random_instance(rng, 1, 5, 3, density=1.0)
    cfg = TrainConfig(dim=3, max_iters=1, stop_threshold=0)
    U, V = mf.init_profiles(1, 5, cfg)
    u, payload = mf.local_update(U[0], V, table.user(0), cfg)
    V1 = mf.server_apply(V, payload)
    ref = mf.train_centralized(table, cfg)
    assert np.array_equal(ref.U[0], u) and np.array_equal(ref.V, V1)


# ---- trainers -----------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6), m=st.integers(1, 8),
       pm=st.sampled_from(mf.PAYLOAD_MODES))
def test_distributed_equals_centralised(seed, n, m, pm):
    table, _, _ = synth_lowrank(n, m, 2, noise=0.1, density=0.7, seed=seed)
    if len(table) == 0:
        return
    cfg = TrainConfig(dim=3, max_iters=5, seed=seed, payload_mode=pm)
    a = mf.train_centralized(table, cfg)
    b = mf.train_distributed_plaintext(table, cfg)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.V, b.V)
    assert a.loss_history == b.loss_history


def test_rank_one_fit_drops_loss_below_one_percent():
    table, _, _ = synth_lowrank(10, 12, 1, seed=2, scale=2.0)
    cfg = TrainConfig(dim=1, learning_rate=0.05, lambda_u=0, mu_v=0, max_iters=100,
                      stop_threshold=0, init_scale=1.0)
    h = mf.train_centralized(table, cfg).loss_history
    assert h[-1] < 0.01 * h[0]


def test_zero_iterations_returns_initial_profiles():
    table, _, _ = synth_lowrank(3, 4, 2, seed=0)
    cfg = TrainConfig(dim=2, max_iters=0)
    res = mf.train_centralized(table, cfg)
    U0, V0 = mf.init_profiles(3, 4, cfg)
    assert np.array_equal(res.U, U0) and np.array_equal(res.V, V0)
    assert len(res.loss_history) == 1


def test_reruns_are_bit_identical():
    table, _, _ = synth_lowrank(5, 6, 2, noise=0.2, density=0.5, seed=9)
    cfg = TrainConfig(dim=4, max_iters=7, seed=4)
    a, b = mf.train_centralized(table, cfg), mf.train_centralized(table, cfg)
    assert np.array_equal(a.U, b.U) and np.array_equal(a.V, b.V)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_small_steps_never_increase_loss(seed):
    table, _, _ = synth_lowrank(6, 8, 2, noise=0.1, density=0.6, seed=seed)
    if len(table) == 0:
        return
    cfg = TrainConfig(dim=3, learning_rate=1e-3, lambda_u=0, mu_v=0, max_iters=10,
                      stop_threshold=0, seed=seed)
    h = mf.train_centralized(table, cfg).loss_history
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_stops_when_payloads_fall_below_threshold():
    table, _, _ = synth_lowrank(3, 3, 1, seed=1)
    cfg = TrainConfig(dim=2, max_iters=50, stop_threshold=1e9)
    assert len(mf.train_centralized(table, cfg).loss_history) == 2


def test_divergence_reports_iteration():
    table = RatingTable.from_entries([(0, 0, 5.0), (0, 1, 4.0), (1, 0, 3.0)])
    cfg = TrainConfig(dim=2, learning_rate=5.0, max_iters=50, stop_threshold=0)
    with np.errstate(all="ignore"), pytest.raises(mf.DivergenceError) as exc:
        mf.train_centralized(table, cfg)
    assert exc.value.iteration >= 0


def test_transcript_replay_identity():
    table, _, _ = synth_lowrank(4, 5, 2, density=0.8, seed=3)
    cfg = TrainConfig(dim=2, max_iters=4, stop_threshold=0)
    res = mf.train_distributed_plaintext(table, cfg, record_transcript=True)
    tr = res.transcript
    assert len(tr) == 4
    for t in range(len(tr)):
        V = tr.snapshot_before(t).copy()
        for p in tr.rounds[t].payloads:
            V = mf.server_apply(V, p)
        assert np.array_equal(V, tr.snapshot_after(t))
    assert np.array_equal(tr.final, res.V)


# ---- rating table ----------------------------------------------------------------

def test_rating_table_validation():
    with pytest.raises(ValueError):
        RatingTable.from_entries([(0, 0, 1.0), (0, 0, 2.0)])
    with pytest.raises(ValueError):
        RatingTable(1, 1, [1], [0], [1.0])
    with pytest.raises(ValueError):
        RatingTable(1, 1, [0], [0], [float("nan")])


def test_train_config_validation():
    for bad in ({"learning_rate": 0}, {"lambda_u": -1}, {"stop_threshold": -1},
                {"dim": 0}, {"payload_mode": "x"}, {"convention": "attack"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
