"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test records one PASS/FAIL line (see ``conftest.py``) before asserting,
so the summary lists all criteria even when one fails.
"""
import logging
import math
import os
import random
import time
from pathlib import Path

import numpy as np
import pytest

from fedmf import attack as leak
from fedmf import bench, mf
from fedmf import paillier as he
from fedmf.data import (TABLE1_RATINGS, TABLE1_SECONDS, parse_ratings, planted_ratings,
                        synth_lowrank, synth_movielens_like)
from fedmf.protocol.federation import run_federation

pytestmark = pytest.mark.acceptance
log = logging.getLogger("acceptance")

MOVIELENS = Path(os.environ.get("FEDMF_MOVIELENS", "data/ml-latest-small/ratings.csv"))


# ---- 1. distributed == centralised ------------------------------------------------

def test_c1_distributed_equals_centralised(acceptance):
    t0 = time.perf_counter()
    table, _, _ = synth_lowrank(20, 30, 5, noise=0.1, density=0.5, seed=0)
    cfg = mf.TrainConfig(dim=5, max_iters=50, stop_threshold=0.0, seed=0)
    a = mf.train_centralized(table, cfg)
    b = mf.train_distributed_plaintext(table, cfg)
    main_ok = (np.array_equal(a.U, b.U) and np.array_equal(a.V, b.V)
               and a.loss_history == b.loss_history and len(a.loss_history) == 51)
    elapsed = time.perf_counter() - t0
    # property sweep over further seeds and both payload shapes (outside the timed run)
    sweep_ok = True
    for seed in range(1, 6):
        for pm in mf.PAYLOAD_MODES:
            tbl, _, _ = synth_lowrank(20, 30, 5, noise=0.1, density=0.5, seed=seed)
            c = mf.TrainConfig(dim=5, max_iters=50, stop_threshold=0.0, seed=seed, payload_mode=pm)
            x, y = mf.train_centralized(tbl, c), mf.train_distributed_plaintext(tbl, c)
            sweep_ok &= np.array_equal(x.U, y.U) and np.array_equal(x.V, y.V)
    ok = main_ok and sweep_ok and elapsed < 5.0
    acceptance.record("1 oracle equivalence", ok,
                      f"bit-identical={main_ok}, 10-run sweep={sweep_ok}, {elapsed:.2f}s (< 5s)")
    assert ok


# ---- 2. encrypted accuracy ----------------------------------------------------------

def test_c2_encrypted_matches_plaintext(acceptance):
    t0 = time.perf_counter()
    table, _, _ = synth_lowrank(10, 20, 5, noise=0.1, density=0.5, seed=1)
    cfg = mf.TrainConfig(dim=5, max_iters=10, stop_threshold=0.0, seed=1)
    plain = run_federation(table, cfg, "plaintext")
    enc = run_federation(table, cfg, "encrypted", key_bits=256, exponent=-40, key_seed=2)
    elapsed = time.perf_counter() - t0
    dv = float(np.max(np.abs(enc.V - plain.V)))
    rel = max(abs(a - b) / abs(b) for a, b in zip(enc.loss_history, plain.loss_history))
    ok = (enc.iterations == plain.iterations == 10 and dv < 1e-6 and rel < 1e-6
          and elapsed < 120)
    acceptance.record("2 encrypted accuracy", ok,
                      f"max|dV|={dv:.2e} (< 1e-6), loss rel diff={rel:.2e} (< 1e-6), "
                      f"{elapsed:.1f}s (< 120s)")
    assert ok


# ---- 3. leakage reproduction --------------------------------------------------------

def _attack_once(n_users, seed):
    table = planted_ratings(n_users, 8, seed=seed)
    cfg = mf.TrainConfig(dim=3, learning_rate=0.1, lambda_u=0.0, mu_v=0.0, max_iters=2,
                         stop_threshold=0.0, seed=seed, convention=mf.ATTACK)
    tr = mf.train_distributed_plaintext(table, cfg, record_transcript=True).transcript
    tr.ground_truth = list(table.entries())
    return leak.attack(tr, 0, 0, rating_range=(1.0, 5.0))


def test_c3_leakage_attack(acceptance):
    t0 = time.perf_counter()
    lines, ok = [], True
    for n_users, tol in ((1, 1e-3), (5, 1e-2)):
        wins, worst, failures = 0, 0.0, []
        for seed in range(50):
            res = _attack_once(n_users, seed)
            err = res.max_abs_error
            hit = res.success and err is not None and err < tol and len(res.ratings) == 8
            wins += hit
            if hit:
                worst = max(worst, err)
            else:
                failures.append((seed, res.diagnostics.get("failure", "tolerance")))
                log.warning("attack failed: %d users seed %d: %s", n_users, seed, failures[-1][1])
        rate = wins / 50
        ok &= rate >= 0.9
        lines.append(f"{n_users}x8: {wins}/50 within {tol:g} (worst {worst:.1e})"
                     + (f", failures {failures}" if failures else ""))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    acceptance.record("3 leakage reproduction", ok, "; ".join(lines) + f"; {elapsed:.1f}s (< 30s)")
    assert ok


# ---- 4. Paillier property suite -----------------------------------------------------

def _paillier_suite(key_bits, trials, rng):
    pk, sk = he.keygen(key_bits, rng=rng)
    n = pk.n
    for _ in range(trials):
        m = rng.randrange(n)
        if he.decrypt(sk, he.encrypt(pk, m, rng=rng)) != m:
            return False, "roundtrip"
    for _ in range(max(trials // 10, 20)):
        m1, m2 = rng.randrange(n), rng.randrange(n)
        c1, c2 = he.encrypt(pk, m1, rng=rng), he.encrypt(pk, m2, rng=rng)
        if he.decrypt(sk, he.add_cipher(pk, c1, c2)) != (m1 + m2) % n:
            return False, "op1"
        if he.decrypt(sk, he.add_plain(pk, c1, m2)) != (m1 + m2) % n:
            return False, "op2"
        if he.decrypt(sk, he.mul_plain(pk, c1, m2)) != m1 * m2 % n:
            return False, "op3"
        x, y = rng.uniform(-1e6, 1e6), rng.uniform(-1e6, 1e6)
        cx, cy = he.encrypt_encoded(pk, he.encode(x, -40, pk)), he.encrypt_real(sk, y, -40)
        fx, fy = round(math.ldexp(x, 40)), round(math.ldexp(y, 40))
        if he.decrypt_real(sk, he.add_cipher(pk, cx, cy)) != math.ldexp(fx + fy, -40):
            return False, "signed add"
        if he.decrypt_real(sk, he.sub_cipher(pk, cx, cy)) != math.ldexp(fx - fy, -40):
            return False, "signed subtract"
        if he.encrypt(pk, m1, rng=rng) == he.encrypt(pk, m1, rng=rng):
            return False, "probabilistic encryption"
    return True, "all checks"


def test_c4_paillier_suite(acceptance):
    t0 = time.perf_counter()
    rng = random.Random(2024)
    ok256, why256 = _paillier_suite(256, 1000, rng)
    ok1024, why1024 = _paillier_suite(1024, 50, rng)
    elapsed = time.perf_counter() - t0
    ok = ok256 and ok1024 and elapsed < 120
    acceptance.record("4 Paillier properties", ok,
                      f"256-bit x1000: {why256}; 1024-bit x50: {why1024}; {elapsed:.1f}s (< 120s)")
    assert ok


# ---- 5 and 6. timing sweep ----------------------------------------------------------

@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    if MOVIELENS.exists():
        table, name = parse_ratings(MOVIELENS), f"ml-latest-small ({MOVIELENS})"
    else:
        table, name = synth_movielens_like(0), "synthetic ml-latest-small stand-in"
    t0 = time.perf_counter()
    report = bench.run_bench(table, items=(40, 80, 160, 320), key_bits=256, dim=10, seed=0,
                             dataset=name)
    elapsed = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("bench")
    report.write_json(out / "bench.json")
    report.write_csv(out / "bench.csv")
    for rec in report.table_rows():
        print(rec)
    return report, elapsed


def test_c5_scaling_trend(acceptance, sweep):
    report, elapsed = sweep
    _, _, r2 = report.linear_fit(mf.FULL)
    speedup = (report.row(mf.FULL, 320).seconds_per_iteration
               / report.row(mf.PART, 320).seconds_per_iteration)
    rows = ", ".join(f"{r.n_items}:{r.seconds_per_iteration:.1f}s"
                     f" (ref {TABLE1_SECONDS[r.n_items][1]}s, {r.n_ratings} vs "
                     f"{TABLE1_RATINGS[r.n_items]} ratings)" for r in report.series(mf.FULL))
    ok = r2 > 0.9 and speedup >= 3.0 and elapsed < 900
    acceptance.record("5 scaling trend", ok,
                      f"[{report.dataset}] FullText {rows}; R^2={r2:.4f} (> 0.9); "
                      f"PartText speedup at 320={speedup:.1f}x (>= 3x); sweep {elapsed:.0f}s (< 900s)")
    assert ok


def test_c5_on_real_movielens():
    if not MOVIELENS.exists():
        pytest.skip(f"real ml-latest-small not found at {MOVIELENS}; "
                    "criterion 5 ran on the synthetic stand-in")
    table = parse_ratings(MOVIELENS)
    assert (table.n_users, table.n_items, len(table)) == (610, 9724, 100836)


def test_c6_server_dominates(acceptance, sweep):
    report, _ = sweep
    rows = report.series(mf.FULL)
    ok = all(r.server_seconds > r.client_seconds for r in rows)
    shares = ", ".join(f"{r.n_items}: server {r.server_seconds:.1f}s vs client "
                       f"{r.client_seconds:.1f}s ({100 * r.server_share:.0f}% server)" for r in rows)
    acceptance.record("6 server dominance", ok, shares)
    assert ok


# ---- 7. gradient correctness --------------------------------------------------------

def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def test_c7_gradients_vs_finite_differences(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, m, d = rng.integers(1, 11), rng.integers(1, 11), rng.integers(1, 6)
        table, _, _ = synth_lowrank(int(n), int(m), 2, noise=0.5, density=1.0,
                                    seed=int(rng.integers(1 << 31)))
        U, V = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        lam, mu = rng.uniform(0, 0.5, 2)
        i = int(rng.integers(n))
        ur = table.user(i)

        def obj(u, Vx):
            # the per-user objective: squared errors of user i plus its regularisers
            e = ur.ratings - Vx[ur.items] @ u
            return e @ e + lam * u @ u + mu * np.sum(Vx[ur.items] ** 2)

        gu = mf.user_gradient(U[i], V, ur, lam)
        worst = max(worst, _rel(gu, _fd(lambda x: obj(x, V), U[i].copy())))
        items, gv = mf.item_gradients(U[i], V, ur, mu)
        worst = max(worst, _rel(gv, _fd(lambda x: obj(U[i], x), V.copy())[items]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10
    acceptance.record("7 gradient correctness", ok,
                      f"worst relative error {worst:.2e} over 100 instances (< 1e-5), "
                      f"{elapsed:.1f}s (< 10s)")
    assert ok
