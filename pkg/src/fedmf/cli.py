"""Command-line interface: ``fedmf train | attack | bench``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from fedmf import attack as leak
from fedmf import data, mf
from fedmf import paillier as he
from fedmf.bench import DEFAULT_ITEMS, PAYLOADS, BudgetExceeded, run_bench
from fedmf.protocol.federation import run_federation
from fedmf.transcript import read_transcript, write_transcript

logger = logging.getLogger("fedmf")

SEED_ENV = "FEDMF_SEED"
EXIT_USAGE = 2
EXIT_ERROR = 1


class CliError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def parse_shape(spec: str, parts: int) -> tuple[int, ...]:
    """``"5x8x3"`` -> ``(5, 8, 3)``."""
    if not re.fullmatch(r"\d+(x\d+)*", spec) or spec.count("x") != parts - 1:
        raise CliError(f"expected {parts} positive integers joined by 'x', got {spec!r}")
    dims = tuple(int(p) for p in spec.split("x"))
    if any(d <= 0 for d in dims):
        raise CliError(f"all sizes must be positive in {spec!r}")
    return dims


def parse_range(spec: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in spec.split(","))
    except ValueError:
        raise CliError(f"--rating-range expects LO,HI, got {spec!r}") from None
    if not lo < hi:
        raise CliError("--rating-range needs LO < HI")
    return lo, hi


def parse_items(spec: str) -> list[int]:
    try:
        items = [int(x) for x in spec.split(",") if x]
    except ValueError:
        raise CliError(f"--items expects comma-separated integers, got {spec!r}") from None
    if not items or any(k <= 0 for k in items):
        raise CliError("--items needs positive integers")
    return items


def load_table(args, seed: int) -> tuple[mf.RatingTable, str]:
    if args.data:
        table, name = data.parse_ratings(args.data), str(args.data)
    elif args.synthetic:
        n, m, d_true = parse_shape(args.synthetic, 3)
        table, _, _ = data.synth_lowrank(n, m, d_true, noise=args.noise, density=args.density,
                                         seed=seed)
        name = f"synthetic:{args.synthetic}"
    elif args.planted:
        n, m = parse_shape(args.planted, 2)
        table, name = data.planted_ratings(n, m, seed=seed), f"planted:{args.planted}"
    elif getattr(args, "standin", False):
        table, name = data.synth_movielens_like(seed), "movielens-like stand-in"
    else:
        raise CliError("one of --data, --synthetic or --planted is required")
    items = getattr(args, "items", None)
    if isinstance(items, int):
        table = data.select_top_items(table, items)
    return table, name


def _add_data_args(p: argparse.ArgumentParser, standin: bool = False) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", type=Path, help="MovieLens ratings.csv")
    g.add_argument("--synthetic", metavar="NxMxD",
                   help="low-rank instance with N users, M items, true rank D")
    g.add_argument("--planted", metavar="NxM",
                   help="fully observed integer ratings in [1, 5]")
    if standin:
        g.add_argument("--standin", action="store_true",
                       help="synthetic table shaped like ml-latest-small (default)")
    p.add_argument("--density", type=float, default=1.0, help="synthetic mask density")
    p.add_argument("--noise", type=float, default=0.0, help="synthetic noise std")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmf", description="Federated matrix factorization")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and write profiles and loss history")
    t.add_argument("--mode", choices=["centralized", "plaintext", "encrypted"], default="plaintext")
    t.add_argument("--payload", choices=[mf.FULL, mf.PART], default=mf.PART)
    _add_data_args(t)
    t.add_argument("--items", type=int, help="keep only the K most-rated items")
    t.add_argument("--dim", type=int, default=mf.TrainConfig.dim)
    t.add_argument("--iters", type=int, default=mf.TrainConfig.max_iters)
    t.add_argument("--lr", type=float, default=mf.TrainConfig.learning_rate)
    t.add_argument("--lambda", dest="lambda_u", type=float, default=mf.TrainConfig.lambda_u)
    t.add_argument("--mu", dest="mu_v", type=float, default=mf.TrainConfig.mu_v)
    t.add_argument("--stop-threshold", type=float, default=mf.TrainConfig.stop_threshold)
    t.add_argument("--convention", choices=list(mf.CONVENTIONS), default=mf.ALGORITHM1)
    t.add_argument("--key-bits", type=int, default=256)
    t.add_argument("--exponent", type=int, default=he.DEFAULT_EXPONENT)
    t.add_argument("--transport", choices=["memory", "tcp"], default="memory")
    t.add_argument("--client-vote", action="store_true",
                   help="encrypted mode: stop when every client reports convergence")
    t.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 0")
    t.add_argument("--record-transcript", type=Path, metavar="PATH")
    t.add_argument("--embed-ground-truth", action="store_true",
                   help="store the ratings in the transcript header for attack evaluation")
    t.add_argument("--out", type=Path, required=True, help="result JSON path")
    t.add_argument("--metrics", type=Path, help="per-round timing and byte counts (JSON)")

    a = sub.add_parser("attack", help="recover a user's ratings from a plaintext transcript")
    a.add_argument("--transcript", type=Path, required=True)
    a.add_argument("--user", type=int, required=True)
    a.add_argument("--round", type=int, required=True)
    a.add_argument("--rating-range", default="0.5,5.0", metavar="LO,HI")
    a.add_argument("--out", type=Path, help="report path (default: stdout)")

    b = sub.add_parser("bench", help="time one encrypted iteration per configuration")
    _add_data_args(b, standin=True)
    b.add_argument("--items", default=",".join(map(str, DEFAULT_ITEMS)), metavar="K1,K2,...")
    b.add_argument("--payload", choices=[mf.FULL, mf.PART, "both"], default="both")
    b.add_argument("--key-bits", type=int, default=256)
    b.add_argument("--dim", type=int, default=10)
    b.add_argument("--exponent", type=int, default=he.DEFAULT_EXPONENT)
    b.add_argument("--seed", type=int, default=None, help=f"default: ${SEED_ENV} or 0")
    b.add_argument("--max-seconds", type=float, default=None,
                   help="refuse configurations predicted or measured to exceed this")
    b.add_argument("--no-warmup", action="store_true")
    b.add_argument("--json", type=Path, default=Path("bench.json"))
    b.add_argument("--csv", type=Path, default=Path("bench.csv"))
    return parser


def _result_record(args, table_name, config, loss_history, U, V, iterations) -> dict:
    # No timings: the result file is reproducible byte for byte.
    return {
        "mode": args.mode,
        "dataset": table_name,
        "config": {"dim": config.dim, "learning_rate": config.learning_rate,
                   "lambda_u": config.lambda_u, "mu_v": config.mu_v,
                   "max_iters": config.max_iters, "stop_threshold": config.stop_threshold,
                   "seed": config.seed, "payload_mode": config.payload_mode,
                   "convention": config.convention,
                   "key_bits": args.key_bits if args.mode == "encrypted" else None,
                   "exponent": args.exponent if args.mode == "encrypted" else None},
        "iterations": iterations,
        "loss_history": [float(x) for x in loss_history],
        "U": np.asarray(U).tolist(),
        "V": np.asarray(V).tolist(),
    }


def cmd_train(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    table, name = load_table(args, seed)
    config = mf.TrainConfig(dim=args.dim, learning_rate=args.lr, lambda_u=args.lambda_u,
                            mu_v=args.mu_v, max_iters=args.iters,
                            stop_threshold=args.stop_threshold, seed=seed,
                            payload_mode=args.payload, convention=args.convention)
    record = args.record_transcript is not None
    if record and args.mode != "plaintext":
        raise CliError("--record-transcript is available in plaintext mode only")
    metrics = None
    if args.mode == "centralized":
        res = mf.train_centralized(table, config)
        U, V, history, transcript = res.U, res.V, res.loss_history, None
        iterations = len(history) - 1
    else:
        res = run_federation(table, config, args.mode, transport=args.transport,
                             key_bits=args.key_bits, exponent=args.exponent,
                             record_transcript=record, client_vote=args.client_vote,
                             key_seed=seed)
        U, V, history, transcript = res.U, res.V, res.loss_history, res.transcript
        iterations = res.iterations
        metrics = {"setup_seconds": res.setup_seconds, "stop_reason": res.stop_reason,
                   "rounds": [vars(m) for m in res.rounds]}
    record_json = _result_record(args, name, config, history, U, V, iterations)
    args.out.write_text(json.dumps(record_json, sort_keys=True) + "\n")
    if transcript is not None:
        if args.embed_ground_truth:
            transcript.ground_truth = list(table.entries())
        write_transcript(transcript, args.record_transcript)
    if args.metrics and metrics is not None:
        args.metrics.write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"{args.mode}: {iterations} iteration(s), final loss {history[-1]:.6g}"
          if history else f"{args.mode}: {iterations} iteration(s)")
    return 0


def cmd_attack(args) -> int:
    lo_hi = parse_range(args.rating_range)
    transcript = read_transcript(args.transcript)
    result = leak.attack(transcript, args.user, args.round, rating_range=lo_hi)
    text = json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    status = "recovered" if result.success else "failed"
    err = result.max_abs_error
    print(f"user {args.user} round {args.round}: {status}, {len(result.ratings)} rating(s)"
          + (f", max abs error {err:.3g}" if err is not None else ""), file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    if not (args.data or args.synthetic or args.planted):
        args.standin = True
    table, name = load_table(args, seed)
    payloads = PAYLOADS if args.payload == "both" else (args.payload,)

    def progress(row):
        print(f"{row.payload_mode:>4} {row.n_items:>6} items  {row.seconds_per_iteration:9.2f}s"
              f"  client {row.client_seconds:8.2f}s  server {row.server_seconds:8.2f}s",
              file=sys.stderr)

    report = run_bench(table, parse_items(args.items), payloads, key_bits=args.key_bits,
                       dim=args.dim, seed=seed, exponent=args.exponent,
                       max_seconds=args.max_seconds, dataset=name,
                       warmup=not args.no_warmup, progress=progress)
    report.write_json(args.json)
    report.write_csv(args.csv)
    if len(report.series(mf.FULL)) >= 2:
        print(f"FullText linear fit R^2 = {report.linear_fit(mf.FULL)[2]:.4f}", file=sys.stderr)
    return 0


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        parser.error(str(exc))  # exits with status 2
    except (leak.AttackPreconditionError, BudgetExceeded, data.DataFormatError,
            OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"fedmf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
