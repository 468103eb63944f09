"""Timing harness: one encrypted iteration per (item count, payload mode)."""
from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fedmf import mf
from fedmf.arith import HAVE_GMPY2
from fedmf.data import TABLE1_RATINGS, TABLE1_SECONDS, select_top_items
from fedmf.protocol.federation import run_federation
from fedmf.protocol.parties import ENCRYPTED

logger = logging.getLogger(__name__)

LINK_BITS_PER_SECOND = 1e9
DEFAULT_ITEMS = (40, 80, 160, 320)
PAYLOADS = (mf.PART, mf.FULL)


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class BenchRow:
    mode: str
    payload_mode: str
    n_items: int
    n_users: int
    n_ratings: int
    seconds_per_iteration: float
    client_seconds: float
    server_seconds: float
    transfer_seconds: float
    bytes_per_iteration: int

    @property
    def modeled_transfer_seconds(self) -> float:
        """Transfer time of this iteration's bytes over a 1 Gb/s link."""
        return self.bytes_per_iteration * 8 / LINK_BITS_PER_SECOND

    @property
    def server_share(self) -> float:
        busy = self.client_seconds + self.server_seconds
        return self.server_seconds / busy if busy else 0.0


@dataclass
class BenchReport:
    rows: list[BenchRow]
    key_bits: int
    dim: int
    seed: int
    exponent: int
    dataset: str
    warmup_seconds: float = 0.0
    environment: dict = field(default_factory=dict)

    def row(self, payload_mode: str, n_items: int) -> BenchRow:
        for r in self.rows:
            if r.payload_mode == payload_mode and r.n_items == n_items:
                return r
        raise KeyError((payload_mode, n_items))

    def series(self, payload_mode: str) -> list[BenchRow]:
        return sorted((r for r in self.rows if r.payload_mode == payload_mode),
                      key=lambda r: r.n_items)

    def linear_fit(self, payload_mode: str = mf.FULL) -> tuple[float, float, float]:
        """Least-squares ``seconds = a * items + b``; returns ``(a, b, r2)``."""
        rows = self.series(payload_mode)
        x = np.array([r.n_items for r in rows], dtype=np.float64)
        y = np.array([r.seconds_per_iteration for r in rows])
        return linear_fit(x, y)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "rows"}
        out["rows"] = []
        for r in self.rows:
            d = asdict(r)
            d["modeled_transfer_seconds"] = r.modeled_transfer_seconds
            d["server_share"] = r.server_share
            out["rows"].append(d)
        for pm in {r.payload_mode for r in self.rows}:
            if len(self.series(pm)) >= 2:
                a, b, r2 = self.linear_fit(pm)
                out.setdefault("fits", {})[pm] = {"slope": a, "intercept": b, "r2": r2}
        return out

    def table_rows(self) -> list[dict]:
        """One record per item count, with the reference timing columns alongside."""
        out = []
        for k in sorted({r.n_items for r in self.rows}):
            rec = {"items": k}
            part = next((r for r in self.rows if r.n_items == k and r.payload_mode == mf.PART), None)
            full = next((r for r in self.rows if r.n_items == k and r.payload_mode == mf.FULL), None)
            rec["ratings"] = (part or full).n_ratings
            for name, r in (("parttext", part), ("fulltext", full)):
                rec[f"{name}_seconds"] = r.seconds_per_iteration if r else ""
                rec[f"{name}_client_seconds"] = r.client_seconds if r else ""
                rec[f"{name}_server_seconds"] = r.server_seconds if r else ""
                rec[f"{name}_transfer_seconds"] = r.transfer_seconds if r else ""
                rec[f"{name}_modeled_1gbps_seconds"] = r.modeled_transfer_seconds if r else ""
                rec[f"{name}_bytes"] = r.bytes_per_iteration if r else ""
            ref = TABLE1_SECONDS.get(k)
            rec["reference_ratings"] = TABLE1_RATINGS.get(k, "")
            rec["reference_parttext_seconds"] = ref[0] if ref else ""
            rec["reference_fulltext_seconds"] = ref[1] if ref else ""
            out.append(rec)
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        records = self.table_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(records[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(records)


def linear_fit(x, y) -> tuple[float, float, float]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("a fit needs at least two points")
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot else 1.0
    return float(a), float(b), r2


def _cells(table: mf.RatingTable, payload_mode: str, dim: int) -> int:
    # upload cells per iteration; downloads scale with n_users * n_items * dim
    up = table.n_users * table.n_items if payload_mode == mf.FULL else len(table)
    return (up + table.n_users * table.n_items) * dim


def _time_one(table, payload_mode, dim, key_bits, exponent, seed) -> BenchRow:
    config = mf.TrainConfig(dim=dim, max_iters=1, stop_threshold=0.0, seed=seed,
                            payload_mode=payload_mode)
    res = run_federation(table, config, ENCRYPTED, key_bits=key_bits, exponent=exponent,
                         track_loss=False, key_seed=seed)
    m = res.rounds[0]
    return BenchRow(ENCRYPTED, payload_mode, table.n_items, table.n_users, len(table),
                    m.total_seconds, m.client_seconds, m.server_seconds, m.transfer_seconds,
                    m.bytes_total)


def run_bench(table: mf.RatingTable, items=DEFAULT_ITEMS, payloads=PAYLOADS, key_bits: int = 256,
              dim: int = 10, seed: int = 0, exponent: int = -40,
              max_seconds: float | None = None, dataset: str = "", warmup: bool = True,
              progress=None) -> BenchReport:
    """Time one encrypted iteration for every item count and payload mode.

    A single warm-up iteration on the smallest configuration runs first and
    is excluded. It also calibrates a per-cell cost used to refuse any
    configuration whose predicted time exceeds ``max_seconds``.
    """
    items = sorted(set(int(k) for k in items))
    if not items:
        raise ValueError("no item counts given")
    tables = {k: select_top_items(table, k) for k in items}
    warm = 0.0
    per_cell = None
    if warmup:
        t0 = time.perf_counter()
        first = tables[items[0]]
        _time_one(first, payloads[0], dim, key_bits, exponent, seed)
        warm = time.perf_counter() - t0
        per_cell = warm / max(_cells(first, payloads[0], dim), 1)
    rows = []
    for k in items:
        for pm in payloads:
            tab = tables[k]
            if max_seconds is not None and per_cell is not None:
                predicted = per_cell * _cells(tab, pm, dim)
                if predicted > max_seconds:
                    raise BudgetExceeded(f"{pm} at {k} items predicted {predicted:.0f}s "
                                         f"> --max-seconds {max_seconds:g}")
            row = _time_one(tab, pm, dim, key_bits, exponent, seed)
            if max_seconds is not None and row.seconds_per_iteration > max_seconds:
                raise BudgetExceeded(f"{pm} at {k} items took {row.seconds_per_iteration:.0f}s "
                                     f"> --max-seconds {max_seconds:g}")
            logger.info("%s %d items: %.2fs", pm, k, row.seconds_per_iteration)
            if progress:
                progress(row)
            rows.append(row)
    env = {"python": platform.python_version(), "gmpy2": HAVE_GMPY2,
           "machine": platform.machine()}
    return BenchReport(rows, key_bits, dim, seed, exponent, dataset, warm, env)
