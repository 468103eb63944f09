"""Server-side log of a federation: item-profile snapshots and user uploads.

On disk a transcript is a sequence of length-prefixed JSON records: one
header (mode, config echo, sizes, optional ground truth), one record per
round, and a final record with the item profiles after the last round.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from fedmf.protocol.wire import FrameError, dump_record, float_str, iter_frames, load_record

PLAINTEXT = "plaintext"
ENCRYPTED = "encrypted"


@dataclass
class TranscriptRound:
    snapshot: np.ndarray | None
    payloads: list


@dataclass
class Transcript:
    config: dict[str, Any]
    n_users: int
    n_items: int
    rounds: list[TranscriptRound] = field(default_factory=list)
    final: np.ndarray | None = None
    mode: str = PLAINTEXT
    ground_truth: list[tuple[int, int, float]] | None = None

    @classmethod
    def for_config(cls, config, n_users: int, n_items: int, mode: str = PLAINTEXT):
        echo = {
            "learning_rate": config.learning_rate,
            "lambda_u": config.lambda_u,
            "mu_v": config.mu_v,
            "dim": config.dim,
            "convention": config.convention,
            "payload_mode": config.payload_mode,
        }
        return cls(echo, n_users, n_items, mode=mode)

    def __len__(self) -> int:
        return len(self.rounds)

    def snapshot_before(self, t: int) -> np.ndarray:
        return self.rounds[t].snapshot

    def snapshot_after(self, t: int) -> np.ndarray:
        if t + 1 < len(self.rounds):
            return self.rounds[t + 1].snapshot
        if t == len(self.rounds) - 1 and self.final is not None:
            return self.final
        raise IndexError(f"no snapshot after round {t}")

    def payload(self, t: int, user_id: int):
        for p in self.rounds[t].payloads:
            if p.user_id == user_id:
                return p
        raise KeyError(f"user {user_id} uploaded nothing in round {t}")

    def server_scale(self) -> float:
        if self.config.get("convention") == "attack":
            return -2.0 * self.config["learning_rate"]
        return 1.0

    def view(self, t: int, user_id: int) -> np.ndarray:
        """Item profiles as downloaded by ``user_id`` in round ``t``.

        Uploads are applied in user order, so this is the round snapshot with
        the payloads of all earlier users replayed onto it.
        """
        from fedmf.mf import server_apply

        V = self.snapshot_before(t).copy()
        scale = self.server_scale()
        for p in self.rounds[t].payloads:
            if p.user_id == user_id:
                return V
            server_apply(V, p, scale=scale, inplace=True)
        raise KeyError(f"user {user_id} uploaded nothing in round {t}")

    def replay(self, t: int) -> np.ndarray:
        """Snapshot of round ``t`` with every round-``t`` upload applied."""
        from fedmf.mf import server_apply

        V = self.snapshot_before(t).copy()
        for p in self.rounds[t].payloads:
            server_apply(V, p, scale=self.server_scale(), inplace=True)
        return V


def _matrix_strings(a: np.ndarray) -> list[str]:
    return [float_str(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def _matrix_from(strings: list[str], shape) -> np.ndarray:
    return np.array([float(s) for s in strings], dtype=np.float64).reshape(shape)


def dump_transcript(transcript: Transcript) -> bytes:
    header = {
        "kind": "header",
        "mode": transcript.mode,
        "config": transcript.config,
        "n_users": transcript.n_users,
        "n_items": transcript.n_items,
        "ground_truth": ([[u, i, float_str(r)] for u, i, r in transcript.ground_truth]
                         if transcript.ground_truth is not None else None),
    }
    out = [dump_record(header)]
    for t, rnd in enumerate(transcript.rounds):
        if transcript.mode == ENCRYPTED:
            out.append(dump_record({"kind": "round", "t": t, "payloads": rnd.payloads}))
            continue
        out.append(dump_record({
            "kind": "round",
            "t": t,
            "snapshot": _matrix_strings(rnd.snapshot),
            "payloads": [{"user": p.user_id, "mode": p.mode, "items": p.items.tolist(),
                          "values": _matrix_strings(p.vectors)} for p in rnd.payloads],
        }))
    if transcript.final is not None:
        out.append(dump_record({"kind": "final", "snapshot": _matrix_strings(transcript.final)}))
    return b"".join(out)


def load_transcript(data: bytes) -> Transcript:
    from fedmf.mf import GradientPayload

    frames = iter_frames(data)
    try:
        header = load_record(next(frames))
    except StopIteration:
        raise FrameError("empty transcript") from None
    if header.get("kind") != "header":
        raise FrameError("transcript must start with a header record")
    dim = header["config"]["dim"]
    m = header["n_items"]
    gt = header.get("ground_truth")
    transcript = Transcript(
        header["config"], header["n_users"], m, mode=header["mode"],
        ground_truth=[(int(u), int(i), float(r)) for u, i, r in gt] if gt is not None else None,
    )
    for frame in frames:
        rec = load_record(frame)
        if rec["kind"] == "final":
            transcript.final = _matrix_from(rec["snapshot"], (m, dim))
        elif transcript.mode == ENCRYPTED:
            transcript.rounds.append(TranscriptRound(None, rec["payloads"]))
        else:
            payloads = [GradientPayload(p["user"], p["mode"], p["items"],
                                        _matrix_from(p["values"], (len(p["items"]), dim)))
                        for p in rec["payloads"]]
            transcript.rounds.append(TranscriptRound(_matrix_from(rec["snapshot"], (m, dim)), payloads))
    return transcript


def write_transcript(transcript: Transcript, path: str | Path) -> None:
    Path(path).write_bytes(dump_transcript(transcript))


def read_transcript(path: str | Path) -> Transcript:
    return load_transcript(Path(path).read_bytes())
