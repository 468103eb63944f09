"""End-to-end federation driver: key setup, synchronous rounds, metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from fedmf import mf
from fedmf import paillier as he
from fedmf.protocol import parties
from fedmf.protocol.parties import ENCRYPTED, PLAINTEXT, Client, ClientState, ServerState
from fedmf.protocol.transport import Transport, make_transport
from fedmf.protocol.wire import DONE, SERVER_ID, Message, deserialize, serialize
from fedmf.transcript import Transcript, TranscriptRound

logger = logging.getLogger(__name__)

KEY_HOLDER = 0


@dataclass
class RoundMetrics:
    round: int
    client_seconds: float
    server_seconds: float
    transfer_seconds: float
    total_seconds: float
    bytes_down: int
    bytes_up: int

    @property
    def bytes_total(self) -> int:
        return self.bytes_down + self.bytes_up


@dataclass
class FederationResult:
    V: np.ndarray
    U: np.ndarray
    loss_history: list[float]
    rounds: list[RoundMetrics] = field(default_factory=list)
    transcript: Transcript | None = None
    setup_seconds: float = 0.0
    stop_reason: str = "max_iters"

    @property
    def iterations(self) -> int:
        return len(self.rounds)


def distribute_keys(clients: list[Client], server: ServerState, key_bits: int,
                    transport: Transport, seed: int | None = None) -> None:
    """The key holder generates keys; pk goes to everyone, sk to clients only."""
    if not clients:
        raise ValueError("key distribution needs at least one client")
    holder = clients[KEY_HOLDER]
    pub_frame, sec_frame = holder.generate_keys(key_bits, seed=seed)
    received = transport.upload(holder.user_id, pub_frame)
    server.pk = parties.read_pubkey(deserialize(received))
    for c in clients:
        if c is holder:
            continue
        transport.peer_send(holder.user_id, c.user_id, pub_frame)
        transport.peer_send(holder.user_id, c.user_id, sec_frame)


def _make_clients(ratings: mf.RatingTable, config: mf.TrainConfig, mode: str,
                  exponent: int, vote: bool) -> list[Client]:
    return [Client(ClientState(i, mf.init_user_profile(i, config), ratings.user(i), config,
                               ratings.n_items, mode=mode, exponent=exponent, vote=vote))
            for i in range(ratings.n_users)]


def decrypt_profiles(server: ServerState, sk: he.PaillierSecretKey) -> np.ndarray:
    """Key-holder view of the encrypted item profiles (evaluation only)."""
    grid = server.C_V
    vals = [he.decrypt_real(sk, c) for c in grid.cells]
    return np.array(vals, dtype=np.float64).reshape(grid.rows, grid.dim)


def run_federation(ratings: mf.RatingTable, config: mf.TrainConfig, mode: str = PLAINTEXT,
                   payload_mode: str | None = None, transport: str | Transport = "memory",
                   key_bits: int = 256, exponent: int = he.DEFAULT_EXPONENT,
                   record_transcript: bool = False, client_vote: bool = False,
                   track_loss: bool = True, key_seed: int | None = None) -> FederationResult:
    """Run the protocol to completion.

    Rounds are synchronous: in each round every client, in ascending id,
    downloads the latest profiles and uploads one payload which the server
    applies before serving the next client. Plaintext mode stops on the
    payload-norm criterion like :func:`fedmf.mf.train_distributed_plaintext`;
    encrypted mode runs ``max_iters`` rounds unless ``client_vote`` lets
    clients report convergence.

    The loss history is evaluation output: in encrypted mode it is computed
    from the key holder's decryption of the profiles, never by the server.
    """
    if mode not in parties.MODES:
        raise ValueError(f"mode must be one of {parties.MODES}")
    if payload_mode is not None and payload_mode != config.payload_mode:
        config = mf.TrainConfig(**{**config.__dict__, "payload_mode": payload_mode})
    if mode == ENCRYPTED:
        if config.convention != mf.ALGORITHM1:
            raise ValueError("encrypted mode supports the Algorithm-1 convention only")
        if ratings.n_users * max(config.max_iters, 1) >= 2 ** he.HEADROOM_BITS:
            raise ValueError("users x iterations exceeds the encoding's addition headroom")
    if record_transcript and mode != PLAINTEXT:
        raise ValueError("transcripts are recorded in plaintext mode only")
    if isinstance(transport, str):
        transport = make_transport(transport)

    t_setup = time.perf_counter()
    clients = _make_clients(ratings, config, mode, exponent, client_vote)
    transport.attach(clients)
    finished = False
    try:
        pk = None
        if mode == ENCRYPTED:
            probe = ServerState(mode, ratings.n_items, config.dim)
            distribute_keys(clients, probe, key_bits, transport, seed=key_seed)
            pk = probe.pk
        server = parties.server_init(ratings.n_items, config.dim, pk, mode, config, exponent)
        setup = time.perf_counter() - t_setup
        result = _run_rounds(ratings, config, mode, clients, server, transport,
                             record_transcript, client_vote, track_loss, setup)
        finished = True
        return result
    finally:
        for c in clients if not finished else ():
            if not c.done:
                try:
                    transport.notify(c.user_id, serialize(Message(DONE, 0, SERVER_ID, {})))
                except Exception:  # connection already gone
                    logger.debug("DONE not delivered to client %d", c.user_id)
        transport.close()


def _current_V(server: ServerState, clients: list[Client]) -> np.ndarray:
    if server.mode == PLAINTEXT:
        return server.V
    return decrypt_profiles(server, clients[KEY_HOLDER].state.sk)


def _current_U(clients: list[Client], dim: int) -> np.ndarray:
    return np.array([c.state.u for c in clients]).reshape(len(clients), dim)


def _run_rounds(ratings, config, mode, clients, server, transport, record_transcript,
                client_vote, track_loss, setup) -> FederationResult:
    def evaluate():
        return mf.loss(_current_U(clients, config.dim), _current_V(server, clients), ratings,
                       config.lambda_u, config.mu_v)

    history = [evaluate()] if track_loss and len(ratings) else []
    transcript = (Transcript.for_config(config, ratings.n_users, ratings.n_items)
                  if record_transcript else None)
    result = FederationResult(None, None, history, transcript=transcript, setup_seconds=setup)
    if ratings.n_items == 0:
        result.stop_reason = "no_items"
    else:
        for t in range(config.max_iters):
            stop = _one_round(t, config, clients, server, transport, result)
            if not (np.all(np.isfinite(_current_U(clients, config.dim)))):
                raise mf.DivergenceError(t, "user profiles")
            if mode == PLAINTEXT and not np.all(np.isfinite(server.V)):
                raise mf.DivergenceError(t, "item profiles")
            if track_loss:
                history.append(evaluate())
            if stop:
                result.stop_reason = "converged"
                break
    done = serialize(Message(DONE, server.round, SERVER_ID, {}))
    for c in clients:
        transport.notify(c.user_id, done)
    result.V = np.array(_current_V(server, clients), copy=True)
    result.U = _current_U(clients, config.dim)
    if transcript is not None:
        transcript.final = result.V.copy()
    return result


def _one_round(t, config, clients, server, transport, result) -> bool:
    t_round = time.perf_counter()
    client_before = [c.state.compute_seconds for c in clients]
    server_before = sum(server.timings.values())
    down0, up0 = transport.bytes_down, transport.bytes_up
    snapshot = server.V.copy() if result.transcript is not None else None
    payloads, votes, max_step = [], [], 0.0
    try:
        for c in clients:
            frame = serialize(parties.profiles_message(server))
            reply = transport.exchange(c.user_id, frame)
            t0 = time.perf_counter()
            msg = deserialize(reply)
            server.timings["apply"] += time.perf_counter() - t0
            if msg.sender != c.user_id:
                raise parties.ProtocolError(f"reply from {msg.sender} on user {c.user_id}'s channel")
            payload = parties.server_receive(server, msg)
            if payload is not None:
                payloads.append(payload)
                max_step = max(max_step, payload.max_abs())
            if "vote" in msg.body:
                votes.append(bool(msg.body["vote"]))
    except Exception as exc:
        raise parties.ProtocolError(f"round {t}: {exc}") from exc
    server.round += 1
    if result.transcript is not None:
        result.transcript.rounds.append(TranscriptRound(snapshot, payloads))
    total = time.perf_counter() - t_round
    client_s = sum(c.state.compute_seconds - b for c, b in zip(clients, client_before))
    server_s = sum(server.timings.values()) - server_before
    result.rounds.append(RoundMetrics(
        t, client_s, server_s, max(total - client_s - server_s, 0.0), total,
        transport.bytes_down - down0, transport.bytes_up - up0))
    if server.mode == PLAINTEXT:
        return max_step < config.stop_threshold
    return bool(votes) and len(votes) == len(clients) and all(votes)
