"""Server and client state machines for plaintext and encrypted federation.

The server only ever handles what arrives over its channel: the public key
and gradient uploads. In encrypted mode it keeps the item profiles as a grid
of ciphertexts sharing one exponent and updates them with
``C_V <- C_V * C_G**(n-1)``, which decrypts to ``V - G``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from fedmf import mf
from fedmf import paillier as he
from fedmf.protocol.wire import (DONE, GRADIENT, PROFILES, PUBKEY, SECKEY, SERVER_ID, FrameError,
                                 Message, deserialize, float_str, serialize)

PLAINTEXT = "plaintext"
ENCRYPTED = "encrypted"
MODES = (PLAINTEXT, ENCRYPTED)


class ProtocolError(RuntimeError):
    pass


def _hex_width(pk: he.PaillierPublicKey) -> int:
    return (int(pk.n_squared).bit_length() + 3) // 4


def cipher_hex(c: he.Ciphertext, width: int) -> str:
    # Fixed width so frame sizes do not depend on the ciphertext value.
    return format(c.value, f"0{width}x")


@dataclass
class EncryptedItemProfiles:
    rows: int
    dim: int
    exponent: int
    cells: list  # row-major Ciphertext grid

    def __post_init__(self):
        if len(self.cells) != self.rows * self.dim:
            raise ValueError("cell count must equal rows * dim")
        if any(c.exponent != self.exponent for c in self.cells):
            raise he.EncodingError("all cells must share one exponent")

    def cell(self, j: int, k: int) -> he.Ciphertext:
        return self.cells[j * self.dim + k]


@dataclass
class ServerState:
    mode: str
    n_items: int
    dim: int
    pk: he.PaillierPublicKey | None = None
    V: np.ndarray | None = None
    C_V: EncryptedItemProfiles | None = None
    round: int = 0
    scale: float = 1.0
    timings: dict[str, float] = field(default_factory=lambda: {"prepare": 0.0, "apply": 0.0})
    _hex: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class ClientState:
    user_id: int
    u: np.ndarray
    ratings: mf.UserRatings
    config: mf.TrainConfig
    n_items: int
    mode: str = PLAINTEXT
    pk: he.PaillierPublicKey | None = None
    sk: he.PaillierSecretKey | None = None
    exponent: int = he.DEFAULT_EXPONENT
    vote: bool = False
    round: int = 0
    compute_seconds: float = 0.0
    last_payload: mf.GradientPayload | None = None

    @property
    def payload_mode(self) -> str:
        return self.config.payload_mode


def pubkey_message(pk: he.PaillierPublicKey, sender: int) -> Message:
    return Message(PUBKEY, 0, sender, {"n": format(pk.n, "x")})


def seckey_message(sk: he.PaillierSecretKey, sender: int) -> Message:
    return Message(SECKEY, 0, sender, {"p": format(sk.p, "x"), "q": format(sk.q, "x")})


def read_pubkey(msg: Message) -> he.PaillierPublicKey:
    if msg.type != PUBKEY:
        raise ProtocolError(f"expected PUBKEY, got {msg.type}")
    return he.PaillierPublicKey(int(msg.body["n"], 16))


def server_init(m: int, d: int, pk: he.PaillierPublicKey | None, mode: str,
                config: mf.TrainConfig, exponent: int = he.DEFAULT_EXPONENT) -> ServerState:
    """Initialise the item profiles; encrypted mode keeps only ciphertexts."""
    if mode == ENCRYPTED and pk is None:
        raise ValueError("encrypted mode needs a public key")
    state = ServerState(mode, m, d, pk=pk, scale=mf.server_scale(config))
    V = mf.init_item_profiles(m, config)
    if mode == PLAINTEXT:
        state.V = V
        return state
    cells = [he.encrypt_encoded(pk, he.encode(float(x), exponent, pk)) for x in V.ravel()]
    state.C_V = EncryptedItemProfiles(m, d, exponent, cells)
    state._hex = [None] * len(cells)
    return state


def profiles_message(state: ServerState) -> Message:
    t0 = time.perf_counter()
    if state.mode == PLAINTEXT:
        body = {"mode": PLAINTEXT, "rows": state.n_items, "dim": state.dim,
                "values": [float_str(x) for x in state.V.ravel()]}
    else:
        width = _hex_width(state.pk)
        cache = state._hex
        for idx, h in enumerate(cache):
            if h is None:
                cache[idx] = cipher_hex(state.C_V.cells[idx], width)
        body = {"mode": ENCRYPTED, "rows": state.n_items, "dim": state.dim,
                "exponent": state.C_V.exponent, "cells": list(cache)}
    msg = Message(PROFILES, state.round, SERVER_ID, body)
    state.timings["prepare"] += time.perf_counter() - t0
    return msg


def _decode_profiles(state: ClientState, msg: Message) -> np.ndarray:
    body = msg.body
    m, d = body["rows"], body["dim"]
    if m != state.n_items or d != state.config.dim:
        raise ProtocolError("profile shape does not match the client configuration")
    if body["mode"] != state.mode:
        raise ProtocolError(f"client in {state.mode} mode received {body['mode']} profiles")
    if state.mode == PLAINTEXT:
        return np.array([float(s) for s in body["values"]], dtype=np.float64).reshape(m, d)
    # Only rated rows are needed for the local step.
    V = np.zeros((m, d))
    cells, e, sk = body["cells"], body["exponent"], state.sk
    for j in state.ratings.items.tolist():
        for k in range(d):
            c = he.ciphertext_from_hex(cells[j * d + k], e)
            V[j, k] = he.decrypt_real(sk, c)
    return V


def client_round(state: ClientState, msg: Message) -> tuple[ClientState, Message]:
    """Download profiles, take the local step and build the upload."""
    if msg.type != PROFILES:
        raise ProtocolError(f"expected PROFILES, got {msg.type}")
    if msg.round != state.round:
        raise ProtocolError(f"user {state.user_id}: round {msg.round}, expected {state.round}")
    if state.mode == ENCRYPTED and state.sk is None:
        raise ProtocolError(f"user {state.user_id} has no secret key")
    V = _decode_profiles(state, msg)
    state.u, payload = mf.local_update(state.u, V, state.ratings, state.config,
                                       user_id=state.user_id)
    state.last_payload = payload
    body = {"payload": payload.mode, "dim": state.config.dim, "items": payload.items.tolist()}
    if state.mode == PLAINTEXT:
        body["values"] = [float_str(x) for x in payload.vectors.ravel()]
    else:
        sk, e = state.sk, state.exponent
        width = _hex_width(sk.public_key)
        body["exponent"] = e
        body["cells"] = [cipher_hex(he.encrypt_real(sk, float(x), e), width)
                         for x in payload.vectors.ravel()]
    if state.vote:
        body["vote"] = payload.max_abs() < state.config.stop_threshold
    state.round += 1
    return state, Message(GRADIENT, msg.round, state.user_id, body)


def payload_from_message(msg: Message) -> mf.GradientPayload:
    """Plaintext upload as a :class:`fedmf.mf.GradientPayload`."""
    body = msg.body
    items = body["items"]
    values = np.array([float(s) for s in body["values"]], dtype=np.float64)
    return mf.GradientPayload(msg.sender, body["payload"], items,
                              values.reshape(len(items), body["dim"]))


def server_apply_plain(state: ServerState, msg: Message) -> mf.GradientPayload:
    payload = payload_from_message(msg)
    mf.server_apply(state.V, payload, scale=state.scale, inplace=True)
    return payload


def server_apply_encrypted(state: ServerState, msg: Message) -> ServerState:
    """Subtract an encrypted upload cell by cell."""
    if msg.type != GRADIENT:
        raise ProtocolError(f"expected GRADIENT, got {msg.type}")
    if msg.round != state.round:
        raise ProtocolError(f"upload for round {msg.round} during round {state.round}")
    body, grid, pk = msg.body, state.C_V, state.pk
    if body["exponent"] != grid.exponent:
        raise he.EncodingError(f"upload exponent {body['exponent']} != {grid.exponent}")
    d, cells, neg_one = grid.dim, body["cells"], pk.n - 1
    items = body["items"]
    if len(cells) != len(items) * d:
        raise FrameError("cell count does not match items * dim")
    for row, j in enumerate(items):
        if not 0 <= j < grid.rows:
            raise IndexError(f"item {j} out of range")
        for k in range(d):
            idx = j * d + k
            g = he.ciphertext_from_hex(cells[row * d + k], grid.exponent)
            grid.cells[idx] = he.add_cipher(pk, grid.cells[idx], he.mul_plain(pk, g, neg_one))
            state._hex[idx] = None
    return state


def server_receive(state: ServerState, msg: Message):
    """Apply one upload; returns the plaintext payload in plaintext mode."""
    t0 = time.perf_counter()
    try:
        if msg.type != GRADIENT:
            raise ProtocolError(f"expected GRADIENT, got {msg.type}")
        if state.mode == PLAINTEXT:
            if msg.round != state.round:
                raise ProtocolError(f"upload for round {msg.round} during round {state.round}")
            return server_apply_plain(state, msg)
        server_apply_encrypted(state, msg)
        return None
    finally:
        state.timings["apply"] += time.perf_counter() - t0


class Client:
    """Frame-level wrapper around :class:`ClientState` used by transports."""

    def __init__(self, state: ClientState):
        self.state = state
        self.done = False

    @property
    def user_id(self) -> int:
        return self.state.user_id

    def generate_keys(self, key_bits: int, seed: int | None = None):
        """Key-holder duty: create the key pair and the two key messages."""
        pk, sk = he.keygen(key_bits, seed=seed)
        self.state.pk, self.state.sk = pk, sk
        return serialize(pubkey_message(pk, self.user_id)), serialize(seckey_message(sk, self.user_id))

    def handle(self, frame: bytes) -> bytes | None:
        t0 = time.perf_counter()
        try:
            msg = deserialize(frame)
            if msg.type == PUBKEY:
                self.state.pk = read_pubkey(msg)
                return None
            if msg.type == SECKEY:
                if self.state.pk is None:
                    raise ProtocolError("secret key arrived before the public key")
                self.state.sk = he.PaillierSecretKey(int(msg.body["p"], 16),
                                                     int(msg.body["q"], 16), self.state.pk)
                return None
            if msg.type == DONE:
                self.done = True
                return None
            if msg.type == PROFILES:
                _, reply = client_round(self.state, msg)
                return serialize(reply)
            raise ProtocolError(f"client cannot handle {msg.type}")
        finally:
            self.state.compute_seconds += time.perf_counter() - t0
