"""Length-prefixed JSON frames.

A frame is a 4-byte big-endian unsigned length followed by that many bytes of
UTF-8 JSON. Protocol messages are JSON objects with the fields ``type``,
``round``, ``sender`` and ``body``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Iterator

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME_SIZE = 2**32 - 1

PUBKEY = "PUBKEY"
SECKEY = "SECKEY"
PROFILES = "PROFILES"
GRADIENT = "GRADIENT"
DONE = "DONE"
MESSAGE_TYPES = frozenset({PUBKEY, SECKEY, PROFILES, GRADIENT, DONE})

SERVER_ID = -1


class FrameError(ValueError):
    """Malformed, truncated or unknown frame."""


@dataclass(frozen=True)
class Message:
    type: str
    round: int
    sender: int
    body: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in MESSAGE_TYPES:
            raise FrameError(f"unknown message type {self.type!r}")


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME_SIZE:
        raise FrameError("frame too large")
    return HEADER.pack(len(payload)) + payload


def decode_frame(frame: bytes) -> bytes:
    """Strip the length header, rejecting short or over-long input."""
    if len(frame) < HEADER_SIZE:
        raise FrameError("truncated frame header")
    (length,) = HEADER.unpack_from(frame)
    if len(frame) - HEADER_SIZE != length:
        raise FrameError(f"frame length {length} does not match {len(frame) - HEADER_SIZE} bytes")
    return frame[HEADER_SIZE:]


def dump_record(obj: Any) -> bytes:
    text = json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False)
    return encode_frame(text.encode("utf-8"))


def load_record(frame: bytes) -> Any:
    try:
        return json.loads(decode_frame(frame).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"invalid JSON payload: {exc}") from None


def serialize(msg: Message) -> bytes:
    return dump_record({"type": msg.type, "round": msg.round,
                        "sender": msg.sender, "body": msg.body})


def deserialize(frame: bytes) -> Message:
    obj = load_record(frame)
    if not isinstance(obj, dict) or set(obj) != {"type", "round", "sender", "body"}:
        raise FrameError("message must have exactly type, round, sender and body")
    if any(not isinstance(obj[k], int) or isinstance(obj[k], bool) for k in ("round", "sender")):
        raise FrameError("round and sender must be integers")
    if not isinstance(obj["body"], dict):
        raise FrameError("body must be an object")
    return Message(obj["type"], obj["round"], obj["sender"], obj["body"])


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one frame from a stream; ``None`` at a clean end of stream."""
    header = _read_exact(stream, HEADER_SIZE, allow_eof=True)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    return header + _read_exact(stream, length)


def iter_frames(data: bytes) -> Iterator[bytes]:
    stream = io.BytesIO(data)
    while (frame := read_frame(stream)) is not None:
        yield frame


def _read_exact(stream: BinaryIO, size: int, allow_eof: bool = False) -> bytes | None:
    chunks, remaining = [], size
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            if allow_eof and remaining == size:
                return None
            raise FrameError("stream ended inside a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def float_str(x: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))
