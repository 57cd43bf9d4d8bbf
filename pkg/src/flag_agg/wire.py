"""Bit-exact message encoding.

Residues are packed little-endian at a fixed width with no padding between
entries: entry ``i`` occupies bits ``[i*w, (i+1)*w)`` of the payload, bit 0
being the least significant bit of byte 0. The final byte is zero-padded.

Header layouts (all little-endian):

    upload     round:u32 client:u32 buckets:u32 b:u8 clip:f64 seed_id:u64   (29 bytes)
    broadcast  round:u32 buckets:u32 b:u8 clip:f64 seed_id:u64              (25 bytes)
    share      round:u32 from:u32 to:u32                                    (12 bytes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

UPLOAD_HEADER = struct.Struct("<IIIBdQ")
BROADCAST_HEADER = struct.Struct("<IIBdQ")
SHARE_HEADER = struct.Struct("<III")


class WireError(ValueError):
    pass


def packed_size(count: int, width: int) -> int:
    return (count * width + 7) // 8


def pack_residues(values, width: int) -> bytes:
    values = np.asarray(values, dtype=np.int64).ravel()
    if values.size and (values.min() < 0 or values.max() >= 1 << width):
        raise WireError(f"value does not fit in {width} bits")
    as_bytes = values.astype("<u8").view(np.uint8).reshape(-1, 8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :width]
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_residues(data: bytes, count: int, width: int) -> np.ndarray:
    if len(data) != packed_size(count, width):
        raise WireError(f"payload is {len(data)} bytes, expected {packed_size(count, width)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[count * width:].any():
        raise WireError("non-zero padding bits")
    bits = bits[: count * width].reshape(count, width)
    full = np.zeros((count, 64), dtype=np.uint8)
    full[:, :width] = bits
    return np.packbits(full, axis=1, bitorder="little").view("<u8").ravel().astype(np.int64)


def pack_signed(values, width: int) -> bytes:
    """Two's-complement packing, used for plaintext level uploads."""
    values = np.asarray(values, dtype=np.int64)
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if values.size and (values.min() < lo or values.max() > hi):
        raise WireError(f"value does not fit in {width} signed bits")
    return pack_residues(values % (1 << width), width)


def unpack_signed(data: bytes, count: int, width: int) -> np.ndarray:
    raw = unpack_residues(data, count, width)
    return np.where(raw >= 1 << (width - 1), raw - (1 << width), raw)


@dataclass(frozen=True)
class UploadMessage:
    round: int
    client_id: int
    num_buckets: int
    b: int
    clip: float
    seed_id: int
    payload: bytes

    def encode(self) -> bytes:
        head = UPLOAD_HEADER.pack(self.round, self.client_id, self.num_buckets, self.b, self.clip, self.seed_id)
        return head + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "UploadMessage":
        if len(data) < UPLOAD_HEADER.size:
            raise WireError("truncated upload header")
        fields = UPLOAD_HEADER.unpack_from(data)
        return cls(*fields, payload=bytes(data[UPLOAD_HEADER.size:]))

    def ciphertexts(self, m: int, width: int) -> np.ndarray:
        return unpack_residues(self.payload, self.num_buckets * m, width).reshape(self.num_buckets, m)


@dataclass(frozen=True)
class BroadcastMessage:
    round: int
    num_buckets: int
    b: int
    clip: float
    seed_id: int
    payload: bytes

    def encode(self) -> bytes:
        head = BROADCAST_HEADER.pack(self.round, self.num_buckets, self.b, self.clip, self.seed_id)
        return head + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "BroadcastMessage":
        if len(data) < BROADCAST_HEADER.size:
            raise WireError("truncated broadcast header")
        fields = BROADCAST_HEADER.unpack_from(data)
        return cls(*fields, payload=bytes(data[BROADCAST_HEADER.size:]))

    def ciphertexts(self, m: int, width: int) -> np.ndarray:
        return unpack_residues(self.payload, self.num_buckets * m, width).reshape(self.num_buckets, m)


@dataclass(frozen=True)
class ShareMessage:
    round: int
    sender: int
    receiver: int
    payload: bytes

    def encode(self) -> bytes:
        return SHARE_HEADER.pack(self.round, self.sender, self.receiver) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "ShareMessage":
        if len(data) < SHARE_HEADER.size:
            raise WireError("truncated share header")
        fields = SHARE_HEADER.unpack_from(data)
        return cls(*fields, payload=bytes(data[SHARE_HEADER.size:]))


class Transport:
    """In-process message queue that tallies bytes per channel."""

    def __init__(self):
        self.bytes_by_channel: dict[str, int] = {}
        self.messages_by_channel: dict[str, int] = {}
        self._queues: dict[tuple[str, object], list[bytes]] = {}

    def send(self, channel: str, to, data: bytes) -> None:
        self.bytes_by_channel[channel] = self.bytes_by_channel.get(channel, 0) + len(data)
        self.messages_by_channel[channel] = self.messages_by_channel.get(channel, 0) + 1
        self._queues.setdefault((channel, to), []).append(bytes(data))

    def receive(self, channel: str, to) -> list[bytes]:
        return self._queues.pop((channel, to), [])

    def reset_counters(self) -> None:
        self.bytes_by_channel.clear()
        self.messages_by_channel.clear()
