"""Agreement on the sum of client secrets via N-of-N additive sharing.

Every client splits its secret into ``N`` additive shares mod ``q`` and sends
share ``j`` to client ``j``. Each client adds the shares it received into a
partial sum and publishes it to the other clients; the partial sums add up to
``s_sum``. No party other than client ``i`` ever sees ``s^(i)`` in the clear,
and the server takes no part.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lwe import residue_bits
from .wire import ShareMessage, Transport, pack_residues, unpack_residues

SHARE_CHANNEL = "key_share"
PARTIAL_CHANNEL = "key_partial"


@dataclass(frozen=True)
class KeyShare:
    from_client: int
    to_client: int
    share: np.ndarray


@dataclass
class KeySumTranscript:
    round: int
    shares: list[KeyShare] = field(default_factory=list)
    partial_sums: list[np.ndarray] = field(default_factory=list)
    s_sum: np.ndarray | None = None


def split_additive(s, N: int, rng: np.random.Generator, q: int) -> list[KeyShare]:
    if N < 2:
        raise ValueError(f"need at least 2 shares, got N={N}")
    s = np.asarray(s, dtype=np.int64)
    shares = [rng.integers(0, q, size=s.shape, dtype=np.int64) for _ in range(N - 1)]
    last = s.copy()
    for share in shares:
        last = (last - share) % q
    shares.append(last)
    return [KeyShare(from_client=-1, to_client=j, share=sh) for j, sh in enumerate(shares)]


def run_key_sum(keys, rngs, q: int, round: int = 0, transport: Transport | None = None) -> KeySumTranscript:
    """Run one round of key-sum agreement among ``len(keys)`` clients.

    Shares and partial sums travel as encoded messages through ``transport``
    so their bytes are tallied on the key channels.
    """
    N = len(keys)
    if N < 2:
        raise ValueError(f"key agreement needs at least 2 clients, got {N}")
    if len(rngs) != N:
        raise ValueError("one rng stream per client is required")
    transport = transport if transport is not None else Transport()
    n = len(keys[0])
    width = residue_bits(q)
    transcript = KeySumTranscript(round=round)

    for i, (key, rng) in enumerate(zip(keys, rngs)):
        for share in split_additive(key, N, rng, q):
            msg = ShareMessage(round, i, share.to_client, pack_residues(share.share, width))
            transport.send(SHARE_CHANNEL, share.to_client, msg.encode())
            transcript.shares.append(KeyShare(i, share.to_client, share.share))

    for j in range(N):
        partial = np.zeros(n, dtype=np.int64)
        for raw in transport.receive(SHARE_CHANNEL, j):
            msg = ShareMessage.decode(raw)
            if msg.receiver != j or msg.round != round:
                raise ValueError(f"misrouted share for client {j}")
            partial = (partial + unpack_residues(msg.payload, n, width)) % q
        transcript.partial_sums.append(partial)
        # Published to every other client.
        encoded = ShareMessage(round, j, j, pack_residues(partial, width)).encode()
        for other in range(N):
            if other != j:
                transport.send(PARTIAL_CHANNEL, other, encoded)

    views = []
    for j in range(N):
        view = transcript.partial_sums[j].copy()
        for raw in transport.receive(PARTIAL_CHANNEL, j):
            view = (view + unpack_residues(ShareMessage.decode(raw).payload, n, width)) % q
        views.append(view)
    if any(not np.array_equal(view, views[0]) for view in views[1:]):
        raise RuntimeError("clients disagree on the key sum")
    transcript.s_sum = views[0]
    return transcript


def direct_key_sum(keys, q: int) -> np.ndarray:
    """Plain modular sum of the keys (simulation oracle, not part of the protocol)."""
    total = np.zeros(len(keys[0]), dtype=np.int64)
    for key in keys:
        total = (total + np.asarray(key, dtype=np.int64)) % q
    return total
