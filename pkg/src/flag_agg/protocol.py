"""Round-by-round simulation of secure aggregation over a message transport.

One round, for every client: fresh secret and key-sum agreement, local
gradient (with momentum), clip, quantize, bucket, encrypt, upload. The server
adds ciphertexts bucket by bucket and broadcasts the sum; every client
decrypts with the key sum and takes the same SGD step.

Besides ``flag`` the simulator runs three reference modes over the same
transport: ``quantized_plain`` (levels sent in the clear), ``vanilla``
(float64 gradients, no clipping or quantization) and ``lwe_baseline`` (the
encryption plus a rounded Gaussian error term).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import lwe
from .analysis import min_clip_threshold
from .keys import direct_key_sum, run_key_sum
from .quantizer import DitherSource, QuantConfig, clip, dequantize, quantize, round_half_away
from .trainer import SgdConfig, momentum_step
from .wire import (
    BroadcastMessage,
    Transport,
    UploadMessage,
    pack_residues,
    pack_signed,
    unpack_signed,
)

MODES = ("flag", "vanilla", "quantized_plain", "lwe_baseline")
CLIP_RULES = ("prev_aggregate", "fixed", "overflow_bound")
BASELINE_SIGMA_RULES = ("printed", "divided")
METRIC_COLUMNS = ("round", "loss", "grad_norm_sq", "upload_bytes", "broadcast_bytes", "overflow_count", "C_t")

UPLOAD = "upload"
BROADCAST = "broadcast"
SERVER = "server"


class ProtocolError(RuntimeError):
    pass


# --- bucketing --------------------------------------------------------------

@dataclass(frozen=True)
class Bucketing:
    d: int
    m: int

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("d and m must be positive")

    @property
    def num_buckets(self) -> int:
        return -(-self.d // self.m)

    @property
    def padded(self) -> int:
        return self.num_buckets * self.m

    @property
    def pad(self) -> int:
        return self.padded - self.d


def bucketize(k, m: int) -> np.ndarray:
    k = np.asarray(k)
    if k.ndim != 1 or k.size < 1:
        raise ValueError("expected a non-empty vector")
    layout = Bucketing(k.size, m)
    out = np.zeros(layout.padded, dtype=k.dtype)
    out[: k.size] = k
    return out.reshape(layout.num_buckets, m)


def debucketize(buckets, d: int) -> np.ndarray:
    return np.asarray(buckets).reshape(-1)[:d]


def measure_overflow(decoded, truth) -> int:
    """Coordinates whose decoded aggregate differs from the true plaintext sum."""
    return int(np.count_nonzero(np.asarray(decoded) != np.asarray(truth)))


def baseline_sigma(params: lwe.LweParams, rule: str = "printed") -> float:
    """Error scale of the noisy-LWE baseline, in residue units.

    ``printed`` is ``q / 2^b * sqrt(12)``; ``divided`` is ``q / 2^b / sqrt(12)``,
    the standard deviation of a uniform variable one level wide.
    """
    if rule == "printed":
        return params.gamma_step * math.sqrt(12)
    if rule == "divided":
        return params.gamma_step / math.sqrt(12)
    raise ValueError(f"unknown baseline sigma rule {rule!r}")


def rounded_gaussian(rng: np.random.Generator, sigma_e: float, shape) -> np.ndarray:
    if sigma_e < 0:
        raise ValueError("sigma_e must be nonnegative")
    if sigma_e == 0:
        return np.zeros(shape, dtype=np.int64)
    return np.rint(rng.normal(0.0, sigma_e, size=shape)).astype(np.int64)


def baseline_lwe_encrypt(params: lwe.LweParams, A, s, k, sigma_e: float, rng: np.random.Generator) -> np.ndarray:
    """Encryption with a classic LWE error term: ``A s + k q/2^b + e mod q``."""
    ct = lwe.encrypt(params, A, s, k)
    return (ct + rounded_gaussian(rng, sigma_e, ct.shape)) % params.q


# --- configuration and state ------------------------------------------------

@dataclass(frozen=True)
class ProtocolConfig:
    params: lwe.LweParams
    eta: float
    mode: str = "flag"
    C0: float = 1.0
    clip_rule: str = "prev_aggregate"
    clip_scale: float = 2.0
    delta_overflow: float = 1e-6
    baseline_sigma_rule: str = "printed"
    matrix_seed: int = 0
    rng_seed: int = 0
    dither_seed: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clip_rule not in CLIP_RULES:
            raise ValueError(f"clip_rule must be one of {CLIP_RULES}, got {self.clip_rule!r}")
        if self.baseline_sigma_rule not in BASELINE_SIGMA_RULES:
            raise ValueError(f"baseline_sigma_rule must be one of {BASELINE_SIGMA_RULES}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (self.C0 > 0 and math.isfinite(self.C0)):
            raise ValueError(f"C0 must be positive, got {self.C0}")
        if not self.clip_scale > 0:
            raise ValueError(f"clip_scale must be positive, got {self.clip_scale}")


def _stream(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


class ClientState:
    """A client's model copy, optimizer state, secret and random streams.

    Batch sampling, key generation, baseline noise and dither each draw from
    their own stream so switching the aggregation mode never shifts the
    gradients a client computes.
    """

    def __init__(self, client_id: int, theta0, objective, sgd: SgdConfig, rng_seed: int, dither_seed: int,
                 C0: float = 1.0):
        self.id = client_id
        self.theta = np.array(theta0, dtype=np.float64)
        self.objective = objective
        self.sgd = sgd
        self.batch_rng = _stream(rng_seed, client_id, 0)
        self.key_rng = _stream(rng_seed, client_id, 1)
        self.noise_rng = _stream(rng_seed, client_id, 2)
        self.dither = DitherSource(_stream(dither_seed, client_id))
        self.velocity = np.zeros_like(self.theta)
        self.clip = float(C0)
        self.secret: np.ndarray | None = None
        self.direction: np.ndarray | None = None
        # Simulation instrument: this round's plaintext contribution, read by
        # the overflow counter and cleared when the round ends.
        self.contribution: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.theta.size

    def compute_direction(self) -> np.ndarray:
        g = self.objective.stochastic_gradient(self.theta, self.batch_rng)
        if not np.all(np.isfinite(g)):
            raise ProtocolError(f"client {self.id}: non-finite gradient")
        self.velocity, self.direction = momentum_step(self.velocity, g, self.sgd)
        return self.direction

    def quantized_levels(self, b: int) -> tuple[np.ndarray, QuantConfig]:
        cfg = QuantConfig(self.clip, b)
        return quantize(clip(self.direction, cfg.C), cfg, self.dither), cfg

    def end_round(self) -> None:
        self.direction = None
        self.contribution = None
        self.secret = None


@dataclass(slots=True)
class ServerState:
    """Everything the server holds. It has no slot for keys or plaintexts."""

    round: int
    seed_id: int
    received: list = field(default_factory=list)
    aggregate: np.ndarray | None = None


@dataclass
class RoundMetrics:
    round: int
    loss: float
    grad_norm_sq: float
    upload_bytes: int
    broadcast_bytes: int
    overflow_count: int
    C_t: float
    upload_payload_bits: int = 0
    key_bytes: int = 0
    wall_time: float = 0.0

    def row(self) -> list:
        return [self.round, repr(self.loss), repr(self.grad_norm_sq), self.upload_bytes,
                self.broadcast_bytes, self.overflow_count, repr(self.C_t)]


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(METRIC_COLUMNS)
        for row in metrics:
            out.writerow(row.row())


# --- protocol steps ---------------------------------------------------------

def client_upload(client: ClientState, matrices: np.ndarray, params: lwe.LweParams, round: int, seed_id: int,
                  sigma_e: float = 0.0) -> UploadMessage:
    """Clip, quantize, bucket and encrypt the client's current direction."""
    if client.direction is None:
        raise ProtocolError(f"client {client.id} has no gradient for round {round}")
    if client.secret is None:
        raise ProtocolError(f"client {client.id} has no key for round {round}")
    levels, cfg = client.quantized_levels(params.b)
    buckets = bucketize(levels, params.m)
    cts = lwe.encrypt_buckets(params, matrices, client.secret, buckets)
    contribution = buckets * params.gamma_step
    if sigma_e > 0:
        noise = rounded_gaussian(client.noise_rng, sigma_e, cts.shape)
        cts = (cts + noise) % params.q
        contribution = contribution + noise
    client.contribution = contribution
    payload = pack_residues(cts, params.residue_bits)
    return UploadMessage(round, client.id, len(buckets), params.b, cfg.C, seed_id, payload)


def server_aggregate(server: ServerState, msgs, params: lwe.LweParams, n_clients: int) -> BroadcastMessage:
    """Add the uploaded ciphertexts bucket-wise; messages are taken in client-id order."""
    msgs = sorted(msgs, key=lambda msg: msg.client_id)
    ids = [msg.client_id for msg in msgs]
    if ids != list(range(n_clients)):
        raise ProtocolError(f"round {server.round}: expected uploads from clients 0..{n_clients - 1}, got {ids}")
    first = msgs[0]
    for msg in msgs:
        if (msg.round, msg.b, msg.num_buckets, msg.seed_id, msg.clip) != (
            server.round, first.b, first.num_buckets, server.seed_id, first.clip
        ):
            raise ProtocolError(f"round {server.round}: header mismatch from client {msg.client_id}")
    total = lwe.sum_ciphertexts((msg.ciphertexts(params.m, params.residue_bits) for msg in msgs), params.q)
    server.received = msgs
    server.aggregate = total
    payload = pack_residues(total, params.residue_bits)
    return BroadcastMessage(server.round, first.num_buckets, first.b, first.clip, server.seed_id, payload)


def decrypt_aggregate(params: lwe.LweParams, matrices, s_sum, broadcast: BroadcastMessage, d: int,
                      noisy: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(level sums, centered residues)`` for the first ``d`` coordinates.

    With ``noisy`` the residues are rounded to the nearest level instead of
    being required to divide exactly, as the noisy baseline needs.
    """
    cts = broadcast.ciphertexts(params.m, params.residue_bits)
    residues = lwe.decrypt_buckets_residues(params, matrices, s_sum, cts)
    if noisy:
        levels = round_half_away(residues / params.gamma_step).astype(np.int64)
    else:
        levels = lwe.decrypt_buckets(params, matrices, s_sum, cts)
    return debucketize(levels, d), residues


def apply_aggregate(client: ClientState, g_total: np.ndarray, eta: float, N: int) -> None:
    client.theta = client.theta - (eta / N) * g_total


def client_apply_update(client: ClientState, broadcast: BroadcastMessage, s_sum, matrices, params: lwe.LweParams,
                        eta: float, N: int, noisy: bool = False) -> np.ndarray:
    """Decrypt the broadcast, take the SGD step and return the real aggregate."""
    levels, _ = decrypt_aggregate(params, matrices, s_sum, broadcast, client.dim, noisy)
    g_total = dequantize(levels, QuantConfig(broadcast.clip, broadcast.b))
    apply_aggregate(client, g_total, eta, N)
    return g_total


def expand_matrices(seed: lwe.Seed, params: lwe.LweParams, num_buckets: int) -> np.ndarray:
    """One public matrix per bucket; bucket ``j`` uses expansion index ``j``."""
    return np.stack([lwe.expand_public_matrix(seed, params, j) for j in range(num_buckets)])


# --- orchestration ----------------------------------------------------------

class FederatedRun:
    """Clients, server and transport for one training run."""

    def __init__(self, config: ProtocolConfig, objectives, sgd: SgdConfig, theta0):
        self.config = config
        self.params = config.params
        self.N = len(objectives)
        if self.N < 1:
            raise ValueError("need at least one client")
        theta0 = np.asarray(theta0, dtype=np.float64)
        self.d = theta0.size
        self.layout = Bucketing(self.d, self.params.m)
        self.objectives = list(objectives)
        self.clients = [
            ClientState(i, theta0, obj, sgd, config.rng_seed, config.dither_seed, config.C0)
            for i, obj in enumerate(self.objectives)
        ]
        self.seed = lwe.Seed.from_int(config.matrix_seed)
        self.server = ServerState(round=0, seed_id=self.seed.seed_id)
        self.transport = Transport()
        self.round = 0
        self.clip = config.C0
        self.history: list[RoundMetrics] = []
        self._matrices = None
        if config.mode in ("flag", "lwe_baseline") and self.N < 2:
            raise ValueError("encrypted modes need at least two clients for key agreement")

    @property
    def matrices(self) -> np.ndarray:
        if self._matrices is None:
            self._matrices = expand_matrices(self.seed, self.params, self.layout.num_buckets)
        return self._matrices

    @property
    def theta(self) -> np.ndarray:
        return self.clients[0].theta

    def global_loss(self) -> float:
        return float(np.mean([obj.loss(self.theta) for obj in self.objectives]))

    def global_grad_norm_sq(self) -> float:
        g = np.mean([obj.full_gradient(self.theta) for obj in self.objectives], axis=0)
        return float(g @ g)

    def run(self, T: int, callback=None) -> list[RoundMetrics]:
        for _ in range(T):
            metrics = self.run_round()
            if callback is not None:
                callback(metrics)
        return self.history

    def run_round(self) -> RoundMetrics:
        start = time.perf_counter()
        t = self.round
        loss, grad_sq = self.global_loss(), self.global_grad_norm_sq()
        self.transport.reset_counters()
        self.server.round = t
        for client in self.clients:
            client.clip = self.clip
            client.compute_direction()

        mode = self.config.mode
        if mode in ("flag", "lwe_baseline"):
            g_total, overflow, payload_bits = self._encrypted_round(t)
        elif mode == "quantized_plain":
            g_total, overflow, payload_bits = self._plain_quantized_round(t)
        else:
            g_total, overflow, payload_bits = self._vanilla_round(t)

        first = self.clients[0].theta
        for client in self.clients[1:]:
            if not np.array_equal(client.theta, first):
                raise ProtocolError(f"round {t}: client {client.id} model diverged")
        for client in self.clients:
            client.end_round()

        used_clip = self.clip
        if mode != "vanilla":
            self.clip = self._next_clip(g_total)
        tally = self.transport.bytes_by_channel
        metrics = RoundMetrics(
            round=t,
            loss=loss,
            grad_norm_sq=grad_sq,
            upload_bytes=tally.get(UPLOAD, 0) // self.N,
            broadcast_bytes=tally.get(BROADCAST, 0) // self.N,
            overflow_count=overflow,
            C_t=used_clip if mode != "vanilla" else 0.0,
            upload_payload_bits=payload_bits,
            key_bytes=tally.get("key_share", 0) + tally.get("key_partial", 0),
            wall_time=time.perf_counter() - start,
        )
        self.history.append(metrics)
        self.round += 1
        return metrics

    def _next_clip(self, g_total) -> float:
        rule = self.config.clip_rule
        if rule == "fixed":
            return self.clip
        if rule == "prev_aggregate":
            candidate = self.config.clip_scale * float(np.abs(g_total).max())
        else:
            # Per-client, per-coordinate spread implied by the aggregate.
            sigma_hat = float(np.std(g_total)) / math.sqrt(self.N)
            if not sigma_hat > 0:
                return self.clip
            candidate = self.config.clip_scale * min_clip_threshold(self.N, sigma_hat, self.config.delta_overflow)
        return candidate if candidate > 0 and math.isfinite(candidate) else self.clip

    def _encrypted_round(self, t):
        params = self.params
        noisy = self.config.mode == "lwe_baseline"
        sigma_e = baseline_sigma(params, self.config.baseline_sigma_rule) if noisy else 0.0
        for client in self.clients:
            client.secret = lwe.sample_secret(client.key_rng, params)
        transcript = run_key_sum([c.secret for c in self.clients], [c.key_rng for c in self.clients],
                                 params.q, round=t, transport=self.transport)

        payload_bits = 0
        for client in self.clients:
            msg = client_upload(client, self.matrices, params, t, self.seed.seed_id, sigma_e)
            payload_bits = msg.num_buckets * params.m * params.residue_bits
            self.transport.send(UPLOAD, SERVER, msg.encode())

        uploads = [UploadMessage.decode(raw) for raw in self.transport.receive(UPLOAD, SERVER)]
        broadcast = server_aggregate(self.server, uploads, params, self.N).encode()
        for client in self.clients:
            self.transport.send(BROADCAST, client.id, broadcast)

        truth = sum(c.contribution for c in self.clients)
        overflow = 0
        g_total = None
        for client in self.clients:
            msg = BroadcastMessage.decode(self.transport.receive(BROADCAST, client.id)[0])
            levels, residues = decrypt_aggregate(params, self.matrices, transcript.s_sum, msg, client.dim, noisy)
            g_total = dequantize(levels, QuantConfig(msg.clip, msg.b))
            apply_aggregate(client, g_total, self.config.eta, self.N)
            if client.id == 0:
                overflow = measure_overflow(debucketize(residues, self.d), debucketize(truth, self.d))
        return g_total, overflow, payload_bits

    def _plain_quantized_round(self, t):
        b = self.params.b
        width = b + 1
        sum_width = width + max(1, math.ceil(math.log2(self.N + 1)))
        for client in self.clients:
            levels, cfg = client.quantized_levels(b)
            msg = UploadMessage(t, client.id, 0, b, cfg.C, self.seed.seed_id, pack_signed(levels, width))
            self.transport.send(UPLOAD, SERVER, msg.encode())
        uploads = sorted((UploadMessage.decode(raw) for raw in self.transport.receive(UPLOAD, SERVER)),
                         key=lambda msg: msg.client_id)
        total = np.zeros(self.d, dtype=np.int64)
        for msg in uploads:
            total += unpack_signed(msg.payload, self.d, width)
        out = BroadcastMessage(t, 0, b, uploads[0].clip, self.seed.seed_id, pack_signed(total, sum_width)).encode()
        for client in self.clients:
            self.transport.send(BROADCAST, client.id, out)
        g_total = None
        for client in self.clients:
            msg = BroadcastMessage.decode(self.transport.receive(BROADCAST, client.id)[0])
            g_total = dequantize(unpack_signed(msg.payload, self.d, sum_width), QuantConfig(msg.clip, msg.b))
            apply_aggregate(client, g_total, self.config.eta, self.N)
        return g_total, 0, self.d * width

    def _vanilla_round(self, t):
        for client in self.clients:
            payload = client.direction.astype("<f8").tobytes()
            msg = UploadMessage(t, client.id, 0, 0, 0.0, self.seed.seed_id, payload)
            self.transport.send(UPLOAD, SERVER, msg.encode())
        uploads = sorted((UploadMessage.decode(raw) for raw in self.transport.receive(UPLOAD, SERVER)),
                         key=lambda msg: msg.client_id)
        total = np.zeros(self.d)
        for msg in uploads:
            total = total + np.frombuffer(msg.payload, dtype="<f8")
        out = BroadcastMessage(t, 0, 0, 0.0, self.seed.seed_id, total.astype("<f8").tobytes()).encode()
        for client in self.clients:
            self.transport.send(BROADCAST, client.id, out)
        g_total = None
        for client in self.clients:
            msg = BroadcastMessage.decode(self.transport.receive(BROADCAST, client.id)[0])
            g_total = np.frombuffer(msg.payload, dtype="<f8").copy()
            apply_aggregate(client, g_total, self.config.eta, self.N)
        return g_total, 0, self.d * 64


# --- overflow experiment ----------------------------------------------------

@dataclass
class OverflowResult:
    coordinates: int
    overflows: int
    mode: str
    C: float

    @property
    def fraction(self) -> float:
        return self.overflows / self.coordinates


def overflow_experiment(params: lwe.LweParams, N: int, sigma_g: float, C: float, coordinates: int,
                        sigma_e: float = 0.0, seed: int = 0, buckets_per_trial: int = 8) -> OverflowResult:
    """Encrypt, aggregate and decrypt Gaussian gradients from ``N`` clients.

    Counts coordinates whose decoded aggregate differs from the true sum of
    the plaintext contributions. ``sigma_e > 0`` adds the baseline's rounded
    Gaussian error to every ciphertext. Each trial uses fresh keys; the
    bucket matrices are reused across trials.
    """
    rng = np.random.default_rng(seed)
    seed_obj = lwe.Seed.from_int(seed)
    matrices = expand_matrices(seed_obj, params, buckets_per_trial)
    cfg = QuantConfig(C, params.b)
    dither = DitherSource(rng)
    d = buckets_per_trial * params.m
    trials = -(-coordinates // d)
    overflows = 0
    for _ in range(trials):
        keys = rng.integers(0, params.q, size=(N, params.n), dtype=np.int64)
        masks = lwe.matvec_mod(matrices, keys.T, params.q)  # (buckets, m, N)
        total_ct = np.zeros((buckets_per_trial, params.m), dtype=np.int64)
        truth = np.zeros((buckets_per_trial, params.m), dtype=np.int64)
        for i in range(N):
            g = rng.normal(0.0, sigma_g, size=d)
            levels = quantize(clip(g, C), cfg, dither).reshape(buckets_per_trial, params.m)
            contribution = levels * params.gamma_step
            ct = (masks[:, :, i] + lwe.embed_levels(params, levels)) % params.q
            if sigma_e > 0:
                noise = rounded_gaussian(rng, sigma_e, ct.shape)
                ct = (ct + noise) % params.q
                contribution = contribution + noise
            total_ct = lwe.add_ciphertexts(total_ct, ct, params.q)
            truth += contribution
        s_sum = direct_key_sum(keys, params.q)
        decoded = lwe.decrypt_buckets_residues(params, matrices, s_sum, total_ct)
        overflows += measure_overflow(decoded, truth)
    return OverflowResult(trials * d, overflows, "lwe_baseline" if sigma_e > 0 else "flag", C)
