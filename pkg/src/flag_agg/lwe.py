"""Error-free LWE encryption of quantization levels over Z_q.

A ciphertext for a bucket of ``m`` integer levels ``k`` is

    ct = A @ s + k * (q // 2**b)  (mod q)

where ``A`` is an ``m x n`` public matrix expanded from a short seed and ``s``
is the client's secret. Dithered quantization supplies the randomness that a
classic LWE scheme gets from its error term, so decryption is exact and
ciphertexts add without noise growth.

Residues are held as ``int64`` numpy arrays in ``[0, q)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

MATRIX_ALGORITHM = "shake256-rej-v1"
SEED_BYTES = 32
MAX_MODULUS = 2**32

# float64 represents every integer below 2**53 exactly; dot products are
# routed through BLAS only while partial sums stay under this.
_EXACT_FLOAT_BITS = 53


class ParameterError(ValueError):
    """Structurally invalid LWE parameters."""


class DecryptionError(ValueError):
    """A residue did not decode to a whole number of quantization steps."""


@dataclass(frozen=True)
class LweParams:
    n: int
    m: int
    q: int
    b: int

    def __post_init__(self):
        for name in ("n", "m", "q", "b"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ParameterError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ParameterError(f"{name} must be positive, got {value}")
        if 2**self.b >= self.q:
            raise ParameterError(f"2**b must be below q (b={self.b}, q={self.q})")
        if self.q % (2**self.b):
            raise ParameterError(f"q={self.q} is not divisible by 2**b={2**self.b}")
        if self.q > MAX_MODULUS:
            raise ParameterError(f"q={self.q} exceeds the supported 2**32")

    @property
    def gamma_step(self) -> int:
        """Residue distance between adjacent quantization levels, q / 2**b."""
        return self.q // (2**self.b)

    @property
    def residue_bits(self) -> int:
        """Wire width of one residue, ceil(log2 q)."""
        return residue_bits(self.q)

    @property
    def max_level(self) -> int:
        return 2 ** (self.b - 1)


def residue_bits(q: int) -> int:
    return max(1, (q - 1).bit_length())


@dataclass(frozen=True)
class Seed:
    data: bytes
    algorithm_id: str = MATRIX_ALGORITHM

    def __post_init__(self):
        if len(self.data) != SEED_BYTES:
            raise ValueError(f"seed must be {SEED_BYTES} bytes, got {len(self.data)}")

    @classmethod
    def from_int(cls, value: int, algorithm_id: str = MATRIX_ALGORITHM) -> "Seed":
        return cls(int(value).to_bytes(SEED_BYTES, "little"), algorithm_id)

    @property
    def seed_id(self) -> int:
        """64-bit identifier carried in message headers."""
        digest = hashlib.sha256(self.algorithm_id.encode() + self.data).digest()
        return int.from_bytes(digest[:8], "little")


def expand_public_matrix(seed: Seed, params: LweParams, index: int = 0) -> np.ndarray:
    """Expand ``seed`` into an ``m x n`` matrix uniform over Z_q.

    The byte stream is SHAKE-256 over a domain-separated encoding of the seed,
    the dimensions and ``index`` (one matrix per bucket). Each entry takes
    ``ceil(log2 q) / 8`` little-endian bytes rounded up, masked to
    ``ceil(log2 q)`` bits, and values ``>= q`` are rejected.
    """
    if seed.algorithm_id != MATRIX_ALGORITHM:
        raise ValueError(f"unsupported matrix expansion algorithm {seed.algorithm_id!r}")
    count = params.m * params.n
    width = residue_bits(params.q)
    nbytes = (width + 7) // 8
    mask = (1 << width) - 1

    xof = hashlib.shake_256()
    xof.update(MATRIX_ALGORITHM.encode() + b"\x00")
    xof.update(seed.data)
    for value in (params.n, params.m, params.q, index):
        xof.update(int(value).to_bytes(8, "little"))

    # Acceptance rate is > 1/2, so doubling the draw converges fast.
    draw = count
    while True:
        raw = np.frombuffer(xof.digest(draw * nbytes), dtype=np.uint8).reshape(draw, nbytes)
        weights = np.array([1 << (8 * i) for i in range(nbytes)], dtype=np.uint64)
        values = (raw.astype(np.uint64) * weights).sum(axis=1) & np.uint64(mask)
        accepted = values[values < np.uint64(params.q)]
        if accepted.size >= count:
            return accepted[:count].astype(np.int64).reshape(params.m, params.n)
        draw *= 2


def sample_secret(rng: np.random.Generator, params: LweParams) -> np.ndarray:
    return rng.integers(0, params.q, size=params.n, dtype=np.int64)


def matvec_mod(A: np.ndarray, s: np.ndarray, q: int) -> np.ndarray:
    """Exact ``A @ s mod q`` for residues below 2**32.

    ``s`` may be a vector or an ``n x k`` matrix of stacked secrets. The secret
    is split into limbs small enough that every float64 partial sum is exact.
    """
    n = A.shape[-1]
    headroom = _EXACT_FLOAT_BITS - math.ceil(math.log2(max(2, n * (q - 1))))
    if headroom < 1:
        return _matvec_mod_object(A, s, q)
    limb_bits = min(headroom, residue_bits(q))
    limbs = math.ceil(residue_bits(q) / limb_bits)
    Af = A.astype(np.float64)
    s = np.asarray(s, dtype=np.int64)
    out = np.zeros(A.shape[:-1] + s.shape[1:], dtype=np.int64)
    limb_mask = (1 << limb_bits) - 1
    for i in reversed(range(limbs)):
        part = (s >> (i * limb_bits)) & limb_mask
        prod = (Af @ part.astype(np.float64)).astype(np.int64) % q
        out = ((out << limb_bits) + prod) % q
    return out


def _matvec_mod_object(A, s, q):
    prod = A.astype(object) @ np.asarray(s).astype(object)
    return (prod % q).astype(np.int64)


def _check_levels(params: LweParams, k: np.ndarray) -> np.ndarray:
    k = np.asarray(k)
    if not np.issubdtype(k.dtype, np.integer):
        raise TypeError("levels must be integers")
    if k.shape[-1] != params.m:
        raise ValueError(f"level vector has length {k.shape[-1]}, expected m={params.m}")
    if k.size and np.abs(k).max() > params.max_level:
        raise ValueError(f"level out of range: |k| > 2**(b-1) = {params.max_level}")
    return k.astype(np.int64)


def embed_levels(params: LweParams, k: np.ndarray) -> np.ndarray:
    return (np.asarray(k, dtype=np.int64) * params.gamma_step) % params.q


def encrypt(params: LweParams, A: np.ndarray, s: np.ndarray, k: np.ndarray) -> np.ndarray:
    k = _check_levels(params, k)
    if A.shape != (params.m, params.n) or np.shape(s) != (params.n,):
        raise ValueError("dimension mismatch between A, s and params")
    return (matvec_mod(A, s, params.q) + embed_levels(params, k)) % params.q


def add_ciphertexts(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"ciphertext shapes differ: {np.shape(a)} vs {np.shape(b)}")
    return (np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)) % q


def sum_ciphertexts(cts, q: int) -> np.ndarray:
    cts = list(cts)
    if not cts:
        raise ValueError("nothing to aggregate")
    total = np.zeros_like(np.asarray(cts[0], dtype=np.int64))
    for ct in cts:
        total = add_ciphertexts(total, ct, q)
    return total


def decode_centered(x, q: int):
    """Map residues in [0, q) to (-q/2, q/2]; the midpoint q/2 stays positive."""
    x = np.asarray(x, dtype=np.int64)
    out = np.where(2 * x <= q, x, x - q)
    return int(out) if out.ndim == 0 else out


def decrypt_residues(params: LweParams, A: np.ndarray, s_sum: np.ndarray, ct: np.ndarray) -> np.ndarray:
    """Centered plaintext residues ``ct - A s_sum`` without dividing by the step."""
    ct = np.asarray(ct, dtype=np.int64)
    if ct.shape != (params.m,):
        raise ValueError(f"ciphertext has shape {ct.shape}, expected ({params.m},)")
    return decode_centered((ct - matvec_mod(A, s_sum, params.q)) % params.q, params.q)


def decrypt(params: LweParams, A: np.ndarray, s_sum: np.ndarray, ct: np.ndarray) -> np.ndarray:
    centered = decrypt_residues(params, A, s_sum, ct)
    levels, rem = np.divmod(centered, params.gamma_step)
    if np.any(rem):
        bad = int(np.flatnonzero(rem)[0])
        raise DecryptionError(
            f"residue {centered[bad]} at coordinate {bad} is not a multiple of "
            f"the step {params.gamma_step}; wrong key or corrupted ciphertext"
        )
    return levels


def comm_min_modulus(b: int, m: int) -> float:
    """Smallest q admitted by the CPA noise-width constraint, 3^-0.5 2^(b+2) m^1.5."""
    return 3**-0.5 * 2 ** (b + 2) * m**1.5


def validate_params(params: LweParams, n_constraint: bool = True) -> list[str]:
    """Warn about every CPA-proof constraint ``params`` violates.

    Structural problems raise :class:`ParameterError` (at construction).
    With ``n_constraint`` the sample-count and noise-width conditions that
    involve ``n`` are checked as well.
    """
    if not isinstance(params, LweParams):
        raise ParameterError("expected LweParams")
    warnings = []
    min_q = comm_min_modulus(params.b, params.m)
    if params.q < min_q:
        warnings.append(
            f"q={params.q} < 3^-0.5 * 2^(b+2) * m^1.5 = {min_q:.6g}; "
            "ciphertext noise width is below the CPA reduction's requirement"
        )
    if n_constraint:
        if params.m < 3 * params.n:
            warnings.append(f"m={params.m} < 3n={3 * params.n}")
        width = params.q / 2 ** (params.b + 1)
        need = 2 * math.sqrt(params.n) * params.m
        if width < need:
            warnings.append(f"q/2^(b+1)={width:.6g} < 2 n^0.5 m = {need:.6g}")
    return warnings


def encrypt_buckets(params: LweParams, matrices: np.ndarray, s: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Encrypt ``levels[j]`` under ``matrices[j]`` for every bucket ``j`` at once."""
    levels = _check_levels(params, levels)
    if matrices.shape[1:] != (params.m, params.n) or levels.shape != matrices.shape[:2]:
        raise ValueError("dimension mismatch between matrices, levels and params")
    return (matvec_mod(matrices, s, params.q) + embed_levels(params, levels)) % params.q


def decrypt_buckets_residues(params: LweParams, matrices: np.ndarray, s_sum: np.ndarray, cts: np.ndarray) -> np.ndarray:
    cts = np.asarray(cts, dtype=np.int64)
    if cts.shape != matrices.shape[:2]:
        raise ValueError("ciphertext and matrix bucket counts differ")
    return decode_centered((cts - matvec_mod(matrices, s_sum, params.q)) % params.q, params.q)


def decrypt_buckets(params: LweParams, matrices: np.ndarray, s_sum: np.ndarray, cts: np.ndarray) -> np.ndarray:
    centered = decrypt_buckets_residues(params, matrices, s_sum, cts)
    levels, rem = np.divmod(centered, params.gamma_step)
    if np.any(rem):
        raise DecryptionError(
            f"{int(np.count_nonzero(rem))} residues are not multiples of the step "
            f"{params.gamma_step}; wrong key or corrupted ciphertext"
        )
    return levels
