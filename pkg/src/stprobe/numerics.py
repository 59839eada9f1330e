"""Dense linear algebra helpers and the splitmix64 generator.

Every random quantity in the package (dataset draws, permutations,
initial weights, epoch shuffles) is derived from :class:`Rng64`, so a
seed fully determines results on any platform.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = 0xFFFFFFFFFFFFFFFF


class NonFiniteError(FloatingPointError):
    """Raised when a public operation would hand back NaN or Inf."""


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


def matmul(a, b) -> np.ndarray:
    """Shape-checked matrix product of two 2-D arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents disagree: {a.shape} x {b.shape}")
    with np.errstate(all="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # in place; uint64 arithmetic wraps modulo 2**64 as splitmix64 requires
    tmp = np.empty_like(z)
    for shift, mult in ((30, MIX1), (27, MIX2)):
        np.right_shift(z, np.uint64(shift), out=tmp)
        np.bitwise_xor(z, tmp, out=z)
        np.multiply(z, np.uint64(mult), out=z)
    np.right_shift(z, np.uint64(31), out=tmp)
    np.bitwise_xor(z, tmp, out=z)
    return z


class Rng64:
    """splitmix64 stream.

    The state advances by a fixed increment per draw, so draw ``j`` (0-based)
    of a generator seeded with ``s`` is ``mix(s + (j + 1) * gamma)``.
    :meth:`bulk` uses that to produce long runs of the stream vectorized.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"Rng64(state=0x{self.state:016X})"

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix(self.state)

    def below(self, k: int) -> int:
        if k < 1:
            raise ValueError("rng_below needs k >= 1")
        return (self.next() >> 11) % k

    def bulk(self, count: int) -> np.ndarray:
        """Next ``count`` outputs as a uint64 array; advances the state."""
        if count < 0:
            raise ValueError("count must be non-negative")
        out = np.arange(1, count + 1, dtype=np.uint64)
        np.multiply(out, np.uint64(GOLDEN_GAMMA), out=out)
        np.add(out, np.uint64(self.state), out=out)
        _mix_array(out)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return out

    def peek(self, offsets) -> np.ndarray:
        """Outputs at 0-based ``offsets`` ahead of the current state; no advance."""
        out = np.asarray(offsets, dtype=np.uint64) + np.uint64(1)
        np.multiply(out, np.uint64(GOLDEN_GAMMA), out=out)
        np.add(out, np.uint64(self.state), out=out)
        return _mix_array(out)

    def skip(self, count: int) -> None:
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64

    def uniform(self, size) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits of each draw."""
        n = int(np.prod(size))
        return (self.bulk(n) >> np.uint64(11)).astype(np.float64).reshape(size) * 2.0**-53


def rng_next(r: Rng64) -> int:
    return r.next()


def rng_below(r: Rng64, k: int) -> int:
    return r.below(k)


def fisher_yates(r: Rng64, n: int) -> np.ndarray:
    """Downward Fisher-Yates permutation of ``range(n)``."""
    if n < 1:
        raise ValueError("fisher_yates needs n >= 1")
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = r.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)


def choose_k(r: Rng64, n: int, k: int) -> np.ndarray:
    """``k`` distinct indices below ``n``, ascending."""
    if k > n:
        raise ValueError(f"cannot choose {k} of {n}")
    return np.sort(fisher_yates(r, n)[:k])


def fisher_yates_rows(draws: np.ndarray, n: int) -> np.ndarray:
    """Row-wise Fisher-Yates, one permutation per row of ``draws``.

    ``draws`` is ``(rows, n - 1)`` uint64 with column ``c`` consumed at
    ``i = n - 1 - c``; row ``r`` reproduces ``fisher_yates`` on a generator
    whose next ``n - 1`` outputs are ``draws[r]``.
    """
    rows = draws.shape[0]
    perm = np.tile(np.arange(n, dtype=np.int32), (rows, 1))
    top = draws >> np.uint64(11)
    idx = np.arange(rows)
    for c, i in enumerate(range(n - 1, 0, -1)):
        j = (top[:, c] % np.uint64(i + 1)).astype(np.int64)
        held = perm[idx, i].copy()
        perm[idx, i] = perm[idx, j]
        perm[idx, j] = held
    return perm


def _swap_targets(draws_t: np.ndarray, n: int, dtype) -> np.ndarray:
    # row c of the (n - 1, rows) layout is the swap at i = n - 1 - c, modulus n - c
    moduli = np.arange(n, 1, -1, dtype=np.uint64)[:, None]
    return ((draws_t >> np.uint64(11)) % moduli).astype(dtype)


def fisher_yates_head_rows(draws: np.ndarray, n: int, k: int, *,
                           transposed: bool = False) -> np.ndarray:
    """First ``k`` entries of each row's ``fisher_yates_rows`` permutation.

    Walks the swaps in reverse to find where each of the first ``k`` output
    positions drew its value from, touching only ``k`` entries per swap.
    ``transposed=True`` takes draws laid out ``(n - 1, rows)``, which skips a
    transpose copy for callers that can generate them that way.
    """
    dtype = np.int8 if n < 2**7 else np.int16 if n < 2**15 else np.int64
    draws_t = draws if transposed else draws.T
    j = _swap_targets(draws_t, n, dtype)
    rows = draws_t.shape[1]
    pos = np.repeat(np.arange(k, dtype=dtype)[:, None], rows, axis=1)
    at_i = np.empty(pos.shape, bool)
    at_j = np.empty(pos.shape, bool)
    # reversed swaps run with ascending i; every tracked position is below
    # max(k, i), so from i = k on nothing can sit at i yet
    for c in range(n - 2, -1, -1):
        i = dtype(n - 1 - c)
        jc = np.broadcast_to(j[c], pos.shape)
        np.equal(pos, jc, out=at_j)
        if i < k:
            np.equal(pos, i, out=at_i)
            np.copyto(pos, jc, where=at_i)
        np.copyto(pos, i, where=at_j)
    return pos.T.astype(np.int64)
