"""Dense linear algebra helpers, seeded randomness, top-k selection and a
finite-difference gradient oracle shared by the rest of the package.

Everything works in float64. Matrices and vectors are plain ``numpy.ndarray``
objects; the helpers here only add shape contracts and deterministic
tie-breaking on top of numpy.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class ContractViolation(ValueError):
    """Raised when a caller breaks a documented shape or range precondition."""


class NumericFailure(ArithmeticError):
    """Raised when a loss, gradient or parameter stops being finite."""


class OracleFailure(ArithmeticError):
    """Raised when a test oracle is evaluated at a non-finite point."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} has non-finite entries")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def outer(u, v) -> np.ndarray:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.size == 0 or v.size == 0:
        raise ContractViolation("outer product needs non-empty vectors")
    return np.outer(u, v)


def top_k(values: Sequence[float], k: int) -> tuple[int, ...]:
    """Indices of the ``k`` largest entries.

    Ties go to the lower index. The result is ordered by descending value,
    then ascending index, so ``top_k([0.5, 0.2, 0.9, 0.5], 2) == (2, 0)``.
    """
    vals = np.asarray(values)
    if vals.ndim != 1:
        raise ContractViolation("top_k expects a 1-D array")
    r = vals.shape[0]
    if k < 0 or k > r:
        raise ContractViolation(f"k={k} outside [0, {r}]")
    if k == 0:
        return ()
    # lexsort uses the last key as primary: descending value, then ascending index
    order = np.lexsort((np.arange(r), -vals))
    return tuple(int(i) for i in order[:k])


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ContractViolation("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleFailure(f"f is not finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SeededRng:
    """xoshiro256** generator whose 256-bit state is filled by splitmix64.

    The stream is fully determined by the 64-bit seed, so datasets and
    initialisations are reproducible across runs and platforms.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        sm = self.seed
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self._s = state

    @classmethod
    def from_state(cls, state: Iterable[int]) -> "SeededRng":
        rng = cls.__new__(cls)
        rng.seed = None
        rng._s = [int(v) & MASK64 for v in state]
        if len(rng._s) != 4 or not any(rng._s):
            raise ContractViolation("xoshiro256** needs four words, not all zero")
        return rng

    def derive(self, *labels) -> "SeededRng":
        """Independent child stream keyed by ``labels`` (ints or strings).

        Derivation depends only on the parent seed and the labels, never on
        how many numbers the parent has already produced.
        """
        if self.seed is None:
            raise ContractViolation("derive() needs a seeded generator")
        key = self.seed
        for label in labels:
            if isinstance(label, str):
                label = fnv1a64(label.encode("utf-8"))
            key, mixed = splitmix64(key ^ (int(label) & MASK64))
            key = mixed
        return SeededRng(key)

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integers(self, n: int, size: int | None = None):
        """Unbiased integer(s) in [0, n) by rejection sampling."""
        if n <= 0:
            raise ContractViolation("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)

        def one() -> int:
            while True:
                x = self.next_u64()
                if x < limit:
                    return x % n

        if size is None:
            return one()
        return np.array([one() for _ in range(size)], dtype=np.int64)

    def normal(self, size=None, scale: float = 1.0):
        """Gaussian draws via Box-Muller, consuming two uniforms per pair."""
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        count = int(np.prod(shape)) if shape else 1
        out = np.empty(count, dtype=np.float64)
        i = 0
        while i < count:
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            rad = math.sqrt(-2.0 * math.log(u1))
            out[i] = rad * math.cos(2.0 * math.pi * u2)
            if i + 1 < count:
                out[i + 1] = rad * math.sin(2.0 * math.pi * u2)
            i += 2
        out *= scale
        if size is None:
            return float(out[0])
        return out.reshape(shape)
