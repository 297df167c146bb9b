"""
Limited-independence hash families for implicit sketching matrices

Two families, both expanded deterministically from one 64-bit master word:

- a 4-wise independent sign family: a degree-3 polynomial over the Mersenne
  prime field 2^61 - 1, whose low bit picks the sign
- a pairwise independent bucket family: multiply-shift on 64-bit words,
  h(i) = (a*i + b) >> (64 - log2 k) with a odd
"""

import struct
from dataclasses import dataclass

import numpy as np

from sketchreg_errors import ContractViolation, SketchIOError

MERSENNE_61 = (1 << 61) - 1
WORD_BITS = 64
MASK64 = (1 << 64) - 1

_P = np.uint64(MERSENNE_61)
_LOW32 = np.uint64(0xFFFFFFFF)
_LOW29 = np.uint64((1 << 29) - 1)
_SHIFT3 = np.uint64(3)
_SHIFT29 = np.uint64(29)
_SHIFT32 = np.uint64(32)
_SHIFT61 = np.uint64(61)
_ONE = np.uint64(1)

SEED_STRUCT = struct.Struct('<BQ')


def splitmix64(state):
    """One splitmix64 step: returns (next_state, output)"""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def is_power_of_two(x):
    return x >= 1 and (x & (x - 1)) == 0


def next_power_of_two(x):
    """Smallest power of two that is >= x"""
    if x < 1:
        raise ContractViolation(f"expected a positive integer, got {x}")
    return 1 << (int(x) - 1).bit_length()


@dataclass(frozen=True)
class SketchSeed:
    """Compact random state from which every sketching-matrix entry is regenerated"""
    master: int
    sign_coeffs: tuple
    shift_a: int
    shift_b: int

    @classmethod
    def from_master(cls, master):
        """Expand a 64-bit master word into the coefficients of both families"""
        master = int(master)
        if not 0 <= master <= MASK64:
            raise ContractViolation(f"seed master must fit in 64 bits, got {master}")
        state = master
        coeffs = []
        for _ in range(4):
            state, out = splitmix64(state)
            coeffs.append(out % MERSENNE_61)
        state, a = splitmix64(state)
        state, b = splitmix64(state)
        return cls(master=master, sign_coeffs=tuple(coeffs), shift_a=a | 1, shift_b=b)

    def to_bytes(self, method_tag):
        """1 method byte + 8 little-endian master bytes"""
        return SEED_STRUCT.pack(int(method_tag), self.master)

    @classmethod
    def from_bytes(cls, data):
        """Inverse of to_bytes; returns (method_tag, seed)"""
        if len(data) != SEED_STRUCT.size:
            raise SketchIOError(f"seed record must be {SEED_STRUCT.size} bytes, got {len(data)}")
        method_tag, master = SEED_STRUCT.unpack(data)
        return method_tag, cls.from_master(master)


# ---------------------------------------------------------------------------
# 4-wise sign family
# ---------------------------------------------------------------------------

def _fold61(x):
    x = (x & _P) + (x >> _SHIFT61)
    return np.where(x >= _P, x - _P, x)


def _mulmod61(a, b):
    """(a * b) mod 2^61-1 for uint64 arrays with entries < 2^61-1"""
    a_hi, a_lo = a >> _SHIFT32, a & _LOW32
    b_hi, b_lo = b >> _SHIFT32, b & _LOW32
    lo = a_lo * b_lo
    mid = a_hi * b_lo + a_lo * b_hi
    hi = a_hi * b_hi
    # 2^64 == 8 and 2^61 == 1 modulo the prime
    r = (hi << _SHIFT3) + (mid >> _SHIFT29) + ((mid & _LOW29) << _SHIFT32) + (lo & _P) + (lo >> _SHIFT61)
    return _fold61(r)


def poly_hash(coeffs, x, prime=MERSENNE_61):
    """Evaluate c0 + c1*x + c2*x^2 + c3*x^3 mod prime by Horner's rule

    Works on Python ints, and on numpy arrays either for the Mersenne prime
    (exact 122-bit products via limb splitting) or for small oracle primes.
    """
    c0, c1, c2, c3 = coeffs
    if isinstance(x, np.ndarray) and prime == MERSENNE_61:
        x = x.astype(np.uint64, copy=False)
        acc = np.full(x.shape, c3, dtype=np.uint64)
        for c in (c2, c1, c0):
            acc = _fold61(_mulmod61(acc, x) + np.uint64(c))
        return acc
    acc = c3
    for c in (c2, c1, c0):
        acc = (acc * x + c) % prime
    return acc


def _check_field_index(row_index):
    if row_index < 0 or row_index >= MERSENNE_61:
        raise ContractViolation(f"row index {row_index} outside the field range [0, 2^61-1)")


def sign4(seed, row_index):
    """4-wise independent sign in {-1, +1} for one index"""
    row_index = int(row_index)
    _check_field_index(row_index)
    value = poly_hash(seed.sign_coeffs, row_index)
    return 1 - 2 * (value & 1)


def sign4_array(seed, indices):
    """Vectorised sign4: float64 array of +-1 with the shape of indices"""
    indices = np.asarray(indices)
    if indices.size:
        if int(indices.min()) < 0 or int(indices.max()) >= MERSENNE_61:
            raise ContractViolation("row index outside the field range [0, 2^61-1)")
    value = poly_hash(seed.sign_coeffs, indices.astype(np.uint64))
    return 1.0 - 2.0 * (value & _ONE).astype(np.float64)


# ---------------------------------------------------------------------------
# pairwise bucket family
# ---------------------------------------------------------------------------

def multiply_shift(a, b, x, k, word_bits=WORD_BITS):
    """h(x) = ((a*x + b) mod 2^w) >> (w - log2 k), scalar version for any word size"""
    if not is_power_of_two(k):
        raise ContractViolation(f"bucket count must be a power of two, got {k}")
    log_k = k.bit_length() - 1
    if log_k > word_bits:
        raise ContractViolation(f"bucket count 2^{log_k} exceeds the word size {word_bits}")
    mask = (1 << word_bits) - 1
    return ((a * x + b) & mask) >> (word_bits - log_k)


def bucket2(seed, row_index, k):
    """Pairwise independent bucket in [0, k) for one index"""
    row_index = int(row_index)
    if row_index < 0 or row_index > MASK64:
        raise ContractViolation(f"row index {row_index} must be a non-negative 64-bit integer")
    return multiply_shift(seed.shift_a, seed.shift_b, row_index, int(k))


def bucket2_array(seed, indices, k):
    """Vectorised bucket2 on 64-bit words; returns an int64 array"""
    k = int(k)
    if not is_power_of_two(k):
        raise ContractViolation(f"bucket count must be a power of two, got {k}")
    indices = np.asarray(indices)
    if indices.size and int(indices.min()) < 0:
        raise ContractViolation("row indices must be non-negative")
    if k == 1:
        return np.zeros(indices.shape, dtype=np.int64)
    shift = np.uint64(WORD_BITS - (k.bit_length() - 1))
    x = indices.astype(np.uint64)
    h = (np.uint64(seed.shift_a) * x + np.uint64(seed.shift_b)) >> shift
    return h.astype(np.int64)
