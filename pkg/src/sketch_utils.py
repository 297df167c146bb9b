"""
Oblivious subspace embeddings as single-pass, mergeable, turnstile-capable builders

Supported methods:
- RAD:  dense +-1 matrix from the 4-wise sign family, rescaled by 1/sqrt(k)
- SRHT: R H_m D with D from the sign family and R from the bucket family, rescaled by 1/sqrt(k)
- CW:   Phi D, each row hashed to one of k buckets with a random sign
- GRAM: the X^T [X, Y] baseline (exact but badly conditioned)

Every builder keeps acc == Pi @ (data seen so far), so builders over disjoint row
ranges with the same seed can be merged by adding accumulators.
"""

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
import scipy.linalg

from hash_utils import (
    SEED_STRUCT,
    SketchSeed,
    bucket2_array,
    is_power_of_two,
    next_power_of_two,
    sign4_array,
)
from linalg_utils import fwht, hadamard_entry_sign
from sketchreg_config import get_config
from sketchreg_errors import (
    ContractViolation,
    MergeIncompatible,
    NumericalFailure,
    SketchIOError,
)

logger = logging.getLogger(__name__)

SKETCH_MAGIC = b'SKRG'
HEADER_STRUCT = struct.Struct('<4sH')
SIZES_STRUCT = struct.Struct('<QQQQ')

# RAD entry (r, i) is the sign of flat index r * 2^32 + i, which must stay below 2^61 - 1
RAD_ROW_STRIDE_BITS = 32
MAX_RAD_INDEX = 1 << RAD_ROW_STRIDE_BITS
MAX_RAD_ROWS = 1 << 28
# cap on the k x chunk scratch matrix built for dense methods
DENSE_CHUNK_ENTRIES = 1 << 22


class SketchMethod(Enum):
    RAD = 1
    SRHT = 2
    CW = 3
    GRAM = 4

    @classmethod
    def from_name(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ContractViolation(f"unknown sketch method {name!r}; expected one of rad, srht, cw, gram")

    @classmethod
    def from_tag(cls, tag):
        try:
            return cls(tag)
        except ValueError:
            raise SketchIOError(f"unknown sketch method tag {tag}")


@dataclass(frozen=True)
class UpdateTriple:
    """Turnstile update: X[i, j] += u (column d_total-1 addresses Y)"""
    i: int
    j: int
    u: float


def _check_epsilon(name, value):
    if not 0.0 < value <= 0.5:
        raise ContractViolation(f"{name} must lie in (0, 1/2], got {value}")


def _smallest_power_of_two_above(value):
    k = 1
    while k <= value:
        k *= 2
    return k


def target_dimension(method, d_total, epsilon, alpha=None, d_var=None, strict=False, n=None):
    """Number of sketch rows k for a method and accuracy epsilon

    Default (empirical) sizing:
      RAD, SRHT: ceil(D ln D / eps^2) with D = d_total
      CW:        smallest power of two strictly above cw_constant * d_var^2 / eps^2
    strict=True switches to the theoretical bounds, which depend on alpha
    (and on n for SRHT). alpha is always recorded but only enters strict sizing.
    """
    method = SketchMethod.from_name(method)
    alpha = get_config('default_alpha') if alpha is None else alpha
    d_total = int(d_total)
    if d_total < 1:
        raise ContractViolation(f"d_total must be positive, got {d_total}")
    if method is SketchMethod.GRAM:
        logger.info("GRAM sketch ignores epsilon and alpha; k = d_total - 1")
        return max(d_total - 1, 1)
    _check_epsilon('epsilon', epsilon)
    _check_epsilon('alpha', alpha)
    D = d_total
    eps2 = epsilon * epsilon
    if method is SketchMethod.CW:
        d_var = D if d_var is None else int(d_var)
        if d_var < 1:
            raise ContractViolation(f"d_var must be positive, got {d_var}")
        if strict:
            return _smallest_power_of_two_above(d_var * d_var / (eps2 * alpha))
        return _smallest_power_of_two_above(get_config('cw_constant') * d_var * d_var / eps2)
    if strict:
        if method is SketchMethod.RAD:
            return max(1, math.ceil((D + math.log(1.0 / alpha)) / eps2))
        if n is None or n < 2:
            raise ContractViolation("strict SRHT sizing needs the row count n >= 2")
        width = (math.sqrt(D) + math.sqrt(math.log(n))) ** 2
        return max(1, math.ceil(width * math.log(D / alpha) / eps2))
    return max(1, math.ceil(D * math.log(D) / eps2))


class SketchBuilder:
    """Incremental accumulator for one sketching method

    acc has shape (k, d_total). For SRHT, m is the padded power-of-two row
    space; rows at index >= m are rejected rather than wrapped.
    """

    def __init__(self, method, d_total, k, seed, n_hint=None, block_mode=False, block_size=None):
        self.method = SketchMethod.from_name(method)
        self.d_total = int(d_total)
        if self.d_total < 1:
            raise ContractViolation(f"d_total must be positive, got {d_total}")
        if self.method is SketchMethod.GRAM:
            if self.d_total < 2:
                raise ContractViolation("GRAM sketch needs at least one variable column plus the response")
            if k is not None and int(k) != self.d_total - 1:
                logger.warning("GRAM sketch ignores k=%s; using d_total - 1 = %d", k, self.d_total - 1)
            k = self.d_total - 1
        if k is None or int(k) < 1:
            raise ContractViolation(f"target dimension k must be >= 1, got {k}")
        self.k = int(k)
        if self.method is SketchMethod.CW and not is_power_of_two(self.k):
            raise ContractViolation(f"CW sketch needs a power-of-two k, got {self.k}")
        if self.method is SketchMethod.RAD and self.k > MAX_RAD_ROWS:
            raise ContractViolation(f"RAD sketch supports k <= {MAX_RAD_ROWS}")
        self.seed = seed if isinstance(seed, SketchSeed) else SketchSeed.from_master(seed)
        self.n_hint = None if n_hint is None else int(n_hint)
        if self.n_hint is not None and self.n_hint < 1:
            raise ContractViolation(f"n_hint must be >= 1, got {n_hint}")
        self.m = 0
        self._sampled_rows = None
        if self.method is SketchMethod.SRHT:
            if self.n_hint is None:
                raise ContractViolation("SRHT sketch needs n_hint to fix the padded dimension m")
            self.m = next_power_of_two(self.n_hint)
            self._sampled_rows = bucket2_array(self.seed, np.arange(self.k), self.m)
        self.block_mode = bool(block_mode) and self.method is SketchMethod.SRHT
        block_size = get_config('srht_block_size') if block_size is None else int(block_size)
        if not is_power_of_two(block_size):
            raise ContractViolation(f"SRHT block size must be a power of two, got {block_size}")
        self.block_size = min(block_size, self.m) if self.m else block_size
        self.acc = np.zeros((self.k, self.d_total))
        self.rows_seen = 0
        logger.debug("new %s builder k=%d d_total=%d m=%d", self.method.name, self.k, self.d_total, self.m)

    def __repr__(self):
        return (f"SketchBuilder(method={self.method.name}, k={self.k}, d_total={self.d_total}, "
                f"m={self.m}, rows_seen={self.rows_seen})")

    def signature(self):
        """Everything that must agree for two builders to be mergeable"""
        return (self.method, self.k, self.d_total, self.m, self.seed.master)

    def empty_like(self):
        return SketchBuilder(self.method, self.d_total, self.k, self.seed, n_hint=self.n_hint,
                             block_mode=self.block_mode, block_size=self.block_size)

    # -- index checks -------------------------------------------------------

    def _check_rows(self, start, count):
        if start < 0:
            raise ContractViolation(f"row index must be non-negative, got {start}")
        end = start + count
        if self.n_hint is not None and end > self.n_hint:
            raise ContractViolation(f"row index {end - 1} is outside the declared n_hint={self.n_hint}")
        if self.method is SketchMethod.SRHT and end > self.m:
            raise ContractViolation(f"row index {end - 1} >= padded SRHT dimension m={self.m}")
        if self.method is SketchMethod.RAD and end > MAX_RAD_INDEX:
            raise ContractViolation(f"RAD sketch supports row indices < 2^{RAD_ROW_STRIDE_BITS}")

    # -- accumulation kernels ----------------------------------------------

    def _chunk_rows(self):
        return max(1, DENSE_CHUNK_ENTRIES // self.k)

    def _accumulate(self, indices, rows):
        """acc += Pi[:, indices] @ rows for arbitrary (possibly repeated) indices"""
        if self.method is SketchMethod.CW:
            buckets = bucket2_array(self.seed, indices, self.k)
            signs = sign4_array(self.seed, indices)
            np.add.at(self.acc, buckets, signs[:, None] * rows)
            return
        if self.method is SketchMethod.GRAM:
            self.acc += rows[:, :-1].T @ rows
            return
        step = self._chunk_rows()
        for lo in range(0, len(indices), step):
            idx = indices[lo:lo + step]
            block = rows[lo:lo + step]
            self.acc += self._dense_columns(idx) @ block

    def _dense_columns(self, idx):
        """Explicit unscaled columns Pi[:, idx] for RAD and SRHT"""
        idx = np.asarray(idx, dtype=np.uint64)
        if self.method is SketchMethod.RAD:
            rows = np.arange(self.k, dtype=np.uint64) << np.uint64(RAD_ROW_STRIDE_BITS)
            return sign4_array(self.seed, rows[:, None] | idx[None, :])
        signs = sign4_array(self.seed, idx)
        return hadamard_entry_sign(self._sampled_rows[:, None], idx[None, :]) * signs[None, :]

    def _accumulate_srht_blocks(self, start, rows):
        """Aligned-block FWHT: H[r, base+t] = H[r, base] * H_B[r mod B, t] when base is a multiple of B"""
        B = self.block_size
        pos = 0
        total = rows.shape[0]
        while pos < total:
            gi = start + pos
            base = (gi // B) * B
            take = min(base + B - gi, total - pos)
            idx = np.arange(gi, gi + take)
            padded = np.zeros((B, self.d_total))
            padded[gi - base:gi - base + take] = sign4_array(self.seed, idx)[:, None] * rows[pos:pos + take]
            transformed = fwht(padded)
            outer = hadamard_entry_sign(self._sampled_rows, np.uint64(base))
            self.acc += outer[:, None] * transformed[self._sampled_rows & (B - 1)]
            pos += take

    # -- public API -----------------------------------------------------------

    def push_rows(self, start, rows):
        """Push a contiguous block of rows with global indices start, start+1, ..."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows.reshape(1, -1)
        if rows.ndim != 2 or rows.shape[1] != self.d_total:
            raise ContractViolation(f"rows must have {self.d_total} columns, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise NumericalFailure("rows contain non-finite values")
        count = rows.shape[0]
        if count == 0:
            return
        start = int(start)
        self._check_rows(start, count)
        if self.block_mode:
            self._accumulate_srht_blocks(start, rows)
        else:
            self._accumulate(np.arange(start, start + count), rows)
        self.rows_seen += count
        logger.debug("%s pushed rows [%d, %d)", self.method.name, start, start + count)

    def push_row(self, i, row):
        self.push_rows(i, np.asarray(row, dtype=np.float64).reshape(1, -1))

    def push_updates(self, i, j, u):
        """Batch of turnstile updates X[i_b, j_b] += u_b"""
        if self.method is SketchMethod.GRAM:
            raise ContractViolation("GRAM sketch is quadratic in the data and cannot take turnstile updates")
        i = np.asarray(i, dtype=np.int64).reshape(-1)
        j = np.asarray(j, dtype=np.int64).reshape(-1)
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        if not (len(i) == len(j) == len(u)):
            raise ContractViolation("update arrays must have equal length")
        if len(i) == 0:
            return
        if not np.all(np.isfinite(u)):
            raise NumericalFailure("update values contain non-finite entries")
        if j.min() < 0 or j.max() >= self.d_total:
            raise ContractViolation(f"column index outside [0, {self.d_total})")
        self._check_rows(int(i.min()), 1)
        self._check_rows(int(i.max()), 1)
        rows = np.zeros((len(i), self.d_total))
        rows[np.arange(len(i)), j] = u
        self._accumulate(i, rows)

    def push_update(self, t):
        """Single turnstile update; u = 0 is a no-op"""
        if t.u == 0:
            return
        self.push_updates([t.i], [t.j], [t.u])


def new_builder(method, d_total, k, n_hint=None, seed=0, block_mode=False, block_size=None):
    """Fresh builder with a zero accumulator"""
    return SketchBuilder(method, d_total, k, seed, n_hint=n_hint, block_mode=block_mode, block_size=block_size)


def merge(a, b):
    """Sum of two sketches of disjoint parts of the same stream"""
    if a.signature() != b.signature():
        raise MergeIncompatible(
            f"cannot merge {a!r} (seed {a.seed.master}) with {b!r} (seed {b.seed.master})")
    merged = a.empty_like()
    if a.n_hint is not None and b.n_hint is not None:
        merged.n_hint = max(a.n_hint, b.n_hint)
    merged.acc = a.acc + b.acc
    merged.rows_seen = a.rows_seen + b.rows_seen
    return merged


def finalize(builder):
    """The sketch [Pi X, Pi Y] as a k x d_total matrix"""
    if builder.method in (SketchMethod.RAD, SketchMethod.SRHT):
        return builder.acc / math.sqrt(builder.k)
    return builder.acc.copy()


def split_sketch(sketch):
    """Split a finalized k x d_total sketch into (Pi X, Pi Y)"""
    sketch = np.asarray(sketch, dtype=np.float64)
    return sketch[:, :-1], sketch[:, -1]


def gram_sketch(rows):
    """X^T [X, Y] accumulated as a sum of rank-one terms; d x (d+1)"""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ContractViolation(f"gram sketch needs rows of [X, Y] with >= 2 columns, got shape {rows.shape}")
    builder = SketchBuilder(SketchMethod.GRAM, rows.shape[1], None, 0)
    step = get_config('read_block_rows')
    for lo in range(0, rows.shape[0], step):
        builder.push_rows(lo, rows[lo:lo + step])
    return finalize(builder)


def sketch_dense(method, data, k, seed=0, n_hint=None, block_mode=False, block_size=None):
    """Sketch an in-memory [X, Y] matrix in read-sized blocks; returns the builder"""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ContractViolation(f"data must be 2-dimensional, got shape {data.shape}")
    method = SketchMethod.from_name(method)
    if method is SketchMethod.SRHT and n_hint is None:
        n_hint = max(data.shape[0], 1)
    builder = new_builder(method, data.shape[1], k, n_hint=n_hint, seed=seed,
                          block_mode=block_mode, block_size=block_size)
    step = get_config('read_block_rows')
    for lo in range(0, data.shape[0], step):
        builder.push_rows(lo, data[lo:lo + step])
    return builder


def sketch_blocks(template, blocks, threads=1):
    """Sketch a stream of (start, rows) blocks with `threads` builders and merge them

    Block b always goes to builder b % threads, and builders are merged in
    order, so the result does not depend on thread scheduling.
    """
    threads = max(1, int(threads))
    builders = [template.empty_like() for _ in range(threads)]
    if threads == 1:
        for start, rows in blocks:
            builders[0].push_rows(start, rows)
        return builders[0]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        group = []
        for start, rows in blocks:
            group.append((start, rows))
            if len(group) == threads:
                list(pool.map(lambda job: job[0].push_rows(*job[1]), zip(builders, group)))
                group = []
        if group:
            list(pool.map(lambda job: job[0].push_rows(*job[1]), zip(builders, group)))
    merged = builders[0]
    for other in builders[1:]:
        merged = merge(merged, other)
    return merged


def materialize_matrix(method, k, n, seed=0, n_hint=None):
    """Explicit k x n sketching matrix (scaled as finalize scales) for verification

    SRHT uses scipy's Sylvester Hadamard matrix, independently of the popcount
    formula the streaming path uses.
    """
    method = SketchMethod.from_name(method)
    seed = seed if isinstance(seed, SketchSeed) else SketchSeed.from_master(seed)
    idx = np.arange(n)
    if method is SketchMethod.RAD:
        rows = np.arange(k, dtype=np.uint64) << np.uint64(RAD_ROW_STRIDE_BITS)
        return sign4_array(seed, rows[:, None] | idx.astype(np.uint64)[None, :]) / math.sqrt(k)
    if method is SketchMethod.CW:
        Pi = np.zeros((k, n))
        Pi[bucket2_array(seed, idx, k), idx] = sign4_array(seed, idx)
        return Pi
    if method is SketchMethod.SRHT:
        m = next_power_of_two(n if n_hint is None else n_hint)
        H = scipy.linalg.hadamard(m).astype(np.float64)
        D = sign4_array(seed, np.arange(m))
        R = bucket2_array(seed, np.arange(k), m)
        return (H[R] * D[None, :])[:, :n] / math.sqrt(k)
    raise ContractViolation("GRAM sketching matrix depends on the data and cannot be materialized")


# ---------------------------------------------------------------------------
# SKRG sketch files
# ---------------------------------------------------------------------------

def write_sketch(builder, path):
    """Write the raw accumulator and its configuration as an SKRG file"""
    header = HEADER_STRUCT.pack(SKETCH_MAGIC, get_config('sketch_format_version'))
    seed = builder.seed.to_bytes(builder.method.value)
    sizes = SIZES_STRUCT.pack(builder.k, builder.d_total, builder.m, builder.rows_seen)
    payload = np.ascontiguousarray(builder.acc, dtype='<f8').tobytes()
    try:
        with open(path, 'wb') as f:
            f.write(header + seed + sizes + payload)
    except OSError as e:
        raise SketchIOError(f"cannot write sketch file {path}: {e}")
    logger.info("wrote %s sketch k=%d d_total=%d to %s", builder.method.name, builder.k, builder.d_total, path)


def read_sketch(path):
    """Load an SKRG file back into a builder (streaming can continue on it)"""
    try:
        with open(path, 'rb') as f:
            raw = f.read()
    except OSError as e:
        raise SketchIOError(f"cannot read sketch file {path}: {e}")
    fixed = HEADER_STRUCT.size + SEED_STRUCT.size + SIZES_STRUCT.size
    if len(raw) < fixed:
        raise SketchIOError(f"{path}: truncated sketch header")
    magic, version = HEADER_STRUCT.unpack_from(raw, 0)
    if magic != SKETCH_MAGIC:
        raise SketchIOError(f"{path}: not a sketch file (magic {magic!r})")
    if version != get_config('sketch_format_version'):
        raise SketchIOError(f"{path}: unsupported sketch format version {version}")
    tag, seed = SketchSeed.from_bytes(raw[HEADER_STRUCT.size:HEADER_STRUCT.size + SEED_STRUCT.size])
    method = SketchMethod.from_tag(tag)
    k, d_total, m, rows_seen = SIZES_STRUCT.unpack_from(raw, HEADER_STRUCT.size + SEED_STRUCT.size)
    expected = fixed + 8 * k * d_total
    if len(raw) != expected:
        raise SketchIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    try:
        builder = SketchBuilder(method, d_total, k, seed, n_hint=m if m else None)
    except ContractViolation as e:
        raise SketchIOError(f"{path}: inconsistent sketch header ({e})") from e
    builder.acc = np.frombuffer(raw, dtype='<f8', offset=fixed).reshape(k, d_total).astype(np.float64)
    builder.rows_seen = rows_seen
    return builder


def sketch_frame(builder):
    """Finalized sketch as a DataFrame with columns x0..x{d-1}, y"""
    columns = [f'x{j}' for j in range(builder.d_total - 1)] + ['y']
    return pd.DataFrame(finalize(builder), columns=columns)


def export_sketch_csv(builder, path):
    sketch_frame(builder).to_csv(path, index=False, float_format='%.17g')
