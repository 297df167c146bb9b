"""
Data ingestion, file formats and the synthetic regression generator

Sources are read as streams of (start_index, block) pairs so arbitrarily long
inputs can be sketched in a single pass with O(block) memory.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
import pandas as pd

from sketch_utils import UpdateTriple
from sketchreg_config import get_config
from sketchreg_errors import ContractViolation, NumericalFailure, SketchIOError

logger = logging.getLogger(__name__)

DATA_MAGIC = b'SKDT'
DATA_HEADER = struct.Struct('<4sHQQ')


@dataclass
class RowStream:
    """A single-pass source of rows of [X, Y] (or of update triples)

    kind is one of 'csv', 'bin', 'memory', 'updates'. Rows are yielded exactly
    once, in source order.
    """
    kind: str
    source: object
    d_total: int
    n_hint: int = None
    has_header: bool = False
    add_intercept: bool = False

    @property
    def width(self):
        """Column count after the optional intercept column"""
        return self.d_total + (1 if self.add_intercept else 0)

    def iter_blocks(self, block_rows=None):
        """Yield (start, block) with block of shape (<= block_rows, width)"""
        if self.kind == 'updates':
            raise ContractViolation("an update stream has no rows; use iter_updates")
        block_rows = block_rows or get_config('read_block_rows')
        if self.kind == 'memory':
            blocks = _memory_blocks(self.source, block_rows)
        elif self.kind == 'csv':
            blocks = _csv_blocks(self.source, self.d_total, self.has_header, block_rows)
        elif self.kind == 'bin':
            blocks = _binary_blocks(self.source, block_rows)
        else:
            raise ContractViolation(f"unknown stream kind {self.kind!r}")
        for start, block in blocks:
            if self.add_intercept:
                block = add_intercept(block)
            yield start, block

    def __iter__(self):
        for _, block in self.iter_blocks():
            yield from block

    def iter_updates(self, block_rows=None):
        """Yield (i, j, u) array batches from an update-triple file"""
        if self.kind != 'updates':
            raise ContractViolation(f"{self.kind} stream has no update triples")
        yield from _update_batches(self.source, block_rows or get_config('read_block_rows'))

    def to_matrix(self):
        """Materialise the whole stream (small inputs and tests only)"""
        if self.kind == 'updates':
            return materialize_updates(self, self.n_hint or 0, self.d_total)
        blocks = [block for _, block in self.iter_blocks()]
        if not blocks:
            return np.zeros((0, self.width))
        return np.vstack(blocks)


def _memory_blocks(matrix, block_rows):
    for lo in range(0, matrix.shape[0], block_rows):
        yield lo, matrix[lo:lo + block_rows]


def from_matrix(matrix, add_intercept=False):
    """Wrap an in-memory [X, Y] matrix as a RowStream"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractViolation(f"data must be 2-dimensional, got shape {matrix.shape}")
    return RowStream('memory', matrix, matrix.shape[1], n_hint=matrix.shape[0], add_intercept=add_intercept)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _sniff_width(path, has_header):
    try:
        with open(path, 'r') as f:
            if has_header:
                f.readline()
            for line in f:
                if line.strip():
                    return len(line.rstrip('\r\n').split(','))
    except OSError as e:
        raise SketchIOError(f"cannot read {path}: {e}")
    return 0


def _csv_blocks(path, d_total, has_header, block_rows):
    if d_total == 0:
        return
    try:
        reader = pd.read_csv(path, header=None, skiprows=1 if has_header else 0, dtype=str,
                             keep_default_na=False, names=range(d_total), chunksize=block_rows,
                             skip_blank_lines=True)
        start = 0
        for chunk in reader:
            numeric = chunk.apply(pd.to_numeric, errors='coerce')
            bad = numeric.isna().to_numpy()
            if bad.any():
                r, c = np.argwhere(bad)[0]
                cell = chunk.iat[r, c]
                row_number = start + r + (1 if has_header else 0)
                if pd.isna(cell):
                    raise ContractViolation(f"{path}: ragged row {row_number} (missing column {c})")
                raise ContractViolation(f"{path}: non-numeric cell {cell!r} at row {row_number}, column {c}")
            # float() is correctly rounded, so %.17g text comes back bit-exact
            block = chunk.to_numpy(dtype=object).astype(np.float64)
            if not np.all(np.isfinite(block)):
                raise NumericalFailure(f"{path}: non-finite value in rows {start}..{start + len(block) - 1}")
            yield start, block
            start += len(block)
    except pd.errors.ParserError as e:
        raise ContractViolation(f"{path}: ragged rows ({e})")
    except OSError as e:
        raise SketchIOError(f"cannot read {path}: {e}")


def read_csv(path, has_header=False, add_intercept=False):
    """Rectangular numeric CSV; the response is the last column"""
    d_total = _sniff_width(path, has_header)
    logger.info("csv %s: %d columns", path, d_total)
    return RowStream('csv', path, d_total, has_header=has_header, add_intercept=add_intercept)


def read_matrix(path):
    """Small headerless numeric CSV (prior mean or prior S) loaded whole"""
    try:
        frame = pd.read_csv(path, header=None)
    except pd.errors.EmptyDataError:
        raise ContractViolation(f"{path} is empty")
    except pd.errors.ParserError as e:
        raise ContractViolation(f"{path}: ragged rows ({e})")
    except OSError as e:
        raise SketchIOError(f"cannot read {path}: {e}")
    try:
        return frame.to_numpy(dtype=np.float64)
    except ValueError as e:
        raise ContractViolation(f"{path}: non-numeric content ({e})")


def read_vector(path):
    """One number per line, or a single comma-separated row"""
    return read_matrix(path).reshape(-1)


def write_csv(matrix, path, header=None):
    frame = pd.DataFrame(np.asarray(matrix, dtype=np.float64))
    frame.to_csv(path, index=False, header=header if header is not None else False, float_format='%.17g')


def export_tables(tables, path, fmt='csv'):
    """Write named DataFrames as csv, xlsx or json; returns the paths written

    csv writes the first table to path and every further table to
    <stem>.<name>.csv; xlsx puts each table on its own sheet; json nests the
    record lists under their names.
    """
    if fmt not in get_config('export_formats'):
        raise ContractViolation(f"unknown export format {fmt!r}; expected one of {get_config('export_formats')}")
    names = list(tables)
    try:
        if fmt == 'csv':
            written = [path]
            tables[names[0]].to_csv(path, index=False, float_format='%.17g')
            stem = path[:-4] if path.endswith('.csv') else path
            for name in names[1:]:
                extra = f"{stem}.{name}.csv"
                tables[name].to_csv(extra, index=False, float_format='%.17g')
                written.append(extra)
            return written
        if fmt == 'xlsx':
            with pd.ExcelWriter(path, engine='openpyxl') as writer:
                for name in names:
                    tables[name].to_excel(writer, sheet_name=name[:31], index=False)
            return [path]
        combined = {name: tables[name].to_dict('records') for name in names}
        with open(path, 'w') as f:
            json.dump(combined, f, indent=2, default=str)
        return [path]
    except OSError as e:
        raise SketchIOError(f"cannot write {path}: {e}")


# ---------------------------------------------------------------------------
# SKDT binary
# ---------------------------------------------------------------------------

def _read_data_header(f, path):
    raw = f.read(DATA_HEADER.size)
    if len(raw) != DATA_HEADER.size:
        raise SketchIOError(f"{path}: truncated data header")
    magic, version, n, d_total = DATA_HEADER.unpack(raw)
    if magic != DATA_MAGIC:
        raise SketchIOError(f"{path}: not a data file (magic {magic!r})")
    if version != get_config('data_format_version'):
        raise SketchIOError(f"{path}: unsupported data format version {version}")
    return n, d_total


def write_binary(matrix, path):
    """SKDT: magic, u16 version, u64 n, u64 d_total, f64 row-major little-endian"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractViolation(f"data must be 2-dimensional, got shape {matrix.shape}")
    n, d_total = matrix.shape
    try:
        with open(path, 'wb') as f:
            f.write(DATA_HEADER.pack(DATA_MAGIC, get_config('data_format_version'), n, d_total))
            f.write(np.ascontiguousarray(matrix, dtype='<f8').tobytes())
    except OSError as e:
        raise SketchIOError(f"cannot write {path}: {e}")


class BinaryWriter:
    """Append blocks to an SKDT file whose row count is patched on close"""

    def __init__(self, path, d_total):
        self.path = path
        self.d_total = int(d_total)
        self.n = 0
        try:
            self._f = open(path, 'wb')
        except OSError as e:
            raise SketchIOError(f"cannot write {path}: {e}")
        self._f.write(DATA_HEADER.pack(DATA_MAGIC, get_config('data_format_version'), 0, self.d_total))

    def write(self, block):
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != self.d_total:
            raise ContractViolation(f"block must have {self.d_total} columns, got shape {block.shape}")
        self._f.write(np.ascontiguousarray(block, dtype='<f8').tobytes())
        self.n += block.shape[0]

    def close(self):
        self._f.seek(0)
        self._f.write(DATA_HEADER.pack(DATA_MAGIC, get_config('data_format_version'), self.n, self.d_total))
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _binary_blocks(path, block_rows):
    try:
        with open(path, 'rb') as f:
            n, d_total = _read_data_header(f, path)
            start = 0
            while start < n:
                count = min(block_rows, n - start)
                block = np.fromfile(f, dtype='<f8', count=count * d_total)
                if block.size != count * d_total:
                    raise SketchIOError(f"{path}: truncated after {start} rows")
                yield start, block.reshape(count, d_total).astype(np.float64)
                start += count
    except OSError as e:
        if isinstance(e, SketchIOError):
            raise
        raise SketchIOError(f"cannot read {path}: {e}")


def read_binary(path, add_intercept=False):
    try:
        with open(path, 'rb') as f:
            n, d_total = _read_data_header(f, path)
    except OSError as e:
        if isinstance(e, SketchIOError):
            raise
        raise SketchIOError(f"cannot read {path}: {e}")
    return RowStream('bin', path, d_total, n_hint=n, add_intercept=add_intercept)


# ---------------------------------------------------------------------------
# turnstile update files: "i,j,u" per line
# ---------------------------------------------------------------------------

def _update_batches(path, block_rows):
    try:
        reader = pd.read_csv(path, header=None, names=['i', 'j', 'u'], chunksize=block_rows,
                             dtype={'i': np.int64, 'j': np.int64, 'u': np.float64})
        for chunk in reader:
            if chunk.isna().to_numpy().any():
                raise ContractViolation(f"{path}: malformed update line")
            yield chunk['i'].to_numpy(), chunk['j'].to_numpy(), chunk['u'].to_numpy()
    except pd.errors.EmptyDataError:
        return
    except (ValueError, pd.errors.ParserError) as e:
        if isinstance(e, ContractViolation):
            raise
        raise ContractViolation(f"{path}: malformed update file ({e})")
    except OSError as e:
        raise SketchIOError(f"cannot read {path}: {e}")


def read_updates(path, d_total, n_hint=None):
    """Update-triple stream; duplicates and negative u are allowed"""
    return RowStream('updates', path, int(d_total), n_hint=n_hint)


def iter_update_triples(stream):
    for i, j, u in stream.iter_updates():
        for ii, jj, uu in zip(i, j, u):
            yield UpdateTriple(int(ii), int(jj), float(uu))


def materialize_updates(stream, n, d_total):
    """Dense n x d_total matrix from an update stream (X_ij = sum of its updates)"""
    X = np.zeros((int(n), int(d_total)))
    for i, j, u in stream.iter_updates():
        if len(i) and (i.min() < 0 or i.max() >= n or j.min() < 0 or j.max() >= d_total):
            raise ContractViolation("update index outside the declared matrix shape")
        np.add.at(X, (i, j), u)
    return X


def write_updates(i, j, u, path):
    frame = pd.DataFrame({'i': np.asarray(i, dtype=np.int64), 'j': np.asarray(j, dtype=np.int64),
                          'u': np.asarray(u, dtype=np.float64)})
    frame.to_csv(path, index=False, header=False, float_format='%.17g')


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n: int
    d: int
    sigma: float
    seed: int = 0
    zero_inflation: float = 0.5
    poisson_mean: float = 3.0
    col_mean_sd: float = 5.0
    x_var: float = 4.0
    add_intercept: bool = False

    def validate(self):
        if self.n < 1 or self.d < 1:
            raise ContractViolation(f"n and d must be positive, got n={self.n}, d={self.d}")
        if not self.sigma > 0:
            raise ContractViolation(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.zero_inflation <= 1.0:
            raise ContractViolation(f"zero_inflation must be a probability, got {self.zero_inflation}")
        if self.poisson_mean < 0 or self.col_mean_sd < 0 or not self.x_var > 0:
            raise ContractViolation("poisson_mean, col_mean_sd must be >= 0 and x_var > 0")


def simulate_beta(cfg, rng, size):
    """Zero-inflated Poisson coefficients with a random sign on each draw"""
    beta = rng.poisson(cfg.poisson_mean, size=size).astype(np.float64)
    beta *= rng.choice([-1.0, 1.0], size=size)
    beta[rng.random(size) < cfg.zero_inflation] = 0.0
    return beta


def simulate_parameters(cfg):
    """(beta_true, column means, block rng seeds); beta includes the intercept when requested"""
    cfg.validate()
    param_seq, x_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    rng = np.random.default_rng(param_seq)
    beta = simulate_beta(cfg, rng, cfg.d)
    col_means = rng.normal(0.0, cfg.col_mean_sd, size=cfg.d)
    if cfg.add_intercept:
        beta = np.concatenate([simulate_beta(cfg, rng, 1), beta])
    return beta, col_means, (x_seq, noise_seq)


def simulate_blocks(cfg, block_rows=None):
    """Yield (start, X_block, Y_block) so large designs never sit in memory

    X and the noise come from separate generators, so the concatenated
    blocks do not depend on where the blocks are cut.
    """
    beta, col_means, (x_seq, noise_seq) = simulate_parameters(cfg)
    x_rng = np.random.default_rng(x_seq)
    noise_rng = np.random.default_rng(noise_seq)
    block_rows = block_rows or get_config('read_block_rows')
    for start in range(0, cfg.n, block_rows):
        rows = min(block_rows, cfg.n - start)
        X = x_rng.normal(col_means, math.sqrt(cfg.x_var), size=(rows, cfg.d))
        if cfg.add_intercept:
            X = np.hstack([np.ones((rows, 1)), X])
        Y = X @ beta + noise_rng.normal(0.0, cfg.sigma, size=rows)
        yield start, X, Y


def simulate(cfg):
    """Regression data (X, Y, beta_true): Y = X beta + N(0, sigma^2 I)

    Column means ~ N(0, col_mean_sd^2), X_ij ~ N(mu_j, x_var).
    """
    beta = simulate_parameters(cfg)[0]
    parts = list(simulate_blocks(cfg))
    X = np.vstack([X for _, X, _ in parts])
    Y = np.concatenate([Y for _, _, Y in parts])
    logger.debug("simulated n=%d d=%d sigma=%g (%d zero coefficients)", cfg.n, cfg.d, cfg.sigma,
                 int(np.sum(beta == 0)))
    return X, Y, beta


def add_intercept(X):
    """Prepend a column of ones"""
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([np.ones((X.shape[0], 1)), X])
