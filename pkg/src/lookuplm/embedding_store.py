"""U x E embedding tables held in memory or in a memory-mapped file.

Table file layout (little-endian)::

    magic  b"LKTB"
    u32    version
    u64    rows (U)
    u32    columns (E)
    f32    U * E values, row-major

The same block is embedded verbatim inside checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

TABLE_MAGIC = b"LKTB"
TABLE_VERSION = 1
_HEADER = struct.Struct("<4sIQI")
HEADER_SIZE = _HEADER.size
DEFAULT_INIT_SCALE = 0.05
# rows drawn per generator call; fixed so both backends see one random stream
_INIT_CHUNK_ROWS = 4096
DEFAULT_MAX_ELEMENTS = 1 << 31

F32 = np.dtype("<f4")


class TableFormatError(ValueError):
    pass


class EmbeddingTable:
    """Row-addressable float32 matrix.

    ``values`` is a plain ndarray for the in-memory backend and an
    ``np.memmap`` over the table file for the file-backed one; all reads and
    writes go through the same code either way.
    """

    def __init__(self, values: np.ndarray, path: Path | None = None):
        if values.ndim != 2 or values.dtype != F32:
            raise TypeError("table values must be a 2-D little-endian float32 array")
        self.values = values
        self.path = path

    @property
    def U(self) -> int:
        return self.values.shape[0]

    @property
    def E(self) -> int:
        return self.values.shape[1]

    @property
    def backend(self) -> str:
        return "file" if self.path is not None else "memory"

    @property
    def num_params(self) -> int:
        return self.U * self.E

    def _check(self, row: int) -> int:
        row = int(row)
        if row < 0 or row >= self.U:
            raise IndexError(f"row {row} outside [0, {self.U})")
        return row

    def lookup(self, row: int) -> np.ndarray:
        return np.array(self.values[self._check(row)])

    def lookup_rows(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.U):
            raise IndexError(f"row ids outside [0, {self.U})")
        return np.asarray(self.values[rows])

    def write_row(self, row: int, vec) -> None:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.E,):
            raise ValueError(f"row must have length {self.E}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("non-finite values written to table")
        self.values[self._check(row)] = vec

    def fill(self, value: float) -> None:
        self.values[...] = value

    def flush(self) -> None:
        if isinstance(self.values, np.memmap):
            self.values.flush()

    def close(self) -> None:
        self.flush()
        if isinstance(self.values, np.memmap):
            mm = self.values._mmap
            self.values = np.array(self.values)
            if mm is not None:
                mm.close()
            self.path = None

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(np.array(self.values))

    def tobytes(self) -> bytes:
        return _HEADER.pack(TABLE_MAGIC, TABLE_VERSION, self.U, self.E) + self.values.tobytes()


def _init_rows(U: int, E: int, init_scale: float, seed: int):
    rng = np.random.default_rng(seed)
    for start in range(0, U, _INIT_CHUNK_ROWS):
        stop = min(U, start + _INIT_CHUNK_ROWS)
        if init_scale == 0:
            yield start, stop, np.zeros((stop - start, E), dtype=F32)
        else:
            block = rng.uniform(-init_scale, init_scale, size=(stop - start, E))
            yield start, stop, block.astype(F32)


def create_table(U: int, E: int, init_scale: float = DEFAULT_INIT_SCALE, seed: int = 0,
                 path=None, max_elements: int = DEFAULT_MAX_ELEMENTS) -> EmbeddingTable:
    """New table with values i.i.d. uniform in ``[-init_scale, init_scale]``.

    With ``path`` the table is created as a file and memory-mapped.
    """
    if U < 1 or E < 1:
        raise ValueError(f"table shape must be positive, got {U}x{E}")
    if U * E > max_elements:
        raise MemoryError(f"table {U}x{E} exceeds storage budget of {max_elements} values")
    if path is None:
        values = np.empty((U, E), dtype=F32)
    else:
        path = Path(path)
        with open(path, "wb") as f:
            f.write(_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, U, E))
            f.truncate(HEADER_SIZE + U * E * 4)
        values = np.memmap(path, dtype=F32, mode="r+", offset=HEADER_SIZE, shape=(U, E))
    for start, stop, block in _init_rows(U, E, init_scale, seed):
        values[start:stop] = block
    table = EmbeddingTable(values, path)
    table.flush()
    return table


def read_header(buf: bytes) -> tuple[int, int]:
    if len(buf) < HEADER_SIZE:
        raise TableFormatError("short table header")
    magic, version, U, E = _HEADER.unpack(buf[:HEADER_SIZE])
    if magic != TABLE_MAGIC:
        raise TableFormatError(f"bad table magic {magic!r}")
    if version != TABLE_VERSION:
        raise TableFormatError(f"unsupported table version {version}")
    if U < 1 or E < 1:
        raise TableFormatError(f"bad table shape {U}x{E}")
    return U, E


def open_file_backed(path, mode: str = "r+") -> EmbeddingTable:
    path = Path(path)
    with open(path, "rb") as f:
        U, E = read_header(f.read(HEADER_SIZE))
    expected = HEADER_SIZE + U * E * 4
    actual = path.stat().st_size
    if actual != expected:
        raise TableFormatError(f"{path}: size {actual} != expected {expected}")
    values = np.memmap(path, dtype=F32, mode=mode, offset=HEADER_SIZE, shape=(U, E))
    return EmbeddingTable(values, path)


def write_table_block(f: BinaryIO, table: EmbeddingTable) -> None:
    f.write(_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, table.U, table.E))
    # copy in chunks so memmapped tables are not fully materialised
    for start in range(0, table.U, _INIT_CHUNK_ROWS):
        f.write(np.ascontiguousarray(table.values[start:start + _INIT_CHUNK_ROWS]).tobytes())


def read_table_block(buf: memoryview, offset: int) -> tuple[np.ndarray, int]:
    U, E = read_header(bytes(buf[offset:offset + HEADER_SIZE]))
    start = offset + HEADER_SIZE
    stop = start + U * E * 4
    if stop > len(buf):
        raise TableFormatError("truncated table block")
    values = np.frombuffer(buf[start:stop], dtype=F32).reshape(U, E).copy()
    return values, stop


@dataclass
class SparseAdamState:
    """Lazy Adam moments: only rows that have been updated hold ``m``/``v``."""

    U: int
    E: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    counts: np.ndarray = field(default=None)
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.U, dtype=np.uint32)

    def moments(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        if row in self.m:
            return self.m[row], self.v[row]
        zero = np.zeros(self.E, dtype=F32)
        return zero, zero.copy()

    def dense_moments(self) -> tuple[np.ndarray, np.ndarray]:
        m = np.zeros((self.U, self.E), dtype=F32)
        v = np.zeros((self.U, self.E), dtype=F32)
        for row in self.m:
            m[row] = self.m[row]
            v[row] = self.v[row]
        return m, v

    @classmethod
    def from_dense(cls, counts, m, v, **hyper) -> "SparseAdamState":
        U, E = m.shape
        state = cls(U, E, counts=np.asarray(counts, dtype=np.uint32).copy(), **hyper)
        for row in np.flatnonzero(state.counts):
            state.m[int(row)] = m[row].copy()
            state.v[int(row)] = v[row].copy()
        return state


def sparse_adam_update(table: EmbeddingTable, state: SparseAdamState, row: int,
                       grad, lr: float) -> None:
    """One Adam step on a single row, bias-corrected by that row's own update count."""
    sparse_adam_update_rows(table, state, [row], np.asarray(grad)[None, :], lr)


def sparse_adam_update_rows(table: EmbeddingTable, state: SparseAdamState, rows,
                            grads, lr: float) -> None:
    """Apply ``sparse_adam_update`` to several distinct rows in one pass.

    Identical, element for element, to updating the rows one at a time.
    """
    rows = np.asarray(rows, dtype=np.int64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != (len(rows), table.E):
        raise ValueError(f"gradients must have shape ({len(rows)}, {table.E})")
    if len(rows) == 0:
        return
    if rows.min() < 0 or rows.max() >= table.U:
        raise IndexError(f"row ids outside [0, {table.U})")
    if len(np.unique(rows)) != len(rows):
        raise ValueError("rows must be distinct")
    if not np.all(np.isfinite(grads)):
        bad = rows[~np.all(np.isfinite(grads), axis=1)]
        raise FloatingPointError(f"non-finite gradient for rows {bad.tolist()}")
    keys = rows.tolist()
    m = np.stack([state.moments(r)[0] for r in keys]).astype(np.float64)
    v = np.stack([state.moments(r)[1] for r in keys]).astype(np.float64)
    count = state.counts[rows].astype(np.float64) + 1.0
    b1, b2 = state.beta1, state.beta2
    m = b1 * m + (1.0 - b1) * grads
    v = b2 * v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - np.power(b1, count))[:, None]
    v_hat = v / (1.0 - np.power(b2, count))[:, None]
    new = table.values[rows].astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = new.astype(F32)
    if not np.all(np.isfinite(new)):
        raise FloatingPointError("update produced non-finite table values")
    table.values[rows] = new
    state.counts[rows] += 1
    m32, v32 = m.astype(F32), v.astype(F32)
    for i, r in enumerate(keys):
        state.m[r] = m32[i]
        state.v[r] = v32[i]
