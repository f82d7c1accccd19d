"""Training loop, dense/sparse Adam and checkpoint files.

Checkpoint layout (little-endian)::

    magic  b"LKLM"
    u32    version
    u32    CRC32 of everything after this field
    config V, L, H, D_in, n, U, E_n (u32 each), include_current (u8),
           injection (u8), global step (u64)
    vocab  u32 count, then per token: u32 byte length + UTF-8 bytes
    dense  arrays in ``param_shapes`` order, raw f32
    tables u32 count, then one LKTB block per injected layer
    optim  u8 flag; when 1: u64 dense step, f64 beta1, beta2, eps,
           dense first moments, dense second moments (f32, same order),
           then per table: u32[U] update counts, LKTB first-moment block,
           LKTB second-moment block
"""

from __future__ import annotations

import fcntl
import io
import logging
import math
import struct
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import embedding_store as es
from .embedding_store import EmbeddingTable, SparseAdamState
from .ngram_hash import sequence_ids
from .rnnlm_core import (INJECTION_MODES, ModelConfig, batch_gradients, dense_param_count,
                         init_params, make_batch, param_shapes, sparse_param_count)
from .tokenizer import Vocab, encode, read_lines

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LKLM"
CKPT_VERSION = 1
_CONFIG = struct.Struct("<7IBBQ")
_ADAM = struct.Struct("<Qddd")


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr0: float = 1e-3
    decay_rate: float = 0.5
    decay_steps: float | None = None   # None: steps / 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    max_sentence_len: int = 64
    seed: int = 0
    table_init: float = es.DEFAULT_INIT_SCALE

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_sentence_len < 2:
            raise ValueError("max_sentence_len must be >= 2")

    @property
    def effective_decay_steps(self) -> float:
        if self.decay_steps is not None:
            return float(self.decay_steps)
        return max(1.0, self.steps / 4)


def lr_at_step(cfg: TrainConfig, t: float) -> float:
    return cfg.lr0 * cfg.decay_rate ** (t / cfg.effective_decay_steps)


@dataclass
class DenseAdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "DenseAdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, beta1, beta2, eps)

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)
            self.m[k] = m.astype(np.float32)
            self.v[k] = v.astype(np.float32)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    tables: list[EmbeddingTable]
    vocab: Vocab
    step: int = 0
    dense_opt: DenseAdamState | None = None
    sparse_opt: list[SparseAdamState] | None = None

    @property
    def dense_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def sparse_params(self) -> int:
        return sum(t.num_params for t in self.tables)


def table_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index + 1]).generate_state(1)[0])


def init_checkpoint(vocab: Vocab, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    table_dir=None) -> Checkpoint:
    if model_cfg.V != vocab.size:
        raise ValueError(f"model V={model_cfg.V} but vocab has {vocab.size} tokens")
    params = init_params(model_cfg, train_cfg.seed)
    tables = []
    for j, layer in enumerate(model_cfg.injected_layers):
        path = None if table_dir is None else Path(table_dir) / f"table_l{layer}.lktb"
        tables.append(es.create_table(model_cfg.U, model_cfg.E_n, train_cfg.table_init,
                                      seed=table_seed(train_cfg.seed, j), path=path))
    hyper = dict(beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    return Checkpoint(model_cfg, params, tables, vocab, 0,
                      DenseAdamState.zeros(params, **hyper),
                      [SparseAdamState(model_cfg.U, model_cfg.E_n, **hyper) for _ in tables])


def apply_sparse_adam(table: EmbeddingTable, state: SparseAdamState, rows: np.ndarray,
                      grads: np.ndarray, lr: float) -> None:
    es.sparse_adam_update_rows(table, state, rows, grads, lr)


def clip_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``clip_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > clip_norm:
        scale = clip_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class BatchSampler:
    """Seeded shuffling with epoch wraparound."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("no training sentences")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch_size - len(out), self.n - self.pos)
            out.extend(int(i) for i in self.order[self.pos:self.pos + take])
            self.pos += take
        return out


def prepare_sentences(lines: Sequence[str], vocab: Vocab, model_cfg: ModelConfig,
                      max_len: int) -> tuple[list[list[int]], list[np.ndarray]]:
    seqs = [encode(line, vocab)[:max_len] for line in lines]
    hcfg = model_cfg.hash_config
    rows = [sequence_ids(s, hcfg) for s in seqs] if model_cfg.injected_layers else [None] * len(seqs)
    return seqs, rows


def train_step(ckpt: Checkpoint, seqs, rows, train_cfg: TrainConfig) -> tuple[float, float]:
    """One optimiser step on a list of encoded sentences; returns (mean NLL, pre-clip norm)."""
    cfg = ckpt.config
    batch = make_batch(seqs, cfg, rows if cfg.injected_layers else None)
    n_pred = batch.num_predictions
    grads = batch_gradients(ckpt.params, cfg, ckpt.tables, batch, scale=1.0 / n_pred)
    mean_nll = grads.loss / n_pred
    if not math.isfinite(mean_nll):
        raise TrainingError(f"non-finite loss at step {ckpt.step}")
    norm = clip_global_norm(grads.dense, train_cfg.clip_norm)
    lr = lr_at_step(train_cfg, ckpt.step)
    ckpt.dense_opt.apply(ckpt.params, grads.dense, lr)
    for j, layer in enumerate(cfg.injected_layers):
        sg = grads.sparse[layer]
        apply_sparse_adam(ckpt.tables[j], ckpt.sparse_opt[j], sg.rows, sg.values, lr)
    ckpt.step += 1
    return mean_nll, norm


def train_sentences(lines: Sequence[str], vocab: Vocab, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, out_path=None, table_dir=None,
                    callback: Callable[[int, float, float], None] | None = None,
                    log_every: int = 50) -> Checkpoint:
    ckpt = init_checkpoint(vocab, model_cfg, train_cfg, table_dir)
    seqs, rows = prepare_sentences(lines, vocab, model_cfg, train_cfg.max_sentence_len)
    if train_cfg.steps:
        sampler = BatchSampler(len(seqs), train_cfg.batch_size, train_cfg.seed)
    for _ in range(train_cfg.steps):
        idx = sampler.next()
        lr = lr_at_step(train_cfg, ckpt.step)
        try:
            mean_nll, _ = train_step(ckpt, [seqs[i] for i in idx], [rows[i] for i in idx], train_cfg)
        except FloatingPointError as exc:
            raise TrainingError(f"step {ckpt.step}: {exc}") from exc
        if callback is not None:
            callback(ckpt.step - 1, lr, mean_nll)
        if log_every and ((ckpt.step - 1) % log_every == 0 or ckpt.step == train_cfg.steps):
            log.info("step=%d lr=%.6g nll=%.4f", ckpt.step - 1, lr, mean_nll)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt


def train(corpus_path, vocab: Vocab, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_path=None, **kwargs) -> Checkpoint:
    return train_sentences(list(read_lines(corpus_path)), vocab, model_cfg, train_cfg,
                           out_path, **kwargs)


# ---------------------------------------------------------------------------
# serialisation


class _CrcWriter:
    def __init__(self, f):
        self.f = f
        self.crc = 0

    def write(self, data: bytes) -> None:
        self.crc = zlib.crc32(data, self.crc)
        self.f.write(data)


def _table_of(values: np.ndarray) -> EmbeddingTable:
    return EmbeddingTable(np.ascontiguousarray(values, dtype=es.F32))


@contextmanager
def checkpoint_lock(path):
    """Advisory exclusive lock held while a checkpoint file is written."""
    lock_path = Path(str(path) + ".lock")
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def write_checkpoint(ckpt: Checkpoint, f) -> None:
    cfg = ckpt.config
    f.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + b"\0\0\0\0")
    w = _CrcWriter(f)
    w.write(_CONFIG.pack(cfg.V, cfg.L, cfg.H, cfg.D_in, cfg.n, cfg.U, cfg.E_n,
                         int(cfg.include_current), INJECTION_MODES.index(cfg.injection), ckpt.step))
    w.write(struct.pack("<I", ckpt.vocab.size))
    for tok in ckpt.vocab.tokens:
        raw = tok.encode("utf-8")
        w.write(struct.pack("<I", len(raw)) + raw)
    for name in param_shapes(cfg):
        w.write(np.ascontiguousarray(ckpt.params[name], dtype=es.F32).tobytes())
    w.write(struct.pack("<I", len(ckpt.tables)))
    for table in ckpt.tables:
        es.write_table_block(w, table)
    has_opt = ckpt.dense_opt is not None and ckpt.sparse_opt is not None
    w.write(struct.pack("<B", int(has_opt)))
    if has_opt:
        d = ckpt.dense_opt
        w.write(_ADAM.pack(d.step, d.beta1, d.beta2, d.eps))
        for moments in (d.m, d.v):
            for name in param_shapes(cfg):
                w.write(np.ascontiguousarray(moments[name], dtype=es.F32).tobytes())
        for state in ckpt.sparse_opt:
            w.write(np.ascontiguousarray(state.counts, dtype="<u4").tobytes())
            m, v = state.dense_moments()
            es.write_table_block(w, _table_of(m))
            es.write_table_block(w, _table_of(v))
    f.seek(8)
    f.write(struct.pack("<I", w.crc))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with checkpoint_lock(path):
        with open(tmp, "wb") as f:
            write_checkpoint(ckpt, f)
        tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct | str):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, shape, dtype=es.F32) -> np.ndarray:
        dtype = np.dtype(dtype)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()

    def table(self) -> np.ndarray:
        try:
            values, self.pos = es.read_table_block(self.buf, self.pos)
        except es.TableFormatError as exc:
            raise CheckpointError(str(exc)) from exc
        return values


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {bytes(data[:4])!r}")
    version, crc = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = memoryview(data)[12:]
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(payload)
    V, L, H, D_in, n, U, E_n, inc, inj, step = r.unpack(_CONFIG)
    if inj >= len(INJECTION_MODES):
        raise CheckpointError(f"bad injection code {inj}")
    cfg = ModelConfig(V=V, L=L, H=H, D_in=D_in, n=n, U=U, E_n=E_n,
                      include_current=bool(inc), injection=INJECTION_MODES[inj])
    (count,) = r.unpack("<I")
    tokens = []
    for _ in range(count):
        (size,) = r.unpack("<I")
        tokens.append(bytes(r.take(size)).decode("utf-8"))
    vocab = Vocab(tokens)
    shapes = param_shapes(cfg)
    params = {name: r.array(shape) for name, shape in shapes.items()}
    (n_tables,) = r.unpack("<I")
    if n_tables != len(cfg.injected_layers):
        raise CheckpointError(f"{n_tables} tables stored but config injects {len(cfg.injected_layers)}")
    tables = [EmbeddingTable(r.table()) for _ in range(n_tables)]
    (has_opt,) = r.unpack("<B")
    dense_opt = sparse_opt = None
    if has_opt:
        dstep, b1, b2, eps = r.unpack(_ADAM)
        m = {name: r.array(shape) for name, shape in shapes.items()}
        v = {name: r.array(shape) for name, shape in shapes.items()}
        dense_opt = DenseAdamState(dstep, m, v, b1, b2, eps)
        sparse_opt = []
        for _ in range(n_tables):
            counts = r.array((U,), "<u4")
            sm, sv = r.table(), r.table()
            sparse_opt.append(SparseAdamState.from_dense(counts, sm, sv, beta1=b1, beta2=b2, eps=eps))
    if r.pos != len(payload):
        raise CheckpointError(f"{len(payload) - r.pos} trailing bytes in checkpoint")
    return Checkpoint(cfg, params, tables, vocab, step, dense_opt, sparse_opt)


def load_checkpoint(path) -> Checkpoint:
    ckpt = parse_checkpoint(Path(path).read_bytes())
    log.info("loaded %s: dense_params=%d sparse_params=%d step=%d",
             path, ckpt.dense_params, ckpt.sparse_params, ckpt.step)
    if ckpt.dense_params != dense_param_count(ckpt.config):
        raise CheckpointError("dense parameter count disagrees with config")
    if ckpt.sparse_params != sparse_param_count(ckpt.config):
        raise CheckpointError("sparse parameter count disagrees with config")
    return ckpt


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(ckpt, buf)
    return buf.getvalue()
