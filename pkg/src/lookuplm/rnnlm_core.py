"""Layer-normalised LSTM language model with per-layer n-gram embedding injection.

At every step the model hashes a window of recent tokens to one row id and
reads that row from each injected layer's own table.  The row is
concatenated onto the layer input (the token embedding for layer 0, the
hidden state of the layer below otherwise) before the LSTM cell.

The forward and backward passes are plain numpy.  Parameters are stored in
float32 but all arithmetic runs in float64; passing float64 parameters and
tables therefore gives a full 64-bit model, which the gradient checks use.

Gate layout inside the ``4H`` pre-activation is (input, forget, cell, output).
Layer norm is applied separately to the input-to-gate and hidden-to-gate sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ngram_hash import HashConfig, sequence_ids, ngram2id, window_at_step
from .tokenizer import EOS

LN_EPS = 1e-5
INJECTION_MODES = ("every-layer", "layer0-only", "none")
LAYER_PARAMS = ("w_ih", "w_hh", "bias", "ln_ih_gain", "ln_ih_bias", "ln_hh_gain", "ln_hh_bias")


@dataclass(frozen=True)
class ModelConfig:
    V: int
    L: int = 2
    H: int = 32
    D_in: int = 16
    n: int = 4
    U: int = 1024
    E_n: int = 16
    include_current: bool = False
    injection: str = "every-layer"

    def __post_init__(self):
        for name in ("V", "L", "H", "D_in", "n", "U", "E_n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"injection must be one of {INJECTION_MODES}, got {self.injection!r}")

    @property
    def injected_layers(self) -> tuple[int, ...]:
        if self.injection == "every-layer":
            return tuple(range(self.L))
        if self.injection == "layer0-only":
            return (0,)
        return ()

    @property
    def hash_config(self) -> HashConfig:
        return HashConfig(V=self.V, U=self.U, n=self.n, include_current=self.include_current)

    def input_width(self, layer: int) -> int:
        base = self.D_in if layer == 0 else self.H
        return base + (self.E_n if layer in self.injected_layers else 0)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Dense parameter names and shapes, in serialisation order."""
    H4 = 4 * cfg.H
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.V, cfg.D_in)}
    for l in range(cfg.L):
        shapes[f"l{l}.w_ih"] = (cfg.input_width(l), H4)
        shapes[f"l{l}.w_hh"] = (cfg.H, H4)
        for name in LAYER_PARAMS[2:]:
            shapes[f"l{l}.{name}"] = (H4,)
    shapes["softmax_w"] = (cfg.H, cfg.V)
    shapes["softmax_b"] = (cfg.V,)
    return shapes


def dense_param_count(cfg: ModelConfig) -> int:
    """Closed form: V*D_in + sum_l 4H(in_l + H + 5) + (H + 1)V."""
    H = cfg.H
    layers = sum(4 * H * (cfg.input_width(l) + H + 1) + 16 * H for l in range(cfg.L))
    return cfg.V * cfg.D_in + layers + (H + 1) * cfg.V


def sparse_param_count(cfg: ModelConfig) -> int:
    return len(cfg.injected_layers) * cfg.U * cfg.E_n


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "embedding":
            value = rng.uniform(-0.1, 0.1, size=shape)
        elif name.endswith(("w_ih", "w_hh", "softmax_w")):
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("_gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
            value[cfg.H:2 * cfg.H] = 1.0  # forget gate
        else:
            value = np.zeros(shape)
        params[name] = value.astype(np.float32)
    return params


# ---------------------------------------------------------------------------
# primitives


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    """Normalise over the last axis with the population variance."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = d * inv
    return xhat * gain + bias, (xhat, inv)


def _ln_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _gather(table, rows) -> np.ndarray:
    if isinstance(table, np.ndarray):
        if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
            raise IndexError(f"row ids outside [0, {table.shape[0]})")
        return table[rows].astype(np.float64)
    return table.lookup_rows(rows).astype(np.float64)


def _as64(params):
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def _check_tables(cfg: ModelConfig, tables):
    if len(tables) != len(cfg.injected_layers):
        raise ValueError(f"{cfg.injection} needs {len(cfg.injected_layers)} tables, got {len(tables)}")
    for t in tables:
        shape = t.shape if isinstance(t, np.ndarray) else (t.U, t.E)
        if shape != (cfg.U, cfg.E_n):
            raise ValueError(f"table shape {shape} != {(cfg.U, cfg.E_n)}")


def _cell(P, l, x, h, c):
    """One layer-norm LSTM step on a batch; returns (h, c, cache)."""
    H = h.shape[1]
    a, ln_a = _ln_forward(x @ P[f"l{l}.w_ih"], P[f"l{l}.ln_ih_gain"], P[f"l{l}.ln_ih_bias"])
    b, ln_b = _ln_forward(h @ P[f"l{l}.w_hh"], P[f"l{l}.ln_hh_gain"], P[f"l{l}.ln_hh_bias"])
    z = a + b + P[f"l{l}.bias"]
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, ln_a, ln_b, i, f, g, o, tc)


# ---------------------------------------------------------------------------
# single-step interface


@dataclass
class RnnState:
    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "RnnState":
        return cls([np.zeros(cfg.H) for _ in range(cfg.L)], [np.zeros(cfg.H) for _ in range(cfg.L)])


def forward_step(params, cfg: ModelConfig, state: RnnState, input_token: int,
                 ngram_ids: Sequence[int], tables) -> tuple[np.ndarray, RnnState]:
    """Advance one token; ``ngram_ids`` holds one row id per injected layer."""
    injected = cfg.injected_layers
    if len(ngram_ids) != len(injected):
        raise ValueError(f"expected {len(injected)} n-gram ids, got {len(ngram_ids)}")
    _check_tables(cfg, tables)
    P = _as64(params)
    inp = P["embedding"][[int(input_token)]]
    hs, cs = [], []
    for l in range(cfg.L):
        x = inp
        if l in injected:
            j = injected.index(l)
            row = _gather(tables[j], np.array([ngram_ids[j]], dtype=np.int64))
            x = np.concatenate([inp, row], axis=1)
        h, c, _ = _cell(P, l, x, state.h[l][None, :], state.c[l][None, :])
        hs.append(h[0])
        cs.append(c[0])
        inp = h
    logits = inp @ P["softmax_w"] + P["softmax_b"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activation in forward_step")
    return logits[0], RnnState(hs, cs)


# ---------------------------------------------------------------------------
# batched sequence passes


@dataclass
class Batch:
    """Padded token matrix plus the hashed row ids for every input step."""

    tokens: np.ndarray   # (B, S) int64, padded with EOS
    rows: np.ndarray     # (B, S-1) int64
    mask: np.ndarray     # (B, S-1) bool, True where a target exists

    @property
    def num_predictions(self) -> int:
        return int(self.mask.sum())


def make_batch(seqs: Sequence[Sequence[int]], cfg: ModelConfig,
               rows: Sequence[np.ndarray] | None = None) -> Batch:
    if not seqs:
        raise ValueError("empty batch")
    if any(len(s) < 2 for s in seqs):
        raise ValueError("every sequence needs at least two tokens")
    S = max(len(s) for s in seqs)
    B = len(seqs)
    tokens = np.full((B, S), EOS, dtype=np.int64)
    ids = np.zeros((B, S - 1), dtype=np.int64)
    mask = np.zeros((B, S - 1), dtype=bool)
    hcfg = cfg.hash_config
    for b, s in enumerate(seqs):
        tokens[b, :len(s)] = s
        mask[b, :len(s) - 1] = True
        if cfg.injected_layers:
            ids[b, :len(s) - 1] = rows[b] if rows is not None else sequence_ids(s, hcfg)
    if tokens.min() < 0 or tokens.max() >= cfg.V:
        raise ValueError(f"token ids outside [0, {cfg.V})")
    return Batch(tokens, ids, mask)


def _run(P, cfg: ModelConfig, tables, batch: Batch, keep: bool):
    B, S = batch.tokens.shape
    T = S - 1
    injected = cfg.injected_layers
    h = [np.zeros((B, cfg.H)) for _ in range(cfg.L)]
    c = [np.zeros((B, cfg.H)) for _ in range(cfg.L)]
    tops = np.empty((B, T, cfg.H))
    caches = []
    for t in range(T):
        inp = P["embedding"][batch.tokens[:, t]]
        step = []
        for l in range(cfg.L):
            x = inp
            if l in injected:
                row = _gather(tables[injected.index(l)], batch.rows[:, t])
                x = np.concatenate([inp, row], axis=1)
            h[l], c[l], cache = _cell(P, l, x, h[l], c[l])
            if keep:
                step.append(cache)
            inp = h[l]
        tops[:, t] = inp
        if keep:
            caches.append(step)
    return tops, caches


def _project(P, h):
    logits = h @ P["softmax_w"] + P["softmax_b"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite activation in forward pass")
    return logits


def batch_logits(params, cfg: ModelConfig, tables, batch: Batch) -> np.ndarray:
    """Unnormalised scores, shape (B, S-1, V); entry t predicts token t+1."""
    _check_tables(cfg, tables)
    P = _as64(params)
    tops, _ = _run(P, cfg, tables, batch, keep=False)
    return _project(P, tops)


def batch_nll(params, cfg: ModelConfig, tables, batch: Batch) -> np.ndarray:
    """Per-position NLL, shape (B, S-1); padding positions are 0."""
    _check_tables(cfg, tables)
    P = _as64(params)
    tops, _ = _run(P, cfg, tables, batch, keep=False)
    logp = log_softmax(_project(P, tops[batch.mask]))
    targets = batch.tokens[:, 1:][batch.mask]
    out = np.zeros(batch.mask.shape)
    out[batch.mask] = -logp[np.arange(len(targets)), targets]
    return out


def sequence_nll(params, cfg: ModelConfig, tables, seq: Sequence[int]) -> np.ndarray:
    """NLL of ``seq[k]`` given its prefix, for k = 1 .. len(seq)-1."""
    return batch_nll(params, cfg, tables, make_batch([seq], cfg))[0]


@dataclass
class SparseGrad:
    rows: np.ndarray      # (k,) unique, ascending
    values: np.ndarray    # (k, E_n)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(r): v for r, v in zip(self.rows, self.values)}


@dataclass
class Gradients:
    loss: float
    num_predictions: int
    dense: dict[str, np.ndarray]
    sparse: dict[int, SparseGrad] = field(default_factory=dict)


def batch_gradients(params, cfg: ModelConfig, tables, batch: Batch, scale: float = 1.0) -> Gradients:
    """Exact gradients of ``scale * sum(NLL)`` over every real target in the batch."""
    _check_tables(cfg, tables)
    P = _as64(params)
    tops, caches = _run(P, cfg, tables, batch, keep=True)
    B, T, H = tops.shape
    injected = cfg.injected_layers

    # only real targets reach the softmax
    flat = tops[batch.mask]
    targets = batch.tokens[:, 1:][batch.mask]
    pick = np.arange(len(targets))
    logp = log_softmax(_project(P, flat))
    loss = float(-logp[pick, targets].sum())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")

    dlogits = np.exp(logp)
    dlogits[pick, targets] -= 1.0
    dlogits *= scale

    G = {k: np.zeros_like(v) for k, v in P.items()}
    G["softmax_w"] = flat.T @ dlogits
    G["softmax_b"] = dlogits.sum(axis=0)
    dtops = np.zeros((B, T, H))
    dtops[batch.mask] = dlogits @ P["softmax_w"].T

    sparse_rows = {l: [] for l in injected}
    sparse_vals = {l: [] for l in injected}
    dh_next = [np.zeros((B, H)) for _ in range(cfg.L)]
    dc_next = [np.zeros((B, H)) for _ in range(cfg.L)]
    for t in reversed(range(T)):
        dabove = dtops[:, t]
        valid = batch.mask[:, t]
        for l in reversed(range(cfg.L)):
            x, h_prev, c_prev, ln_a, ln_b, i, f, g, o, tc = caches[t][l]
            dh = dabove + dh_next[l]
            dc = dc_next[l] + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            G[f"l{l}.bias"] += dz.sum(axis=0)
            da, dgain, dbias = _ln_backward(dz, P[f"l{l}.ln_ih_gain"], ln_a)
            G[f"l{l}.ln_ih_gain"] += dgain
            G[f"l{l}.ln_ih_bias"] += dbias
            db, dgain, dbias = _ln_backward(dz, P[f"l{l}.ln_hh_gain"], ln_b)
            G[f"l{l}.ln_hh_gain"] += dgain
            G[f"l{l}.ln_hh_bias"] += dbias
            G[f"l{l}.w_ih"] += x.T @ da
            G[f"l{l}.w_hh"] += h_prev.T @ db
            dx = da @ P[f"l{l}.w_ih"].T
            dh_next[l] = db @ P[f"l{l}.w_hh"].T
            dc_next[l] = dc * f
            base = cfg.D_in if l == 0 else H
            if l in injected:
                sparse_rows[l].append(batch.rows[valid, t])
                sparse_vals[l].append(dx[valid, base:])
            dabove = dx[:, :base]
        np.add.at(G["embedding"], batch.tokens[:, t], dabove)

    sparse = {}
    for l in injected:
        rows = np.concatenate(sparse_rows[l][::-1])
        vals = np.concatenate(sparse_vals[l][::-1])
        uniq, inverse = np.unique(rows, return_inverse=True)
        acc = np.zeros((len(uniq), cfg.E_n))
        np.add.at(acc, inverse, vals)
        if not np.all(np.isfinite(acc)):
            raise FloatingPointError(f"non-finite sparse gradient in layer {l}")
        sparse[l] = SparseGrad(uniq, acc)
    for k, v in G.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    return Gradients(loss, batch.num_predictions, G, sparse)


def backward(params, cfg: ModelConfig, tables, seq: Sequence[int]) -> tuple[dict, dict[int, SparseGrad]]:
    """Dense and sparse gradients of the total NLL of one sentence."""
    grads = batch_gradients(params, cfg, tables, make_batch([seq], cfg))
    return grads.dense, grads.sparse


def step_rows(seq: Sequence[int], cfg: ModelConfig, k: int) -> list[int]:
    """Row ids fed to each injected layer at step ``k`` (one shared window)."""
    hcfg = cfg.hash_config
    rid = ngram2id(window_at_step(seq, k, hcfg), hcfg)
    return [rid] * len(cfg.injected_layers)
