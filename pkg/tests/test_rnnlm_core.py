import math

import numpy as np
import pytest

from conftest import hand_model, oracle_dims
from lookuplm.embedding_store import EmbeddingTable, create_table
from lookuplm.rnnlm_core import (ModelConfig, RnnState, batch_gradients, batch_logits, batch_nll,
                                 backward, dense_param_count, forward_step, init_params,
                                 layer_norm, log_softmax, make_batch, param_shapes,
                                 sequence_nll, sparse_param_count, step_rows)
import scalar_oracle as oracle


def random_seqs(rng, V, count, lo=1, hi=6):
    return [[0] + rng.integers(3, V, size=rng.integers(lo, hi)).tolist() + [1] for _ in range(count)]


def test_layer_norm_examples():
    out = layer_norm([1.0, 2.0, 3.0], np.ones(3), np.zeros(3), 0.0)
    assert np.round(out, 4).tolist() == [-1.2247, 0.0, 1.2247]
    bias = np.array([0.3, -0.1, 2.0])
    assert layer_norm([4.0, 4.0, 4.0], np.array([5.0, 6.0, 7.0]), bias, 1e-5).tolist() == bias.tolist()
    assert layer_norm([9.0, -3.0, 0.5], np.zeros(3), bias).tolist() == bias.tolist()


def test_log_softmax_two_zero_logits():
    assert math.isclose(-log_softmax([0.0, 0.0])[0], math.log(2), abs_tol=1e-12)


@pytest.mark.parametrize("cfg", [
    ModelConfig(V=3, L=1, H=2, D_in=2, n=2, U=4, E_n=2),
    ModelConfig(V=6, L=2, H=3, D_in=2, n=3, U=7, E_n=2, include_current=True),
    ModelConfig(V=5, L=2, H=2, D_in=3, n=2, U=5, E_n=3, injection="layer0-only"),
    ModelConfig(V=5, L=2, H=2, D_in=3, injection="none"),
], ids=["tiny", "two-layer+cur", "layer0", "none"])
def test_forward_matches_scalar_oracle(cfg):
    params, tables, P, T = hand_model(cfg)
    seq = [0, 2, cfg.V - 1, 2, 1] if cfg.V > 3 else [0, 2, 2, 1]
    want = oracle.sentence_logits(P, T, seq, **oracle_dims(cfg))
    got = batch_logits(params, cfg, tables, make_batch([seq], cfg))[0]
    assert np.max(np.abs(got - np.array(want))) < 1e-6
    want_nll = oracle.sentence_nlls(P, T, seq, **oracle_dims(cfg))
    assert np.max(np.abs(sequence_nll(params, cfg, tables, seq) - want_nll)) < 1e-6


def test_forward_step_agrees_with_batched_pass():
    cfg = ModelConfig(V=12, L=2, H=5, D_in=4, n=3, U=31, E_n=3)
    params = init_params(cfg, seed=3)
    tables = [create_table(31, 3, 0.1, seed=s) for s in (1, 2)]
    seq = [0, 5, 7, 3, 9, 1]
    state = RnnState.zeros(cfg)
    stepped = []
    for k in range(len(seq) - 1):
        logits, state = forward_step(params, cfg, state, seq[k], step_rows(seq, cfg, k), tables)
        stepped.append(logits)
    batched = batch_logits(params, cfg, tables, make_batch([seq], cfg))[0]
    assert np.allclose(np.array(stepped), batched, rtol=0, atol=1e-12)


def test_forward_step_checks_id_count():
    cfg = ModelConfig(V=5, L=2, H=2, D_in=2, U=4, E_n=2)
    params = init_params(cfg)
    tables = [create_table(4, 2), create_table(4, 2)]
    with pytest.raises(ValueError):
        forward_step(params, cfg, RnnState.zeros(cfg), 0, [1], tables)


def test_injection_none_is_plain_lstm():
    cfg = ModelConfig(V=9, L=2, H=4, D_in=3, injection="none")
    logits, _ = forward_step(init_params(cfg), cfg, RnnState.zeros(cfg), 0, [], [])
    assert logits.shape == (9,)
    assert sparse_param_count(cfg) == 0


def test_all_zero_model_is_uniform():
    cfg = ModelConfig(V=11, L=2, H=3, D_in=2, U=5, E_n=2)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    tables = [create_table(5, 2, 0.0), create_table(5, 2, 0.0)]
    nll = sequence_nll(params, cfg, tables, [0, 4, 5, 6, 1])
    assert np.allclose(nll, math.log(11), rtol=0, atol=1e-12)


def test_softmax_normalised_at_every_step():
    cfg = ModelConfig(V=20, L=2, H=6, D_in=4, U=17, E_n=3)
    params = init_params(cfg, 1)
    tables = [create_table(17, 3, 0.3, seed=s) for s in (0, 1)]
    seqs = random_seqs(np.random.default_rng(0), 20, 4)
    logits = batch_logits(params, cfg, tables, make_batch(seqs, cfg))
    assert np.allclose(np.exp(log_softmax(logits)).sum(-1), 1.0, atol=1e-6)


def test_zero_tables_ignore_supplied_ids():
    cfg = ModelConfig(V=15, L=2, H=5, D_in=4, n=2, U=23, E_n=3)
    params = init_params(cfg, 2)
    tables = [create_table(23, 3, 0.0), create_table(23, 3, 0.0)]
    seqs = random_seqs(np.random.default_rng(1), 15, 3)
    base = make_batch(seqs, cfg)
    ref = batch_logits(params, cfg, tables, base)
    perm = np.random.default_rng(2).permutation(23)
    shuffled = make_batch(seqs, cfg, rows=[perm[r[:len(s) - 1]] for r, s in zip(base.rows, seqs)])
    assert batch_logits(params, cfg, tables, shuffled).tobytes() == ref.tobytes()


def test_dense_count_closed_form():
    for injection in ("every-layer", "layer0-only", "none"):
        for L in (1, 2, 3):
            cfg = ModelConfig(V=50, L=L, H=7, D_in=5, E_n=4, injection=injection)
            numel = sum(math.prod(s) for s in param_shapes(cfg).values())
            assert numel == dense_param_count(cfg)
            params = init_params(cfg)
            assert sum(p.size for p in params.values()) == numel


def test_every_layer_adds_input_weights_per_layer():
    kw = dict(V=40, L=3, H=6, D_in=5, E_n=4)
    gap = dense_param_count(ModelConfig(**kw)) - dense_param_count(ModelConfig(injection="none", **kw))
    assert gap == 3 * 4 * 6 * 4
    assert sparse_param_count(ModelConfig(U=1024, E_n=16, L=2, V=10)) == 32768


def test_forget_bias_starts_at_one():
    cfg = ModelConfig(V=5, L=1, H=3)
    b = init_params(cfg)["l0.bias"]
    assert b.tolist() == [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0]


def test_padded_batch_matches_single_sentences():
    cfg = ModelConfig(V=14, L=2, H=4, D_in=3, n=2, U=19, E_n=2)
    params = init_params(cfg, 5)
    tables = [create_table(19, 2, 0.1, seed=s) for s in (0, 1)]
    seqs = random_seqs(np.random.default_rng(3), 14, 5)
    nll = batch_nll(params, cfg, tables, make_batch(seqs, cfg))
    for b, s in enumerate(seqs):
        assert np.allclose(nll[b, :len(s) - 1], sequence_nll(params, cfg, tables, s), atol=1e-12)
        assert not nll[b, len(s) - 1:].any()


def test_softmax_gradient_at_uniform_model():
    cfg = ModelConfig(V=6, L=1, H=2, D_in=2, injection="none")
    params = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    seq = [0, 3, 4, 3, 1]
    dense, _ = backward(params, cfg, [], seq)
    targets = np.bincount(seq[1:], minlength=6)
    assert np.allclose(dense["softmax_b"], 4 / 6 - targets, atol=1e-12)


def _loss(params, cfg, tables, seqs):
    return float(batch_nll(params, cfg, tables, make_batch(seqs, cfg)).sum())


def test_gradients_match_finite_differences_quick():
    cfg = ModelConfig(V=9, L=2, H=3, D_in=2, n=2, U=7, E_n=2)
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, 0).items()}
    tables = [np.random.default_rng(s).uniform(-0.3, 0.3, (7, 2)) for s in (0, 1)]
    seqs = random_seqs(np.random.default_rng(4), 9, 2)
    g = batch_gradients(params, cfg, tables, make_batch(seqs, cfg))
    h = 1e-5
    for name in ("l0.w_ih", "l1.ln_hh_gain", "softmax_w", "embedding"):
        flat = params[name].reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 6)):
            old = flat[i]
            flat[i] = old + h
            up = _loss(params, cfg, tables, seqs)
            flat[i] = old - h
            down = _loss(params, cfg, tables, seqs)
            flat[i] = old
            assert math.isclose(g.dense[name].reshape(-1)[i], (up - down) / (2 * h),
                                rel_tol=1e-5, abs_tol=1e-8)


def test_repeated_row_gradient_is_additive():
    cfg = ModelConfig(V=10, L=1, H=3, D_in=2, n=2, U=8, E_n=2)
    params = init_params(cfg, 1)
    values = np.random.default_rng(0).uniform(-0.3, 0.3, (8, 2)).astype(np.float32)
    values[6] = values[5]
    tables = [EmbeddingTable(values)]
    seq = [0, 4, 5, 6, 7, 1]
    both = make_batch([seq], cfg, rows=[np.array([0, 5, 1, 5, 2])])
    split = make_batch([seq], cfg, rows=[np.array([0, 5, 1, 6, 2])])
    g_both = batch_gradients(params, cfg, tables, both).sparse[0].as_dict()
    g_split = batch_gradients(params, cfg, tables, split).sparse[0].as_dict()
    assert np.allclose(g_both[5], g_split[5] + g_split[6], rtol=0, atol=1e-12)
    assert set(g_both) == {0, 1, 2, 5}


def test_forward_backward_are_deterministic():
    cfg = ModelConfig(V=12, L=2, H=4, D_in=3, U=11, E_n=2)
    params = init_params(cfg, 7)
    tables = [create_table(11, 2, 0.1, seed=s) for s in (3, 4)]
    seqs = random_seqs(np.random.default_rng(5), 12, 3)
    batch = make_batch(seqs, cfg)
    a = batch_gradients(params, cfg, tables, batch)
    b = batch_gradients(params, cfg, tables, batch)
    assert all(a.dense[k].tobytes() == b.dense[k].tobytes() for k in a.dense)
    assert all(a.sparse[l].values.tobytes() == b.sparse[l].values.tobytes() for l in a.sparse)


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        ModelConfig(V=5, H=0)
    with pytest.raises(ValueError):
        ModelConfig(V=5, injection="sometimes")
    cfg = ModelConfig(V=5, L=1, H=2, U=4, E_n=2)
    with pytest.raises(ValueError):
        make_batch([[0, 9, 1]], cfg)
    with pytest.raises(ValueError):
        batch_logits(init_params(cfg), cfg, [create_table(3, 2)], make_batch([[0, 1]], cfg))
