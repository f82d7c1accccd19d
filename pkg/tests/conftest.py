import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lookuplm.embedding_store import EmbeddingTable  # noqa: E402
from lookuplm.rnnlm_core import ModelConfig, param_shapes  # noqa: E402
from lookuplm.tokenizer import Vocab  # noqa: E402

TOY_WORDS = [f"w{i}" for i in range(29)]


def toy_lines():
    """26 sentences cycling through 29 words: V=32 with the reserved ids."""
    return [" ".join(TOY_WORDS[(i + j) % 29] for j in range(5)) for i in range(26)]


def write_lines(path, lines, newline="\n"):
    Path(path).write_text("".join(line + newline for line in lines), encoding="utf-8", newline="")
    return Path(path)


def hand_value(name, idx):
    """Fixed, non-random parameter pattern (three decimals, float32-exact enough)."""
    seed = sum(ord(ch) for ch in name)
    return round(0.6 * math.sin(1.3 * idx + 0.7 * seed), 3)


def hand_model(cfg: ModelConfig):
    """Hand-set parameters and tables; returns numpy params/tables and list copies."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape))
        vals = np.array([hand_value(name, i) for i in range(size)], dtype=np.float64)
        if name.endswith("_gain"):
            vals = 1.0 + 0.5 * vals
        params[name] = vals.reshape(shape).astype(np.float32)
    tables = []
    for layer in cfg.injected_layers:
        vals = np.array([hand_value(f"table{layer}", i) for i in range(cfg.U * cfg.E_n)])
        tables.append(EmbeddingTable(vals.reshape(cfg.U, cfg.E_n).astype(np.float32)))
    P_list = {k: v.astype(np.float64).tolist() for k, v in params.items()}
    T_list = {layer: t.values.astype(np.float64).tolist()
              for layer, t in zip(cfg.injected_layers, tables)}
    return params, tables, P_list, T_list


def oracle_dims(cfg: ModelConfig):
    return dict(L=cfg.L, H=cfg.H, V=cfg.V, U=cfg.U, n=cfg.n,
                injected=set(cfg.injected_layers), include_current=cfg.include_current)


def tiny_vocab(words):
    return Vocab(["<s>", "</s>", "<unk>"] + list(words))


@pytest.fixture
def toy_corpus(tmp_path):
    return write_lines(tmp_path / "toy.txt", toy_lines())


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
