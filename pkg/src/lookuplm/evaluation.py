"""Head / long-tail test sets, masked log perplexity and ablation sweeps."""

from __future__ import annotations

import logging
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rnnlm_core import ModelConfig, batch_nll, dense_param_count, make_batch, sparse_param_count
from .tokenizer import Vocab, encode, read_lines

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 5
TESTSET_NAMES = ("Head", "RareA", "RareBOTH")
TESTSET_FILES = {"Head": "head.tsv", "RareA": "rare_a.tsv", "RareBOTH": "rare_both.tsv"}
_EVAL_BATCH = 128


@dataclass
class TestSetSpec:
    name: str
    sentences: list[str]
    masks: list[list[bool]]

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if len(self.sentences) != len(self.masks):
            raise ValueError("one mask per sentence required")
        for s, m in zip(self.sentences, self.masks):
            if len(s.split()) != len(m):
                raise ValueError(f"mask length {len(m)} != word count for {s!r}")

    def __len__(self) -> int:
        return len(self.sentences)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for s, m in zip(self.sentences, self.masks):
                f.write(f"{s}\t{''.join('1' if b else '0' for b in m)}\n")

    @classmethod
    def load(cls, path, name: str | None = None) -> "TestSetSpec":
        sentences, masks = [], []
        for lineno, line in enumerate(read_lines(path), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or set(parts[1]) - {"0", "1"}:
                raise ValueError(f"{path}:{lineno}: expected 'sentence<TAB>mask'")
            sentences.append(parts[0])
            masks.append([c == "1" for c in parts[1]])
        if name is None:
            by_file = {f: n for n, f in TESTSET_FILES.items()}
            name = by_file.get(Path(path).name, Path(path).stem)
        return cls(name, sentences, masks)


@dataclass
class RareSets:
    rare_in_A: set[str]
    rare_in_B: set[str]
    threshold: int = DEFAULT_THRESHOLD


def word_counts(lines: Iterable[str]) -> Counter:
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def is_rare(word: str, counts: Counter, threshold: int = DEFAULT_THRESHOLD) -> bool:
    """Rare means seen at most ``threshold`` times (absence counts as rare)."""
    return counts[word] <= threshold


def curate_from_lines(lines_a: Sequence[str], lines_b: Sequence[str], heldout: Sequence[str],
                      threshold: int = DEFAULT_THRESHOLD,
                      sizes: dict[str, int | None] | None = None) -> dict[str, TestSetSpec]:
    sizes = sizes or {}
    count_a, count_b = word_counts(lines_a), word_counts(lines_b)
    training = set(lines_a) | set(lines_b)
    kept = [s for s in heldout if s.strip() and s not in training]
    if len(kept) < sum(1 for s in heldout if s.strip()):
        log.warning("dropped %d held-out sentences that also occur in training data",
                    sum(1 for s in heldout if s.strip()) - len(kept))

    def rare_a(w):
        return count_a[w] <= threshold and count_b[w] > threshold

    def rare_both(w):
        return count_a[w] <= threshold and count_b[w] <= threshold

    out = {}
    for name, pred in (("Head", None), ("RareA", rare_a), ("RareBOTH", rare_both)):
        sents, masks = [], []
        limit = sizes.get(name)
        for s in kept:
            if limit is not None and len(sents) >= limit:
                break
            words = s.split()
            mask = [True] * len(words) if pred is None else [pred(w) for w in words]
            if any(mask):
                sents.append(s)
                masks.append(mask)
        if limit is not None and len(sents) < limit:
            log.warning("%s: only %d of %d requested sentences qualify", name, len(sents), limit)
        out[name] = TestSetSpec(name, sents, masks)
    return out


def curate_testsets(corpus_a_path, corpus_b_path, heldout_path, threshold: int = DEFAULT_THRESHOLD,
                    sizes: dict[str, int | None] | None = None) -> dict[str, TestSetSpec]:
    return curate_from_lines(list(read_lines(corpus_a_path)), list(read_lines(corpus_b_path)),
                             list(read_lines(heldout_path)), threshold, sizes)


def rare_sets(corpus_a_path, corpus_b_path, threshold: int = DEFAULT_THRESHOLD) -> RareSets:
    ca, cb = word_counts(read_lines(corpus_a_path)), word_counts(read_lines(corpus_b_path))
    return RareSets({w for w, c in ca.items() if c <= threshold},
                    {w for w, c in cb.items() if c <= threshold}, threshold)


def save_testsets(testsets: dict[str, TestSetSpec], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ts in testsets.items():
        paths[name] = out_dir / TESTSET_FILES.get(name, f"{name}.tsv")
        ts.save(paths[name])
    return paths


def load_testsets(directory) -> dict[str, TestSetSpec]:
    directory = Path(directory)
    return {name: TestSetSpec.load(directory / fname, name)
            for name, fname in TESTSET_FILES.items() if (directory / fname).exists()}


# ---------------------------------------------------------------------------
# scoring


def sentence_nlls(model, sentences: Sequence[str]) -> list[np.ndarray]:
    """Per-token NLLs (words then EOS) for each sentence.

    Sentences are batched in a canonical (length, text) order so results do
    not depend on the order of ``sentences``.
    """
    seqs = [encode(s, model.vocab) for s in sentences]
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), sentences[i]))
    out: list[np.ndarray | None] = [None] * len(seqs)
    for start in range(0, len(order), _EVAL_BATCH):
        idx = order[start:start + _EVAL_BATCH]
        batch = make_batch([seqs[i] for i in idx], model.config)
        nll = batch_nll(model.params, model.config, model.tables, batch)
        for b, i in enumerate(idx):
            out[i] = nll[b, :len(seqs[i]) - 1].copy()
    return out


@dataclass
class PerplexityResult:
    total: float
    count: int

    @property
    def value(self) -> float:
        if self.count == 0:
            raise ValueError("empty selection: log perplexity undefined")
        return self.total / self.count


def score_testset(model, testset: TestSetSpec, masked: bool) -> PerplexityResult:
    """Sum and count of selected token NLLs.

    Unmasked: every word and the closing EOS.  Masked: only words whose mask
    bit is set, although the full sentence is still fed to the model.
    """
    terms = []
    for nll, mask in zip(sentence_nlls(model, testset.sentences), testset.masks):
        if masked:
            terms.extend(float(x) for x, keep in zip(nll[:len(mask)], mask) if keep)
        else:
            terms.extend(float(x) for x in nll)
    return PerplexityResult(math.fsum(terms), len(terms))


def log_perplexity(model, testset: TestSetSpec, masked: bool) -> float:
    return score_testset(model, testset, masked).value


def eos_total(model, testset: TestSetSpec) -> float:
    return math.fsum(float(nll[-1]) for nll in sentence_nlls(model, testset.sentences))


# ---------------------------------------------------------------------------
# ablation sweep


@dataclass
class SweepRow:
    name: str
    config: ModelConfig
    dense_params: int
    sparse_params: int
    logpp: dict[str, float]
    per_seed: dict[str, list[float]] = field(default_factory=dict)

    def cells(self) -> list[str]:
        c = self.config
        injected = c.injection != "none"
        return [self.name,
                str(c.U) if injected else "-", str(c.E_n) if injected else "-",
                str(c.n) if injected else "-", str(int(c.include_current)), c.injection,
                str(self.dense_params), str(self.sparse_params),
                *(f"{self.logpp[k]:.4f}" if k in self.logpp else "-" for k in TESTSET_NAMES),
                str(len(next(iter(self.per_seed.values()), [])))]


SWEEP_HEADER = ["model", "U", "E_n", "n", "include_current", "injection", "dense_params",
                "sparse_params", "logpp_head", "logpp_rare_a", "logpp_rare_both", "seeds"]


def config_name(cfg: ModelConfig) -> str:
    if cfg.injection == "none":
        return "Base LM"
    name = f"Lookup-{cfg.U}-{cfg.E_n}-{cfg.n}"
    if cfg.include_current:
        name += "+cur"
    if cfg.injection == "layer0-only":
        name += "+l0"
    return name


def ablation_sweep(grid: Sequence[tuple], lines: Sequence[str],
                   testsets: dict[str, TestSetSpec], vocab: Vocab,
                   seeds: Sequence[int] = (0,), masked_names=("RareA", "RareBOTH"),
                   names: Sequence[str] | None = None) -> list[SweepRow]:
    """Train every grid entry for each seed; report median log perplexities.

    Head is scored unmasked, the rare sets on their rare-word portion.
    """
    from .trainer import train_sentences

    rows = []
    for i, (model_cfg, train_cfg) in enumerate(grid):
        name = names[i] if names else config_name(model_cfg)
        per_seed: dict[str, list[float]] = {k: [] for k in testsets}
        for seed in seeds:
            ckpt = train_sentences(lines, vocab, model_cfg, replace(train_cfg, seed=seed),
                                   log_every=0)
            for ts_name, ts in testsets.items():
                value = log_perplexity(ckpt, ts, masked=ts_name in masked_names)
                per_seed[ts_name].append(value)
            log.info("sweep %s seed=%d %s", name, seed,
                     " ".join(f"{k}={v[-1]:.4f}" for k, v in per_seed.items()))
        rows.append(SweepRow(name, model_cfg, dense_param_count(model_cfg),
                             sparse_param_count(model_cfg),
                             {k: statistics.median(v) for k, v in per_seed.items()}, per_seed))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = ["\t".join(SWEEP_HEADER)]
    lines += ["\t".join(r.cells()) for r in rows]
    return "\n".join(lines) + "\n"
