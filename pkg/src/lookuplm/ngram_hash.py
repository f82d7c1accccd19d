"""Modular hashing of token n-grams into embedding-table rows."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tokenizer import BOS, Vocab, encode, read_lines


@dataclass(frozen=True)
class HashConfig:
    V: int
    U: int
    n: int = 4
    include_current: bool = False

    def __post_init__(self):
        if self.V < 1 or self.U < 1 or self.n < 1:
            raise ValueError(f"invalid hash config {self}")


def ngram2id(window: Sequence[int], cfg: HashConfig) -> int:
    """Row id of an n-gram, ``sum(t_i * V**i) mod U`` with ``window[0]`` as t_0.

    Evaluated by Horner's rule from the newest token down, reducing mod U at
    every step so intermediate values stay below ``U * V``.
    """
    if len(window) != cfg.n:
        raise ValueError(f"window length {len(window)} != order {cfg.n}")
    acc = 0
    for t in reversed(window):
        t = int(t)
        if t < 0 or t >= cfg.V:
            raise ValueError(f"token id {t} outside [0, {cfg.V})")
        acc = (acc * cfg.V + t) % cfg.U
    return acc


def window_at_step(seq: Sequence[int], k: int, cfg: HashConfig) -> tuple[int, ...]:
    """Tokens hashed at step ``k`` (while consuming ``seq[k]``), oldest first.

    Without ``include_current`` the window is ``seq[k-n:k]`` and never reads
    ``seq[k]``.  Positions before the sentence start read as BOS.
    """
    end = k + 1 if cfg.include_current else k
    return tuple(seq[j] if 0 <= j < len(seq) else BOS for j in range(end - cfg.n, end))


def sequence_ids(seq: Sequence[int], cfg: HashConfig, steps: int | None = None) -> np.ndarray:
    """Row ids for steps ``0 .. steps-1`` (default: every input step, ``len(seq)-1``)."""
    if steps is None:
        steps = len(seq) - 1
    return np.array([ngram2id(window_at_step(seq, k, cfg), cfg) for k in range(steps)],
                    dtype=np.int64)


@dataclass
class CollisionStats:
    distinct_ngrams: int
    distinct_ids: int
    load_factor: float
    max_bucket: int

    def as_rows(self) -> list[tuple[str, str]]:
        return [
            ("distinct_ngrams", str(self.distinct_ngrams)),
            ("distinct_ids", str(self.distinct_ids)),
            ("load_factor", f"{self.load_factor:.6f}"),
            ("max_bucket", str(self.max_bucket)),
        ]


def stats_for_ngrams(ngrams: Iterable[tuple[int, ...]], cfg: HashConfig) -> CollisionStats:
    distinct = set(ngrams)
    buckets = Counter(ngram2id(g, cfg) for g in distinct)
    return CollisionStats(
        distinct_ngrams=len(distinct),
        distinct_ids=len(buckets),
        load_factor=len(distinct) / cfg.U,
        max_bucket=max(buckets.values(), default=0),
    )


def collision_stats(corpus_path, vocab: Vocab, cfg: HashConfig) -> CollisionStats:
    """Collision profile of every window the model would hash on a corpus."""
    def windows():
        for line in read_lines(corpus_path):
            seq = encode(line, vocab)
            for k in range(len(seq) - 1):
                yield window_at_step(seq, k, cfg)

    return stats_for_ngrams(windows(), cfg)
