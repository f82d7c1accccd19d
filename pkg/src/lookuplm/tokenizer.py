"""Word-level vocabulary and sentence encoding.

Ids 0, 1 and 2 are always ``<s>``, ``</s>`` and ``<unk>``.  The vocab file
stores one token per line, the line index being the id.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

BOS, EOS, UNK = 0, 1, 2
BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<s>", "</s>", "<unk>"
RESERVED = (BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


@dataclass
class Vocab:
    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[:3]) != list(RESERVED):
            raise ValueError(f"vocab must start with {RESERVED}, got {self.tokens[:3]}")
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise ValueError(f"duplicate token {tok!r} at id {i}")
            self._index[tok] = i

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\r\n") for line in f]
        return cls(tokens)


def read_lines(path) -> Iterator[str]:
    """Yield corpus lines with any ``\\n`` / ``\\r\\n`` terminator removed."""
    with open(path, encoding="utf-8", newline="") as f:
        for line in f:
            yield line.rstrip("\r\n")


def vocab_from_sentences(sentences: Iterable[str], max_size: int) -> Vocab:
    if max_size < 4:
        raise ValueError(f"max_size must be >= 4, got {max_size}")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for sentence in sentences:
        for word in sentence.split():
            if word in RESERVED:
                continue
            counts[word] += 1
            first_seen.setdefault(word, len(first_seen))
    # stable ordering: most frequent first, earliest first occurrence on ties
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    return Vocab(list(RESERVED) + ranked[: max_size - len(RESERVED)])


def build_vocab(corpus_path, max_size: int) -> Vocab:
    return vocab_from_sentences(read_lines(corpus_path), max_size)


def encode(text: str, vocab: Vocab) -> list[int]:
    return [BOS] + [vocab.id(w) for w in text.split()] + [EOS]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        if i < 0 or i >= vocab.size:
            raise ValueError(f"token id {i} outside [0, {vocab.size})")
        if i == BOS or i == EOS:
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


def rescaled_count(n: int) -> int:
    """Number of copies kept for a sentence seen ``n`` times: ceil(ln n), min 1."""
    if n < 1:
        raise ValueError("count must be positive")
    return max(1, math.ceil(math.log(n)))


def frequency_rescale_corpus(corpus_path, out_path) -> Path:
    counts: Counter[str] = Counter()
    order: list[str] = []
    for line in read_lines(corpus_path):
        if line not in counts:
            order.append(line)
        counts[line] += 1
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        for sentence in order:
            for _ in range(rescaled_count(counts[sentence])):
                f.write(sentence + "\n")
    return out_path
