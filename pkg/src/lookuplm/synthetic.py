"""Synthetic long-tail query corpus for desk-scale experiments.

Sentences follow a small head grammar (navigation-style prefixes, frequent
places, optional suffixes).  Rare entities are ``<word> <connector> <word>``
names built from invented words; each one occurs 1..5 times in the LM
corpus with frequency proportional to 1/count, and never in the
"transcript" corpus, so its words are rare in both.  Mid-frequency entities
occur often enough in the LM corpus to be common there while staying absent
from the transcripts.  The held-out file carries one new sentence for every
entity plus unseen head combinations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PREFIXES = [
    "navigate to", "directions to", "take me to", "drive to", "how do i get to",
    "route to", "show me the way to", "get me to",
]
HEAD_PLACES = [
    "home", "work", "the airport", "the mall", "downtown", "the station", "costco",
    "walmart", "starbucks", "target", "the beach", "the park", "the gym", "the library",
    "the hospital", "the office", "school", "the bank", "the hotel", "the museum",
    "a gas station", "a pharmacy", "a coffee shop", "the post office", "city hall",
    "the stadium", "the zoo", "the market", "a restaurant", "the pier",
    # every entity connector also occurs in head places
    "main street", "station road", "central park", "the lake", "the bay", "the hills",
    "fifth avenue", "milky way", "the falls", "the ridge", "the creek", "the point",
]
SUFFIXES = ["", "please", "now", "right now", "with traffic", "avoiding tolls",
            "fastest route", "tomorrow morning"]
CONNECTORS = ["street", "road", "park", "lake", "bay", "hills", "avenue", "way",
              "falls", "ridge", "creek", "point"]
ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
          "br", "dr", "fr", "gl", "kr", "pl", "st", "tr", "sh", "ch", "th", "wh"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee", "oa"]
CODAS = ["", "n", "r", "l", "s", "x", "m", "nd", "rk", "lt"]


@dataclass
class LongTailCorpus:
    lm_lines: list[str]          # corpus B (LM training text)
    transcript_lines: list[str]  # corpus A (speech transcripts)
    heldout_lines: list[str]
    rare_entities: list[str]
    mid_entities: list[str]

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, lines in (("lm_corpus.txt", self.lm_lines),
                            ("transcripts.txt", self.transcript_lines),
                            ("heldout.txt", self.heldout_lines)):
            paths[name] = out_dir / name
            paths[name].write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return paths


def _pseudo_words(rng: np.random.Generator, count: int, banned: set[str]) -> list[str]:
    words: list[str] = []
    seen = set(banned)
    while len(words) < count:
        n_syl = int(rng.integers(2, 4))
        w = "".join(ONSETS[rng.integers(len(ONSETS))] + VOWELS[rng.integers(len(VOWELS))]
                    for _ in range(n_syl)) + CODAS[rng.integers(len(CODAS))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _sentence(rng, place: str, with_suffix: bool = True) -> str:
    prefix = PREFIXES[rng.integers(len(PREFIXES))]
    suffix = SUFFIXES[rng.integers(len(SUFFIXES))] if with_suffix else ""
    return " ".join(p for p in (prefix, place, suffix) if p)


def generate_longtail(seed: int = 0, n_rare: int = 600, n_mid: int = 60,
                      n_head: int = 2400, n_transcripts: int = 1200,
                      max_rare_count: int = 5, mid_counts: tuple[int, int] = (8, 20),
                      n_heldout_head: int = 80) -> LongTailCorpus:
    rng = np.random.default_rng(seed)
    banned = {w for phrase in PREFIXES + HEAD_PLACES + SUFFIXES + CONNECTORS for w in phrase.split()}
    words = _pseudo_words(rng, 2 * (n_rare + n_mid), banned)

    def entity(k):
        return f"{words[2 * k]} {CONNECTORS[rng.integers(len(CONNECTORS))]} {words[2 * k + 1]}"

    rare = [entity(k) for k in range(n_rare)]
    mid = [entity(n_rare + k) for k in range(n_mid)]

    # every head combination is split into training and held-out halves
    combos = [(p, s) for p in HEAD_PLACES for s in SUFFIXES]
    perm = rng.permutation(len(combos))
    held_combos = [combos[i] for i in perm[:n_heldout_head]]
    train_combos = [combos[i] for i in perm[n_heldout_head:]]

    def head_sentence(place, suffix):
        prefix = PREFIXES[rng.integers(len(PREFIXES))]
        return " ".join(p for p in (prefix, place, suffix) if p)

    head = [head_sentence(*train_combos[rng.integers(len(train_combos))]) for _ in range(n_head)]

    counts = np.arange(1, max_rare_count + 1)
    probs = (1.0 / counts) / (1.0 / counts).sum()
    lm = list(head)
    for e in rare:
        for _ in range(int(rng.choice(counts, p=probs))):
            lm.append(_sentence(rng, e))
    for e in mid:
        for _ in range(int(rng.integers(mid_counts[0], mid_counts[1] + 1))):
            lm.append(_sentence(rng, e))
    lm = [lm[i] for i in rng.permutation(len(lm))]

    # transcripts only ever mention head places
    transcripts = [head_sentence(*train_combos[rng.integers(len(train_combos))])
                   for _ in range(n_transcripts)]

    training = set(lm) | set(transcripts)
    heldout = []
    for place, suffix in held_combos:
        s = head_sentence(place, suffix)
        if s not in training:
            heldout.append(s)
    for e in mid + rare:
        for _ in range(20):
            s = _sentence(rng, e)
            if s not in training:
                heldout.append(s)
                break
    return LongTailCorpus(lm, transcripts, heldout, rare, mid)
