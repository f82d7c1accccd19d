"""Shallow-fusion rescoring of externally produced n-best lists.

Each hypothesis carries its speech-model log posterior and internal-LM
score.  The fused score is::

    acoustic_logp - lambda2 * ilm_logp + lambda1 * lm_logp

where ``lm_logp`` is the trained LM's log probability of the hypothesis
text.  The n-best input is TSV ``utt_id, text, acoustic_logp, ilm_logp``;
the output appends ``lm_logp, fusion_score, rank`` (rank 1 is the top-1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .tokenizer import read_lines

log = logging.getLogger(__name__)

OUTPUT_HEADER = ("utt_id", "text", "acoustic_logp", "ilm_logp", "lm_logp", "fusion_score", "rank")


@dataclass(frozen=True)
class Hypothesis:
    utt_id: str
    text: str
    acoustic_logp: float
    ilm_logp: float

    def __post_init__(self):
        if not (math.isfinite(self.acoustic_logp) and math.isfinite(self.ilm_logp)):
            raise ValueError(f"non-finite scores for {self.utt_id!r}")


@dataclass(frozen=True)
class FusionWeights:
    lambda1: float = 0.0
    lambda2: float = 0.0


def fusion_score(hyp: Hypothesis, weights: FusionWeights, lm_logp: float) -> float:
    return hyp.acoustic_logp - weights.lambda2 * hyp.ilm_logp + weights.lambda1 * lm_logp


@dataclass
class RankedHypothesis:
    hyp: Hypothesis
    lm_logp: float
    score: float
    rank: int


@dataclass
class ParseError:
    lineno: int
    utt_id: str | None
    message: str

    def __str__(self) -> str:
        return f"line {self.lineno}: {self.message}"


def parse_nbest(lines: Sequence[str]) -> tuple[list[list[Hypothesis]], list[ParseError]]:
    """Group contiguous hypotheses by utterance.

    A malformed line drops its whole utterance; so does an utterance id that
    reappears after a different one.
    """
    groups: list[list[Hypothesis]] = []
    errors: list[ParseError] = []
    bad: set[str] = set()
    seen: set[str] = set()
    current: str | None = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        utt = parts[0] if parts else None
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 tab-separated fields, got {len(parts)}")
            hyp = Hypothesis(parts[0], parts[1], float(parts[2]), float(parts[3]))
        except ValueError as exc:
            errors.append(ParseError(lineno, utt, str(exc)))
            if utt is not None:
                bad.add(utt)
            continue
        if hyp.utt_id != current:
            if hyp.utt_id in seen:
                errors.append(ParseError(lineno, hyp.utt_id, "utterance hypotheses are not contiguous"))
                bad.add(hyp.utt_id)
                continue
            seen.add(hyp.utt_id)
            current = hyp.utt_id
            groups.append([])
        groups[-1].append(hyp)
    for err in errors:
        log.info("n-best %s", err)
    return [g for g in groups if g[0].utt_id not in bad], errors


def rank_hypotheses(hyps: Sequence[Hypothesis], lm_logps: Sequence[float],
                    weights: FusionWeights) -> list[RankedHypothesis]:
    """Sort by descending fused score; equal scores keep file order."""
    scored = [(fusion_score(h, weights, lm), i) for i, (h, lm) in enumerate(zip(hyps, lm_logps))]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    return [RankedHypothesis(hyps[i], lm_logps[i], scored[i][0], r + 1) for r, i in enumerate(order)]


def lm_log_probs(model, texts: Sequence[str]) -> list[float]:
    """Log probability of each text (words and closing EOS) under the LM."""
    from .evaluation import sentence_nlls

    return [-math.fsum(nll.tolist()) for nll in sentence_nlls(model, texts)]


def rescore(groups: Sequence[Sequence[Hypothesis]], weights: FusionWeights,
            scorer: Callable[[Sequence[str]], list[float]]) -> list[list[RankedHypothesis]]:
    texts = [h.text for g in groups for h in g]
    lm = scorer(texts) if texts else []
    out, pos = [], 0
    for g in groups:
        out.append(rank_hypotheses(g, lm[pos:pos + len(g)], weights))
        pos += len(g)
    return out


def format_ranked(ranked: Sequence[Sequence[RankedHypothesis]]) -> str:
    lines = ["\t".join(OUTPUT_HEADER)]
    for group in ranked:
        for r in group:
            h = r.hyp
            lines.append("\t".join([h.utt_id, h.text, repr(h.acoustic_logp), repr(h.ilm_logp),
                                    repr(r.lm_logp), repr(r.score), str(r.rank)]))
    return "\n".join(lines) + "\n"


def rescore_nbest(nbest_path, model, weights: FusionWeights, out_path=None):
    """Rescore an n-best file with ``model``; returns (ranked lists, parse errors)."""
    groups, errors = parse_nbest(list(read_lines(nbest_path)))
    ranked = rescore(groups, weights, lambda texts: lm_log_probs(model, texts))
    if out_path is not None:
        Path(out_path).write_text(format_ranked(ranked), encoding="utf-8")
    return ranked, errors
