"""WER / CER with normalization, and unsmoothed corpus BLEU."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


@dataclass(frozen=True)
class Normalizer:
    steps: tuple[str, ...] = ("lowercase", "strip_punctuation", "collapse_whitespace")

    def __post_init__(self):
        unknown = set(self.steps) - {"lowercase", "strip_punctuation", "collapse_whitespace"}
        if unknown:
            raise ValueError(f"unknown normalization steps: {sorted(unknown)}")

    def __call__(self, text: str) -> str:
        for step in self.steps:
            if step == "lowercase":
                text = text.lower()
            elif step == "strip_punctuation":
                # underscores are part of toy token names
                text = _PUNCT.sub(lambda m: m.group() if m.group() == "_" else " ", text)
            else:
                text = " ".join(text.split())
        return text


IDENTITY = Normalizer(())


@dataclass
class EditStats:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditStats") -> "EditStats":
        return EditStats(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_length + other.ref_length)


def align(ref: Sequence, hyp: Sequence) -> EditStats:
    """Levenshtein alignment counts. On equal-cost backtrace paths a substitution
    (or match) is preferred over an insertion, and an insertion over a deletion."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, prev, r = d[i], d[i - 1], ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return EditStats(s, dl, ins, n)


def _corpus_rate(refs, hyps, norm, units) -> tuple[float, EditStats]:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total = EditStats()
    for r, h in zip(refs, hyps):
        total = total + align(units(norm(r)), units(norm(h)))
    if total.ref_length == 0:
        raise ValueError("reference corpus is empty after normalization")
    return total.errors / total.ref_length, total


def wer(refs: Sequence[str], hyps: Sequence[str], norm: Normalizer = Normalizer()) -> tuple[float, EditStats]:
    """Corpus WER: edit counts are summed over all pairs before dividing."""
    return _corpus_rate(refs, hyps, norm, str.split)


def cer(refs: Sequence[str], hyps: Sequence[str], norm: Normalizer = Normalizer()) -> tuple[float, EditStats]:
    return _corpus_rate(refs, hyps, norm, lambda s: list("".join(s.split())))


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * 4)
    totals: list[int] = field(default_factory=lambda: [0] * 4)
    hyp_length: int = 0
    ref_length: int = 0

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_length == 0:
            return 0.0
        return math.exp(min(0.0, 1.0 - self.ref_length / self.hyp_length))

    @property
    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def score(self) -> float:
        if min(self.matches) == 0:
            return 0.0
        log_p = sum(math.log(m / t) for m, t in zip(self.matches, self.totals)) / 4
        return 100.0 * self.brevity_penalty * math.exp(log_p)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(refs: Sequence[str], hyps: Sequence[str]) -> BleuStats:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("BLEU over an empty corpus")
    stats = BleuStats()
    for ref, hyp in zip(refs, hyps):
        r, h = ref.split(), hyp.split()
        stats.hyp_length += len(h)
        stats.ref_length += len(r)
        for n in range(1, 5):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            stats.matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            stats.totals[n - 1] += max(0, len(h) - n + 1)
    return stats


def corpus_bleu(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Single-reference corpus BLEU in [0, 100], 1-4 grams, no smoothing."""
    return bleu_stats(refs, hyps).score
