"""End-to-end speech translation against a two-stage cascade (sandwich
recognition, then the frozen text LM translating the transcript)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbones import TextLM
from .evaluation import EmptyCorpusError, decode_corpus
from .metrics import IDENTITY, bleu_stats, wer
from .rng import make_rng
from .tasks import TaskExample, instruction_ids
from .vocab import CONTENT_IDS, detokenize, strip_special

RECOGNIZE = instruction_ids("recognize")
TRANSLATE = instruction_ids("translate")


@dataclass
class CascadeResult:
    end_to_end_bleu: float
    cascade_bleu: float
    transcript_wer: float
    corpus_size: int
    oracle_bleu: float = float("nan")
    corruption_bleu: dict[float, float] = field(default_factory=dict)

    def to_text(self, fingerprint: str = "") -> str:
        lines = ["task: cascade", "metric: bleu", f"value: {self.cascade_bleu:.6f}",
                 f"corpus_size: {self.corpus_size}", f"end_to_end_bleu: {self.end_to_end_bleu:.6f}",
                 f"cascade_bleu: {self.cascade_bleu:.6f}", f"transcript_wer: {self.transcript_wer:.6f}",
                 f"oracle_bleu: {self.oracle_bleu:.6f}"]
        lines += [f"corrupt_{p:g}_bleu: {b:.6f}" for p, b in self.corruption_bleu.items()]
        lines.append(f"fingerprint: {fingerprint}")
        return "\n".join(lines) + "\n"


def corrupt(transcripts: Sequence[Sequence[int]], rate: float, seed: int) -> list[tuple[int, ...]]:
    """Replace each token with probability ``rate`` by a different content symbol.

    The per-token uniform draw and replacement are fixed by ``seed`` and do not
    depend on ``rate``, so the corrupted positions at a higher rate are a
    superset of those at a lower rate.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("corruption rate must lie in [0, 1]")
    content = np.asarray(CONTENT_IDS)
    out = []
    for i, t in enumerate(transcripts):
        rng = make_rng(seed, "corrupt", i)
        u = rng.random(len(t))
        offset = rng.integers(1, len(content), size=len(t))
        row = []
        for tok, ui, off in zip(t, u, offset):
            if ui < rate:
                pos = int(np.searchsorted(content, tok)) if tok in content else 0
                tok = int(content[(pos + off) % len(content)])
            row.append(int(tok))
        out.append(tuple(row))
    return out


def translate_text(lm: TextLM, transcripts: Sequence[Sequence[int]], batch: int = 128,
                   extra_len: int = 3) -> list[list[int]]:
    """Frozen LM alone, prompted with the text-translation instruction."""
    out: list[list[int]] = []
    for i in range(0, len(transcripts), batch):
        chunk = [tuple(t) for t in transcripts[i:i + batch]]
        max_len = max(len(t) for t in chunk) + extra_len
        out.extend(strip_special(o) for o in lm.respond([TRANSLATE + t for t in chunk], max_len))
    return out


def _bleu(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    return bleu_stats([detokenize(r) for r in refs], [detokenize(h) for h in hyps]).score


def run_cascade(model, text_lm: TextLM, corpus: Sequence[TaskExample],
                corruption: Sequence[float] = (0.0, 0.1, 0.2, 0.4), seed: int = 0) -> CascadeResult:
    """Both paths consume ``corpus`` in the same order. Corruption runs start
    from the oracle (ground-truth) transcripts."""
    if not corpus:
        raise EmptyCorpusError()
    refs = [ex.target for ex in corpus]
    e2e = decode_corpus(model, corpus)
    transcripts = decode_corpus(model, corpus, [RECOGNIZE] * len(corpus))
    t_wer, _ = wer([detokenize(ex.spoken) for ex in corpus], [detokenize(t) for t in transcripts], IDENTITY)
    cascade = translate_text(text_lm, transcripts)
    oracle = [ex.spoken for ex in corpus]
    result = CascadeResult(_bleu(refs, e2e), _bleu(refs, cascade), t_wer, len(corpus),
                           _bleu(refs, translate_text(text_lm, oracle)))
    for p in corruption:
        result.corruption_bleu[float(p)] = _bleu(refs, translate_text(text_lm, corrupt(oracle, p, seed)))
    return result
