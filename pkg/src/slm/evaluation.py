"""Model-level evaluation: greedy decoding over a corpus, then WER / BLEU /
exact match, collected into an :class:`EvalReport`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .metrics import IDENTITY, Normalizer, bleu_stats, wer
from .vocab import detokenize, strip_special


class EmptyCorpusError(ValueError):
    def __init__(self, what: str = "corpus"):
        super().__init__(f"empty {what}")


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    corpus_size: int
    fingerprint: str = ""
    stats: dict[str, float] = field(default_factory=dict)
    label: str = ""
    hypotheses: list[str] = field(default_factory=list, repr=False, compare=False)
    references: list[str] = field(default_factory=list, repr=False, compare=False)

    def to_text(self) -> str:
        lines = [f"task: {self.task}"]
        if self.label:
            lines.append(f"label: {self.label}")
        lines += [f"metric: {self.metric}", f"value: {self.value:.6f}", f"corpus_size: {self.corpus_size}"]
        lines += [f"{k}: {v}" for k, v in self.stats.items()]
        lines.append(f"fingerprint: {self.fingerprint}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split(": ", 1) for line in text.strip().splitlines())
        core = {"task", "label", "metric", "value", "corpus_size", "fingerprint"}
        stats = {k: (float(v) if "." in v or "e" in v else int(v)) for k, v in kv.items() if k not in core}
        return cls(kv["task"], kv["metric"], float(kv["value"]), int(kv["corpus_size"]),
                   kv.get("fingerprint", ""), stats, kv.get("label", ""))


def decode_corpus(model, examples, instructions: Sequence[Sequence[int]] | None = None,
                  batch: int = 64, extra_len: int = 3) -> list[list[int]]:
    """Greedy outputs (special tokens stripped) for each example."""
    outputs: list[list[int]] = []
    for i in range(0, len(examples), batch):
        chunk = examples[i:i + batch]
        instr = [ex.instruction for ex in chunk] if instructions is None else instructions[i:i + batch]
        max_len = max(len(ex.target) for ex in chunk) + extra_len
        outs = model.generate_batch(instr, [ex.speech for ex in chunk], max_len)
        outputs.extend(strip_special(o) for o in outs)
    return outputs


def score(task: str, refs: list[str], hyps: list[str], norm: Normalizer, fingerprint: str = "",
          label: str = "") -> EvalReport:
    if not refs:
        raise EmptyCorpusError()
    if task == "translate":
        s = bleu_stats(refs, hyps)
        stats = {f"matches_{n}": s.matches[n - 1] for n in range(1, 5)}
        stats.update({f"totals_{n}": s.totals[n - 1] for n in range(1, 5)})
        stats.update(hyp_length=s.hyp_length, ref_length=s.ref_length)
        report = EvalReport(task, "bleu", s.score, len(refs), fingerprint, stats, label)
    elif task == "instruct":
        hits = sum(r == h for r, h in zip(refs, hyps))
        report = EvalReport(task, "exact_match", hits / len(refs), len(refs), fingerprint, {"hits": hits}, label)
    else:
        rate, e = wer(refs, hyps, norm)
        stats = {"S": e.substitutions, "D": e.deletions, "I": e.insertions, "N": e.ref_length}
        report = EvalReport(task, "wer", rate, len(refs), fingerprint, stats, label)
    report.references, report.hypotheses = refs, hyps
    return report


def evaluate_model(model, corpus, task_tag: str, norm: Normalizer = IDENTITY, fingerprint: str = "",
                   instructions=None, label: str = "") -> EvalReport:
    """Decode ``corpus`` with strided subsampling and score it.

    WER for recognition/biasing, BLEU for translation, exact match for the
    instruction families.
    """
    if not corpus:
        raise EmptyCorpusError()
    hyps = [detokenize(h) for h in decode_corpus(model, corpus, instructions)]
    refs = [detokenize(ex.target) for ex in corpus]
    return score(task_tag, refs, hyps, norm, fingerprint, label)
