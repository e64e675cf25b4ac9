"""Contextual biasing: an entity database embedded by the frozen speech
encoder, a top-1 cosine retriever, mention-carrying prompts, and the
ANTI / W_PREFIX / WO_PREFIX evaluation splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbones import SpeechEncoder
from .evaluation import EmptyCorpusError, EvalReport, evaluate_model
from .formats import Record, load_checkpoint, save_checkpoint
from .metrics import IDENTITY, Normalizer
from .rng import derive_seed, make_rng
from .tasks import (Speechifier, TaskExample, World, _no_repeat_sequence, instruction_ids,
                    sample_utterances, speechify)
from .vocab import CONTENT_IDS, RARE_IDS, TOKEN_ID, check_ids, detokenize, tokenize

SPLITS = ("ANTI", "W_PREFIX", "WO_PREFIX")
BASE_INSTRUCTION = instruction_ids("recognize")


class EmptyDatabaseError(ValueError):
    pass


@dataclass
class EntityDatabase:
    entities: list[tuple[int, ...]]
    embeddings: np.ndarray  # n x D, float64

    def __len__(self) -> int:
        return len(self.entities)


def make_entities(seed: int, count: int = 200, length: int = 3, name: str = "eval",
                  exclude: set | None = None) -> list[tuple[int, ...]]:
    """Confusable pairs: a plain content entity and its twin with one position
    swapped for a rare symbol. Returned as [plain_0, rare_0, plain_1, ...]."""
    rng = make_rng(seed, "entities", name)
    exclude = set() if exclude is None else set(exclude)
    content = np.asarray(CONTENT_IDS)
    out: list[tuple[int, ...]] = []
    while len(out) < count:
        plain = _no_repeat_sequence(rng, content, length)
        pos = int(rng.integers(length))
        twin = plain[:pos] + (int(rng.choice(RARE_IDS)),) + plain[pos + 1:]
        if plain in exclude or twin in exclude:
            continue
        exclude.update((plain, twin))
        out.extend((plain, twin))
    return out[:count]


def pool(encoder: SpeechEncoder, frames: np.ndarray) -> np.ndarray:
    return encoder.encode(frames).astype(np.float64).mean(axis=0)


def build_database(entities: Sequence[Sequence[int]], encoder: SpeechEncoder, sp: Speechifier,
                   seed: int = 0) -> EntityDatabase:
    """Mean-pooled frozen-encoder embedding of each entity's rendered speech."""
    if not entities:
        raise EmptyDatabaseError("cannot build a database from an empty entity list")
    ents = [tuple(int(t) for t in e) for e in entities]
    for e in ents:
        check_ids(e)
    rows = [pool(encoder, speechify(e, sp, derive_seed(seed, "entity-voice", *e))) for e in ents]
    return EntityDatabase(ents, np.stack(rows))


def _cosine(query: np.ndarray, table: np.ndarray) -> np.ndarray:
    qn = query / max(np.linalg.norm(query), 1e-12)
    tn = table / np.maximum(np.linalg.norm(table, axis=1, keepdims=True), 1e-12)
    return tn @ qn


def retrieve_embedding(query: np.ndarray, db: EntityDatabase) -> tuple[int, float]:
    if len(db) == 0:
        raise EmptyDatabaseError("retrieval from an empty database")
    scores = _cosine(np.asarray(query, dtype=np.float64), db.embeddings)
    best = int(np.argmax(scores))  # first maximum: lowest index wins ties
    return best, float(scores[best])


def retrieve_top1(speech: np.ndarray, db: EntityDatabase, encoder: SpeechEncoder) -> tuple[tuple[int, ...], float]:
    """Entity whose embedding has the highest cosine similarity to the
    mean-pooled utterance encoding."""
    if len(db) == 0:
        raise EmptyDatabaseError("retrieval from an empty database")
    i, s = retrieve_embedding(pool(encoder, speech), db)
    return db.entities[i], s


def build_bias_prompt(base_instruction: Sequence[int], entity: Sequence[int] | None = None) -> tuple[int, ...]:
    """``base mention e1 e2 ...``; the base instruction alone when no entity is given."""
    base = tuple(base_instruction)
    if not entity:
        return base
    check_ids(entity)
    return base + (TOKEN_ID["mention"],) + tuple(entity)


def contains(seq: Sequence[int], sub: Sequence[int]) -> bool:
    seq, sub = tuple(seq), tuple(sub)
    return any(seq[i:i + len(sub)] == sub for i in range(len(seq) - len(sub) + 1))


@dataclass
class BiasingSplit:
    tag: str
    examples: list[TaskExample]
    entities: list[tuple[int, ...]] = field(default_factory=list)  # ground-truth entity per utterance, () for ANTI

    def __post_init__(self):
        if self.tag not in SPLITS:
            raise ValueError(f"unknown biasing split {self.tag!r}")


def _example(world: World, spoken: tuple[int, ...], seed: int) -> TaskExample:
    frames = speechify(spoken, world.speechifier, seed)
    return TaskExample("recognize", BASE_INSTRUCTION, frames, spoken, "bias", spoken, seed)


def make_split(tag: str, world: World, entities: Sequence[tuple[int, ...]], size: int, seed: int,
               name: str = "eval") -> BiasingSplit:
    """W_PREFIX: carrier + entity. WO_PREFIX: entity alone. ANTI: plain
    utterances containing no database entity."""
    rng = make_rng(seed, "bias-split", name, tag)
    examples, ents = [], []
    if tag == "ANTI":
        for i, u in enumerate(sample_utterances(rng, 20 * size + 100, 3, 8)):
            if len(examples) == size:
                break
            if not any(contains(u, e) for e in entities):
                examples.append(_example(world, u, derive_seed(seed, "bias-voice", name, tag, i)))
                ents.append(())
    else:
        order = rng.permutation(len(entities))
        for i in range(size):
            entity = tuple(entities[int(order[i % len(order)])])
            spoken = entity
            if tag == "W_PREFIX":
                spoken = world.carriers[int(rng.integers(len(world.carriers)))] + entity
            examples.append(_example(world, spoken, derive_seed(seed, "bias-voice", name, tag, i)))
            ents.append(entity)
    return BiasingSplit(tag, examples, ents)


def make_splits(world: World, entities, size: int, seed: int, name: str = "eval") -> dict[str, BiasingSplit]:
    return {tag: make_split(tag, world, entities, size, seed, name) for tag in SPLITS}


def biased_instructions(examples: Sequence[TaskExample], db: EntityDatabase,
                        encoder: SpeechEncoder) -> list[tuple[int, ...]]:
    return [build_bias_prompt(ex.instruction, retrieve_top1(ex.speech, db, encoder)[0]) for ex in examples]


def make_finetune_corpus(world: World, db: EntityDatabase, encoder: SpeechEncoder, size: int,
                         seed: int) -> list[TaskExample]:
    """Mention-prompted recognition over the database's entities, one third
    each of carrier + entity, entity alone, and entity-free utterances."""
    splits = make_splits(world, db.entities, -(-size // 3), seed, name="finetune")
    out = []
    for tag in SPLITS:
        exs = splits[tag].examples
        for ex, instr in zip(exs, biased_instructions(exs, db, encoder)):
            out.append(TaskExample(ex.task, instr, ex.speech, ex.target, ex.family, ex.spoken, ex.seed))
    rng = make_rng(seed, "finetune-order")
    return [out[int(i)] for i in rng.permutation(len(out))[:size]]


@dataclass
class BiasingResult:
    tag: str
    asr: EvalReport
    casr: EvalReport

    @property
    def relative_change(self) -> float:
        """(C-ASR − ASR) / ASR; negative means biasing helped."""
        if self.asr.value == 0:
            return 0.0 if self.casr.value == 0 else float("inf")
        return (self.casr.value - self.asr.value) / self.asr.value


def _empty_report(label: str, fingerprint: str) -> EvalReport:
    return EvalReport("recognize", "wer", float("nan"), 0, fingerprint, {"empty": 1}, label)


def evaluate_biasing(model, splits: dict[str, BiasingSplit], db: EntityDatabase,
                     norm: Normalizer = IDENTITY, fingerprint: str = "") -> dict[str, BiasingResult]:
    """WER per split under the plain recognition prompt (ASR) and the
    retrieved-mention prompt (C-ASR)."""
    out = {}
    for tag, split in splits.items():
        if not split.examples:
            out[tag] = BiasingResult(tag, _empty_report(f"{tag}/ASR", fingerprint),
                                     _empty_report(f"{tag}/C-ASR", fingerprint))
            continue
        asr = evaluate_model(model, split.examples, "recognize", norm, fingerprint, label=f"{tag}/ASR")
        instr = biased_instructions(split.examples, db, model.speech_encoder)
        casr = evaluate_model(model, split.examples, "recognize", norm, fingerprint, instructions=instr,
                              label=f"{tag}/C-ASR")
        out[tag] = BiasingResult(tag, asr, casr)
    return out


def biasing_table(results: dict[str, BiasingResult]) -> str:
    lines = ["split      ASR_WER  C-ASR_WER  relative_change"]
    for tag, r in results.items():
        lines.append(f"{tag:<9} {r.asr.value:>8.4f} {r.casr.value:>10.4f} {r.relative_change:>16.4f}")
    return "\n".join(lines) + "\n"


def retrieval_accuracy(split: BiasingSplit, db: EntityDatabase, encoder: SpeechEncoder) -> float:
    if not split.examples:
        raise EmptyCorpusError("split")
    hits = [retrieve_top1(ex.speech, db, encoder)[0] == e for ex, e in zip(split.examples, split.entities)]
    return float(np.mean(hits))


# ---------------------------------------------------------------- files


def write_entities(path, entities: Sequence[Sequence[int]]) -> None:
    Path(path).write_text("".join(detokenize(e) + "\n" for e in entities))


def read_entities(path) -> list[tuple[int, ...]]:
    return [tuple(tokenize(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def save_database(path, db: EntityDatabase, fingerprint: bytes = b"") -> None:
    """Embeddings in the checkpoint format plus a ``.entities`` manifest."""
    save_checkpoint(path, [Record("db.embeddings", db.embeddings)], fingerprint)
    write_entities(Path(path).with_suffix(".entities"), db.entities)


def load_database(path) -> EntityDatabase:
    _, records = load_checkpoint(path)
    emb = {r.name: r.data for r in records}["db.embeddings"]
    return EntityDatabase(read_entities(Path(path).with_suffix(".entities")), emb)
