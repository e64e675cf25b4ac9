"""Synthetic task mixture: a frame renderer standing in for TTS, the three
training task archetypes, text-form versions for LM pretraining, and the
proportional mixture sampler."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import vocab
from .rng import derive_seed, make_rng
from .vocab import BLANK, CONTENT_IDS, RARE_IDS, TOKEN_ID, VocabularyError

TEMPLATES = {
    "recognize": ("recognize", "speech", "lang_a"),
    "translate": ("translate", "speech", "lang_a", "lang_b"),
    "reverse": ("reverse", "speech"),
    "length": ("length", "speech"),
    "last": ("last", "speech"),
    "lookup": ("lookup", "speech"),
}
INSTRUCT_FAMILIES = ("reverse", "length", "last", "lookup")
# lookup is known to the LM from text pretraining but withheld from adapter training
ADAPTER_FAMILIES = ("reverse", "length", "last")
TASK_OF_FAMILY = {"recognize": "recognize", "translate": "translate",
                  **{f: "instruct" for f in INSTRUCT_FAMILIES}}


def instruction_ids(family: str) -> tuple[int, ...]:
    return tuple(TOKEN_ID[w] for w in TEMPLATES[family])


# instruct phrasings vary in length; ASR and AST prompts stay fixed
MAX_INSTRUCTION_FILL = 4


def instruction_variant(family: str, rng: np.random.Generator,
                        max_fill: int = MAX_INSTRUCTION_FILL) -> tuple[int, ...]:
    """A phrasing of an instruct family's template with 0..max_fill blank
    fillers after the leading task word. Other families keep their template."""
    base = list(instruction_ids(family))
    if family not in INSTRUCT_FAMILIES or max_fill <= 0:
        return tuple(base)
    for _ in range(int(rng.integers(0, max_fill + 1))):
        base.insert(int(rng.integers(1, len(base) + 1)), BLANK)
    return tuple(base)


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class Speechifier:
    """Renders a token sequence as a frame matrix: each token becomes k noisy
    copies of its prototype row, k drawn uniformly from [min_frames, max_frames]."""

    prototypes: np.ndarray  # V x F
    min_frames: int = 3
    max_frames: int = 6
    noise_std: float = 0.1

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def __call__(self, tokens: Sequence[int], seed: int) -> np.ndarray:
        return speechify(tokens, self, seed)


def speechify(tokens: Sequence[int], sp: Speechifier, seed: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= sp.prototypes.shape[0]):
        raise VocabularyError(f"token outside the speechifier vocabulary: {tokens.tolist()}")
    rng = np.random.Generator(np.random.PCG64(seed))
    counts = rng.integers(sp.min_frames, sp.max_frames + 1, size=tokens.size)
    frames = np.repeat(sp.prototypes[tokens], counts, axis=0)
    if sp.noise_std > 0:
        frames = frames + sp.noise_std * rng.standard_normal(frames.shape)
    return frames


@dataclass(frozen=True)
class World:
    """Everything about the toy universe that is fixed once per master seed."""

    seed: int
    speechifier: Speechifier
    cipher: np.ndarray  # full-vocabulary id map, identity off the content symbols
    facts: dict[tuple[int, ...], int]
    carriers: tuple[tuple[int, ...], ...]

    def translate(self, tokens: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(self.cipher[t]) for t in tokens)


def make_world(seed: int, feature_dim: int = 16, noise_std: float = 0.1,
               min_frames: int = 3, max_frames: int = 6, num_facts: int = 32) -> World:
    rng = make_rng(seed, "world")
    prototypes = rng.standard_normal((vocab.VOCAB_SIZE, feature_dim))
    content = np.array(CONTENT_IDS)
    while True:
        perm = rng.permutation(content)
        if not np.any(perm == content):
            break
    cipher = np.arange(vocab.VOCAB_SIZE)
    cipher[content] = perm
    pairs = [(a, b) for a in CONTENT_IDS for b in CONTENT_IDS if a != b]
    keys = [pairs[i] for i in rng.choice(len(pairs), size=num_facts, replace=False)]
    values = np.resize(rng.permutation(content), num_facts)
    rng.shuffle(values)
    facts = {tuple(int(t) for t in k): int(v) for k, v in zip(keys, values)}
    carriers = tuple(tuple(int(t) for t in rng.choice(content, size=2, replace=False)) for _ in range(3))
    sp = Speechifier(prototypes, min_frames, max_frames, noise_std)
    return World(seed, sp, cipher, facts, carriers)


@dataclass
class TaskExample:
    task: str
    instruction: tuple[int, ...]
    speech: np.ndarray
    target: tuple[int, ...]
    family: str = ""
    spoken: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not self.target:
            raise ValueError("task example with empty target")


@dataclass
class UtteranceCorpus:
    """A pool of spoken token sequences plus the renderer that voices them.

    Per-example frame seeds are derived from (seed, name, task, index) so any
    example can be regenerated on its own.
    """

    utterances: list[tuple[int, ...]]
    world: World
    seed: int
    name: str = "train"

    def example_seed(self, task: str, index: int) -> int:
        return derive_seed(self.seed, self.name, task, index)

    def voice(self, tokens: Sequence[int], task: str, index: int) -> tuple[np.ndarray, int]:
        s = self.example_seed(task, index)
        return speechify(tokens, self.world.speechifier, s), s


def sample_utterances(rng: np.random.Generator, n: int, min_len: int = 2, max_len: int = 12,
                      symbols: Sequence[int] = CONTENT_IDS,
                      exclude: set | None = None) -> list[tuple[int, ...]]:
    """``n`` distinct random utterances, none of which is in ``exclude``.

    Adjacent tokens always differ: the renderer gives a repeated token no
    boundary, so "a a" and a long "a" would be acoustically identical.
    """
    exclude = set() if exclude is None else exclude
    seen: set[tuple[int, ...]] = set()
    out = []
    symbols = np.asarray(symbols)
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise SamplingError(f"could not draw {n} distinct utterances")
        length = int(rng.integers(min_len, max_len + 1))
        u = _no_repeat_sequence(rng, symbols, length)
        if u in seen or u in exclude:
            continue
        seen.add(u)
        out.append(u)
    return out


def _no_repeat_sequence(rng: np.random.Generator, symbols: np.ndarray, length: int) -> tuple[int, ...]:
    # first symbol uniform, each later one uniform over the symbols != previous
    out = [int(symbols[rng.integers(len(symbols))])]
    for _ in range(length - 1):
        j = int(rng.integers(len(symbols) - 1))
        cand = int(symbols[j])
        out.append(int(symbols[-1]) if cand == out[-1] else cand)
    return tuple(out)


def split_utterances(utterances: Sequence[tuple[int, ...]], held_out: int):
    """Disjoint train / held-out split, taken before anything is voiced."""
    return list(utterances[held_out:]), list(utterances[:held_out])


def family_target(family: str, spoken: Sequence[int], world: World) -> tuple[int, ...]:
    spoken = tuple(spoken)
    if family == "recognize":
        return spoken
    if family == "translate":
        return world.translate(spoken)
    if family == "reverse":
        return spoken[::-1]
    if family == "length":
        return (vocab.length_token(len(spoken)),)
    if family == "last":
        return spoken[-1:]
    if family == "lookup":
        return (world.facts[spoken],)
    raise ValueError(f"unknown family {family!r}")


def _make(corpus: UtteranceCorpus, family: str, size: int, spoken_pool=None) -> list[TaskExample]:
    pool = corpus.utterances if spoken_pool is None else spoken_pool
    if size and not pool:
        raise SamplingError("empty utterance pool")
    out = []
    for i in range(size):
        spoken = pool[i % len(pool)]
        speech, seed = corpus.voice(spoken, family, i)
        out.append(TaskExample(TASK_OF_FAMILY[family], instruction_ids(family), speech,
                               family_target(family, spoken, corpus.world), family, spoken, seed))
    return out


def make_recognition_task(corpus: UtteranceCorpus, size: int) -> list[TaskExample]:
    return _make(corpus, "recognize", size)


def make_translation_task(corpus: UtteranceCorpus, cipher: np.ndarray | None, size: int) -> list[TaskExample]:
    if cipher is not None and not np.array_equal(cipher, corpus.world.cipher):
        corpus = UtteranceCorpus(corpus.utterances, _with_cipher(corpus.world, cipher), corpus.seed, corpus.name)
    return _make(corpus, "translate", size)


def _with_cipher(world: World, cipher: np.ndarray) -> World:
    cipher = np.asarray(cipher)
    if sorted(cipher.tolist()) != list(range(len(cipher))):
        raise ValueError("cipher must be a bijection over the vocabulary")
    return World(world.seed, world.speechifier, cipher, world.facts, world.carriers)


def make_instruction_task(corpus: UtteranceCorpus, size: int,
                          families: Sequence[str] = ADAPTER_FAMILIES,
                          max_fill: int = MAX_INSTRUCTION_FILL) -> list[TaskExample]:
    """Examples cycle through ``families``; lookup draws its spoken keys from the
    fact table. Pass ``max_fill=0`` for the canonical phrasing only."""
    out: list[TaskExample] = []
    per_family = {f: 0 for f in families}
    keys = list(corpus.world.facts)
    for i in range(size):
        family = families[i % len(families)]
        j = per_family[family]
        per_family[family] += 1
        if family == "lookup":
            spoken = keys[j % len(keys)]
        else:
            spoken = corpus.utterances[j % len(corpus.utterances)]
        speech, seed = corpus.voice(spoken, family, j)
        instr = instruction_variant(family, make_rng(corpus.seed, "phrasing", corpus.name, family, j), max_fill)
        out.append(TaskExample("instruct", instr, speech,
                               family_target(family, spoken, corpus.world), family, spoken, seed))
    return out


@dataclass
class MixtureDataset:
    tasks: dict[str, list[TaskExample]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.tasks.values())

    @property
    def names(self) -> list[str]:
        return [k for k, v in self.tasks.items() if v]

    @property
    def weights(self) -> np.ndarray:
        counts = np.array([len(self.tasks[k]) for k in self.names], dtype=float)
        return counts / counts.sum()

    def all_examples(self) -> list[TaskExample]:
        return [ex for k in self.names for ex in self.tasks[k]]


def sample_batch(dataset: MixtureDataset, batch_size: int, rng: np.random.Generator) -> list[TaskExample]:
    """I.i.d. draws; a task is picked with probability proportional to its example count."""
    if batch_size == 0:
        return []
    if len(dataset) == 0:
        raise SamplingError("cannot sample from an empty dataset")
    names = dataset.names
    which = rng.choice(len(names), size=batch_size, p=dataset.weights)
    out = []
    for k in which:
        pool = dataset.tasks[names[k]]
        out.append(pool[int(rng.integers(len(pool)))])
    return out


# ---------------------------------------------------------------- text-form tasks


@dataclass(frozen=True)
class TextExample:
    family: str
    source: tuple[int, ...]
    target: tuple[int, ...]


def insert_blanks(tokens: Sequence[int], rng: np.random.Generator, max_extra: int | None = None) -> tuple[int, ...]:
    """Scatter blank tokens among ``tokens``; up to about half as many again."""
    tokens = list(tokens)
    if max_extra is None:
        max_extra = (len(tokens) + 1) // 2 + 1
    extra = int(rng.integers(0, max_extra + 1))
    for _ in range(extra):
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), BLANK)
    return tuple(tokens)


def bias_text_example(world: World, rng: np.random.Generator, entity: Sequence[int],
                      mode: str) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """(mention, heard content, transcript) for one text-form biasing case.

    ``mode`` is ``exact`` (entity heard correctly), ``misheard`` (every rare
    symbol of the entity heard as some content symbol), ``distractor`` (the
    mention is unrelated to what was said) or ``near_miss`` (a misheard entity
    with one more position changed, inside random context: close to the
    mention but not it, so the transcript stays as heard).
    """
    entity = tuple(entity)
    if mode == "distractor":
        spoken = sample_utterances(rng, 1)[0]
        return entity, spoken, spoken
    if mode == "near_miss":
        spoken = _near_miss(rng, entity)
        return entity, spoken, spoken
    prefix = world.carriers[int(rng.integers(len(world.carriers)))] if rng.random() < 0.5 else ()
    truth = prefix + entity
    if mode == "exact":
        return entity, truth, truth
    heard = tuple(int(rng.choice(CONTENT_IDS)) if t in RARE_IDS else t for t in entity)
    return entity, prefix + heard, truth


def _near_miss(rng: np.random.Generator, entity: tuple[int, ...]) -> tuple[int, ...]:
    content = np.asarray(CONTENT_IDS)
    plain = [i for i, t in enumerate(entity) if t not in RARE_IDS]
    while True:
        heard = [int(rng.choice(content)) if t in RARE_IDS else t for t in entity]
        i = plain[int(rng.integers(len(plain)))]
        heard[i] = int(rng.choice(content[content != entity[i]]))
        left = _no_repeat_sequence(rng, content, 3)[:int(rng.integers(4))]
        right = _no_repeat_sequence(rng, content, 3)[:int(rng.integers(4))]
        spoken = left + tuple(heard) + right
        if all(a != b for a, b in zip(spoken, spoken[1:])):
            return spoken


def random_entity(rng: np.random.Generator, length: int = 3, rare: bool = True) -> tuple[int, ...]:
    tokens = list(_no_repeat_sequence(rng, np.asarray(CONTENT_IDS), length))
    if rare:
        tokens[int(rng.integers(length))] = int(rng.choice(RARE_IDS))
    return tuple(tokens)


TEXT_FAMILIES = ("recognize", "translate", "reverse", "length", "last", "lookup", "bias")


def make_text_corpus(world: World, size: int, seed: int, name: str = "lm",
                     families: Sequence[str] = TEXT_FAMILIES, blank_prob: float = 0.7,
                     exclude: set | None = None, max_fill: int = MAX_INSTRUCTION_FILL) -> list[TextExample]:
    """Text-only versions of every task, the material the toy LM is pretrained on."""
    rng = make_rng(seed, "text-corpus", name)
    keys = list(world.facts)
    out = []
    for i in range(size):
        family = families[i % len(families)]
        if family == "lookup":
            spoken = keys[int(rng.integers(len(keys)))]
            instr, target = instruction_variant(family, rng, max_fill), family_target(family, spoken, world)
        elif family == "bias":
            mode = ("exact", "misheard", "misheard", "distractor", "near_miss", "near_miss")[int(rng.integers(6))]
            entity = random_entity(rng, rare=rng.random() < 0.75)
            mention, spoken, target = bias_text_example(world, rng, entity, mode)
            instr = instruction_ids("recognize") + (TOKEN_ID["mention"],) + mention
        else:
            spoken = sample_utterances(rng, 1, exclude=exclude)[0]
            instr, target = instruction_variant(family, rng, max_fill), family_target(family, spoken, world)
        content = insert_blanks(spoken, rng) if rng.random() < blank_prob else tuple(spoken)
        out.append(TextExample(family, instr + content, tuple(target)))
    return out
