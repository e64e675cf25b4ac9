"""Glue between configuration and the modules: builds the synthetic world and
corpora, pretrains or loads the backbones, and assembles sandwich models.
The command line and the acceptance suite both go through here."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbones import (BackboneCheckpoint, SpeechEncoder, TextLM, build_speech_encoder, build_text_lm,
                        pretrain_speech_encoder, pretrain_text_lm)
from .config import Config
from .formats import (CheckpointError, Record, load_checkpoint, load_into, read_corpus, save_checkpoint,
                      split_records, store_records)
from .rng import derive_seed, make_rng
from .sandwich import SandwichModel, build_sandwich
from .tasks import (ADAPTER_FAMILIES, MixtureDataset, TaskExample, UtteranceCorpus, World, make_instruction_task,
                    make_recognition_task, make_text_corpus, make_translation_task, make_world,
                    sample_utterances, speechify)

TRAIN_FILES = ("train_recognize", "train_translate", "train_instruct")
HELD_OUT_FILES = ("held_out_recognize", "held_out_translate", "held_out_instruct", "held_out_lookup")


def world_for(cfg: Config) -> World:
    sp = cfg.speechifier
    return make_world(cfg.seed, cfg.speech_encoder.feature_dim, sp.noise_std, sp.min_frames, sp.max_frames)


@dataclass
class Utterances:
    train: list[tuple[int, ...]]
    held_out: list[tuple[int, ...]]


def utterance_pools(cfg: Config) -> Utterances:
    """Held-out utterances are drawn first and excluded from every training pool."""
    rng = make_rng(cfg.seed, "utterances")
    held = sample_utterances(rng, cfg.corpus.held_out)
    n = max(cfg.corpus.recognize, cfg.corpus.translate, cfg.corpus.instruct, 1)
    train = sample_utterances(rng, n, exclude=set(held))
    return Utterances(train, held)


# ---------------------------------------------------------------- backbones


def speech_pretraining_data(cfg: Config, world: World):
    pools = utterance_pools(cfg)
    rng = make_rng(cfg.seed, "speech-corpus")
    n, h = cfg.pretrain.speech_corpus, cfg.pretrain.held_out
    utts = sample_utterances(rng, n + h, exclude=set(pools.held_out))

    def voice(i, u):
        return u, speechify(u, world.speechifier, derive_seed(cfg.seed, "speech-corpus", i))

    data = [voice(i, u) for i, u in enumerate(utts)]
    return data[h:], data[:h]


def lm_pretraining_data(cfg: Config, world: World):
    held = set(utterance_pools(cfg).held_out)
    train = make_text_corpus(world, cfg.pretrain.lm_corpus, cfg.seed, "lm-train", exclude=held,
                             max_fill=cfg.corpus.instruct_fill)
    test = make_text_corpus(world, cfg.pretrain.held_out, cfg.seed, "lm-held-out", blank_prob=0.0, max_fill=0)
    return train, test


def pretrain_speech(cfg: Config, world: World | None = None, steps: int | None = None,
                    on_step=None) -> BackboneCheckpoint:
    world = world or world_for(cfg)
    train, held = speech_pretraining_data(cfg, world)
    p = cfg.pretrain
    return pretrain_speech_encoder(cfg.speech_encoder, train, p.speech_steps if steps is None else steps,
                                   cfg.seed, held_out=held, batch_size=p.speech_batch_size, lr=p.speech_lr,
                                   subsample=cfg.subsample, ctc_weight=p.speech_ctc_weight,
                                   fingerprint=speech_fingerprint(cfg),
                                   on_step=on_step)


def pretrain_lm(cfg: Config, world: World | None = None, steps: int | None = None,
                on_step=None) -> BackboneCheckpoint:
    world = world or world_for(cfg)
    train, held = lm_pretraining_data(cfg, world)
    p = cfg.pretrain
    return pretrain_text_lm(cfg.text_lm, train, p.lm_steps if steps is None else steps, cfg.seed,
                            held_out=held, batch_size=p.lm_batch_size, lr=p.lm_lr,
                            embed_noise=p.lm_embed_noise,
                            fingerprint=lm_fingerprint(cfg), on_step=on_step)


def speech_fingerprint(cfg: Config) -> bytes:
    return cfg.fingerprint(("speech_encoder",))


def lm_fingerprint(cfg: Config) -> bytes:
    return cfg.fingerprint(("text_lm",))


def save_backbone(path, ckpt: BackboneCheckpoint) -> None:
    records = store_records(ckpt.store)
    records.append(Record("meta.loss_history", np.asarray(ckpt.loss_history, dtype=np.float64)))
    for k, v in ckpt.metrics.items():
        records.append(Record(f"meta.{k}", np.asarray(float(v))))
    save_checkpoint(path, records, ckpt.fingerprint)


def load_speech_encoder(cfg: Config, path: str | Path | None = None) -> SpeechEncoder:
    path = path or cfg.speech_encoder.checkpoint
    if not path:
        raise CheckpointError("no speech encoder checkpoint configured (speech_encoder.checkpoint)")
    enc = build_speech_encoder(cfg.speech_encoder, cfg.seed)
    _, records = load_checkpoint(path, speech_fingerprint(cfg))
    load_into(enc.store, split_records(records)[0])
    enc.store.freeze()
    return enc


def load_text_lm(cfg: Config, path: str | Path | None = None) -> TextLM:
    path = path or cfg.text_lm.checkpoint
    if not path:
        raise CheckpointError("no text LM checkpoint configured (text_lm.checkpoint)")
    lm = build_text_lm(cfg.text_lm, cfg.seed)
    _, records = load_checkpoint(path, lm_fingerprint(cfg))
    load_into(lm.store, split_records(records)[0])
    lm.store.freeze()
    return lm


def load_sandwich(cfg: Config, path: str | Path) -> SandwichModel:
    """Rebuild a full model from a sandwich checkpoint (backbones included)."""
    model = build_sandwich(cfg)
    _, records = load_checkpoint(path, cfg.fingerprint())
    load_into(model.store, split_records(records)[0])
    return model


# ---------------------------------------------------------------- task corpora


@dataclass
class Corpora:
    train: MixtureDataset
    held_out: dict[str, list[TaskExample]] = field(default_factory=dict)


def lookup_eval_set(world: World, seed: int, voicings: int = 3) -> list[TaskExample]:
    """Every fact key, spoken ``voicings`` times with fresh frame seeds."""
    keys = list(world.facts) * voicings
    corpus = UtteranceCorpus(keys, world, seed, "held-out-lookup")
    return make_instruction_task(corpus, len(keys), families=("lookup",), max_fill=0)


def build_corpora(cfg: Config, world: World | None = None) -> Corpora:
    world = world or world_for(cfg)
    pools = utterance_pools(cfg)
    c = cfg.corpus
    if c.dir:
        return load_corpora(c.dir, world)
    train_c = UtteranceCorpus(pools.train, world, cfg.seed, "train")
    held_c = UtteranceCorpus(pools.held_out, world, cfg.seed, "held-out")
    h = len(pools.held_out)
    train = MixtureDataset({
        "recognize": make_recognition_task(train_c, c.recognize),
        "translate": make_translation_task(train_c, None, c.translate),
        "instruct": make_instruction_task(train_c, c.instruct, ADAPTER_FAMILIES, c.instruct_fill),
    })
    held = {
        "recognize": make_recognition_task(held_c, h),
        "translate": make_translation_task(held_c, None, h),
        "instruct": make_instruction_task(held_c, h, ADAPTER_FAMILIES, max_fill=0),
        "lookup": lookup_eval_set(world, cfg.seed),
    }
    return Corpora(train, held)


def load_corpora(directory, world: World) -> Corpora:
    d = Path(directory)
    train = MixtureDataset({name.split("_", 1)[1]: read_corpus(d / f"{name}.jsonl", world) for name in TRAIN_FILES})
    held = {name.split("_", 2)[2]: read_corpus(d / f"{name}.jsonl", world) for name in HELD_OUT_FILES}
    return Corpora(train, held)


def held_out_mixture(corpora: Corpora) -> list[TaskExample]:
    return corpora.held_out["recognize"] + corpora.held_out["translate"] + corpora.held_out["instruct"]


# ---------------------------------------------------------------- biasing


@dataclass
class BiasSetup:
    entities: list[tuple[int, ...]]
    db: "EntityDatabase"
    splits: dict
    finetune_entities: list[tuple[int, ...]]
    finetune_db: "EntityDatabase"


def bias_setup(cfg: Config, world: World, encoder: SpeechEncoder) -> BiasSetup:
    """Evaluation database and splits, plus a disjoint entity set for fine-tuning."""
    from .biasing import build_database, make_entities, make_splits

    b = cfg.bias
    entities = make_entities(cfg.seed, b.entities, name="eval")
    ft_entities = make_entities(cfg.seed, b.entities, name="finetune", exclude=set(entities))
    db = build_database(entities, encoder, world.speechifier, cfg.seed)
    ft_db = build_database(ft_entities, encoder, world.speechifier, derive_seed(cfg.seed, "finetune"))
    splits = make_splits(world, entities, b.split_size, cfg.seed)
    return BiasSetup(entities, db, splits, ft_entities, ft_db)


def bias_finetune_corpus(cfg: Config, world: World, encoder: SpeechEncoder, setup: BiasSetup) -> list[TaskExample]:
    from .biasing import make_finetune_corpus

    return make_finetune_corpus(world, setup.finetune_db, encoder, cfg.bias.finetune_size, cfg.seed)
