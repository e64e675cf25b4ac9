"""The adapter sandwich: frozen speech encoder -> frame subsampling -> trainable
transformer adapter (D -> E) -> ``{instruction}{audio}`` concatenation ->
frozen text LM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbones import (SpeechEncoder, TextLM, batch_subsample, build_speech_encoder, build_text_lm,
                        pad_frames, pad_ids, subsample_indices, teacher_forcing)
from .config import AdapterConfig, Config
from .nn import EncoderStack, Linear, padding_mask
from .params import ParameterStore
from .rng import make_rng
from .tensor import DimensionError, Tensor, get_dtype
from .vocab import PAD


@dataclass(frozen=True)
class Subsampler:
    rate: int = 4
    mode: str = "random_discard"  # or "strided"
    seed: int = 0

    def __post_init__(self):
        if self.rate < 1:
            raise ValueError("subsampling rate must be >= 1")
        if self.mode not in ("random_discard", "strided"):
            raise ValueError(f"unknown subsampling mode {self.mode!r}")

    def indices(self, length: int, rng=None) -> np.ndarray:
        return subsample_indices(length, self.rate, self.mode, rng)


def subsample(enc: Tensor, sub: Subsampler, rng: np.random.Generator | None = None) -> Tensor:
    """Keep ``ceil(U / rate)`` rows of a (U, D) encoding, in order."""
    if enc.shape[0] == 0:
        raise ValueError("cannot subsample an empty encoding")
    if rng is None and sub.mode == "random_discard":
        rng = make_rng(sub.seed, "subsample")
    return T.take_rows(enc, sub.indices(enc.shape[0], rng))


def concat_prompt(text_emb: Tensor, speech_emb: Tensor) -> Tensor:
    """``{text instruction}{audio}`` along time; text rows first."""
    if text_emb.ndim != 2 or speech_emb.ndim != 2 or text_emb.shape[1] != speech_emb.shape[1]:
        raise DimensionError(f"cannot concatenate text {text_emb.shape} with speech {speech_emb.shape}")
    return T.concat([text_emb, speech_emb], axis=0)


def concat_prompt_batch(text: Tensor, text_lengths: np.ndarray,
                        speech: Tensor, speech_lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Row-wise ``text[b, :T_b] || speech[b, :U'_b]``, left-aligned and padded."""
    if text.shape[-1] != speech.shape[-1]:
        raise DimensionError(f"width mismatch: text {text.shape} vs speech {speech.shape}")
    T_max = text.shape[1]
    both = T.concat([text, speech], axis=1)
    lengths = text_lengths + speech_lengths
    index = np.zeros((len(lengths), int(lengths.max())), dtype=np.int64)
    for b, (t, u) in enumerate(zip(text_lengths, speech_lengths)):
        index[b, :t] = np.arange(t)
        index[b, t:t + u] = T_max + np.arange(u)
    return T.gather_rows(both, index), lengths


class Adapter:
    """D -> E projection followed by L pre-norm transformer blocks of width E."""

    def __init__(self, in_dim: int, out_dim: int, cfg: AdapterConfig, rng,
                 store: ParameterStore | None = None, prefix: str = "adapter"):
        self.cfg = cfg
        self.out_dim = out_dim
        self.store = ParameterStore() if store is None else store
        self.in_proj = Linear(self.store, f"{prefix}.in_proj", in_dim, out_dim, rng)
        self.encoder = EncoderStack(self.store, f"{prefix}.encoder", out_dim, cfg.num_heads, cfg.num_layers, rng)

    def __call__(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        return self.encoder(self.in_proj(x), padding_mask(lengths, x.shape[1]))


class SandwichModel:
    def __init__(self, speech_encoder: SpeechEncoder, adapter: Adapter, text_lm: TextLM, subsampler: Subsampler):
        if adapter.out_dim != text_lm.dim:
            raise DimensionError(f"adapter width {adapter.out_dim} != LM embedding width {text_lm.dim}")
        self.speech_encoder = speech_encoder
        self.adapter = adapter
        self.text_lm = text_lm
        self.subsampler = subsampler
        self.store = speech_encoder.store.merge(adapter.store).merge(text_lm.store)

    # ------------------------------------------------------------ internals

    def speech_encodings(self, speech: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        feats, lengths = pad_frames(speech)
        if not lengths.min() > 0:
            raise ValueError("empty speech input")
        return self.speech_encoder(Tensor(feats), lengths), lengths

    def prompt(self, instructions: Sequence[Sequence[int]], speech: Sequence[np.ndarray],
               mode: str, rng=None, encodings=None) -> tuple[Tensor, np.ndarray]:
        """Batched LM-encoder input: instruction embeddings || adapted speech."""
        enc, lengths = self.speech_encodings(speech) if encodings is None else encodings
        index, kept = batch_subsample(lengths, self.subsampler.rate, mode, rng)
        adapted = self.adapter(T.gather_rows(enc, index), kept)
        ids, text_lengths = pad_ids(instructions)
        text = self.text_lm.embed(ids)
        return concat_prompt_batch(text, text_lengths, adapted, kept)

    # ------------------------------------------------------------ public

    def batch_loss(self, instructions, speech, targets, mode: str = "strided", rng=None,
                   encodings=None) -> Tensor:
        x, lengths = self.prompt(instructions, speech, mode, rng, encodings)
        memory = self.text_lm.encode(x, lengths)
        dec_in, dec_out = teacher_forcing(targets)
        logits = self.text_lm.decode(memory, lengths, dec_in)
        return T.cross_entropy_next_token(logits, dec_out, PAD)

    def generate_batch(self, instructions, speech, max_len: int, encodings=None) -> list[list[int]]:
        x, lengths = self.prompt(instructions, speech, "strided", encodings=encodings)
        memory = self.text_lm.encode(x, lengths)
        return self.text_lm.generate(memory, lengths, max_len)

    def adapter_names(self) -> list[str]:
        return self.adapter.store.names()


def _mode(sub: Subsampler) -> str:
    return "strided" if sub.mode == "strided" else "random"


def forward(model: SandwichModel, instruction: Sequence[int], speech: np.ndarray,
            target: Sequence[int], rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced next-token loss for one example."""
    if len(target) == 0:
        raise ValueError("target must be nonempty")
    mode = _mode(model.subsampler)
    if mode == "random" and rng is None:
        rng = make_rng(model.subsampler.seed, "subsample")
    return model.batch_loss([instruction], [speech], [target], mode, rng)


def generate(model: SandwichModel, instruction: Sequence[int], speech: np.ndarray, max_len: int) -> list[int]:
    """Greedy decode with strided subsampling. The returned tokens include the
    terminating EOS when one was produced within ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return model.generate_batch([instruction], [speech], max_len)[0]


def build_sandwich(cfg: Config, speech_encoder: SpeechEncoder | None = None,
                   text_lm: TextLM | None = None, seed: int | None = None) -> SandwichModel:
    """Assemble a model; backbones are frozen, the fresh adapter is trainable."""
    seed = cfg.seed if seed is None else seed
    if speech_encoder is None:
        speech_encoder = build_speech_encoder(cfg.speech_encoder, seed)
    if text_lm is None:
        text_lm = build_text_lm(cfg.text_lm, seed)
    speech_encoder.store.freeze()
    text_lm.store.freeze()
    adapter = Adapter(speech_encoder.dim, text_lm.dim, cfg.adapter,
                      make_rng(seed, "adapter", "init", cfg.adapter.num_layers))
    mode = "strided" if cfg.subsample.mode == "strided" else "random_discard"
    return SandwichModel(speech_encoder, adapter, text_lm, Subsampler(cfg.subsample.rate, mode, seed))


def shuffled_adapter_copy(model: SandwichModel, seed: int, draw: int = 0) -> SandwichModel:
    """Same backbones, adapter tensors with their entries randomly permuted.

    ``draw`` selects one of many independent permutations for the same seed.
    """
    rng = make_rng(seed, "shuffle-control", draw)
    clone_store = ParameterStore()
    adapter = Adapter(model.speech_encoder.dim, model.text_lm.dim, model.adapter.cfg,
                      make_rng(seed, "shuffle-init"), clone_store)
    for name, t in model.adapter.store.items():
        clone_store[name].data[...] = rng.permutation(t.data.reshape(-1)).reshape(t.shape)
    return SandwichModel(model.speech_encoder, adapter, model.text_lm, model.subsampler)
