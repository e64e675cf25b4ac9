"""The two toy foundation models: a speech-style encoder (pretrained as the
encoder of an attention recognizer whose decoder is then thrown away) and an
encoder-decoder text LM pretrained on text-form versions of every task."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import SpeechEncoderConfig, TextLMConfig, SubsampleConfig
from .nn import DecoderStack, EncoderStack, Linear, causal_mask, padding_mask, positions
from .params import AdamState, ParameterStore, adam_step, cosine_lr
from .rng import make_rng
from .tensor import Tape, Tensor, get_dtype
from .vocab import BLANK, BOS, EOS, PAD, VOCAB_SIZE, strip_special

log = logging.getLogger(__name__)


class PretrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite pretraining loss {loss} at step {step}")
        self.step = step


# ---------------------------------------------------------------- batching


def pad_ids(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, int(lengths.max(initial=0)))), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def pad_frames(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(f) for f in frames], dtype=np.int64)
    width = frames[0].shape[-1]
    out = np.zeros((len(frames), max(1, int(lengths.max())), width), dtype=get_dtype())
    for i, f in enumerate(frames):
        out[i, :len(f)] = f
    return out, lengths


def teacher_forcing(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs ``<bos> y`` and outputs ``y <eos>``, both pad-filled."""
    dec_in, _ = pad_ids([(BOS,) + tuple(t) for t in targets])
    dec_out, _ = pad_ids([tuple(t) + (EOS,) for t in targets])
    return dec_in, dec_out


# ---------------------------------------------------------------- models


class SpeechEncoder:
    """Frames (B, U, F) -> encodings (B, U, D); length preserving."""

    def __init__(self, cfg: SpeechEncoderConfig, rng: np.random.Generator,
                 store: ParameterStore | None = None, prefix: str = "speech_encoder"):
        self.cfg = cfg
        self.store = ParameterStore() if store is None else store
        self.in_proj = Linear(self.store, f"{prefix}.in_proj", cfg.feature_dim, cfg.dim, rng)
        self.encoder = EncoderStack(self.store, f"{prefix}.encoder", cfg.dim, cfg.num_heads, cfg.num_layers, rng)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def __call__(self, feats: Tensor, lengths: np.ndarray) -> Tensor:
        U = feats.shape[1]
        x = self.in_proj(feats) * math.sqrt(self.cfg.dim) + Tensor(positions(U, self.cfg.dim))
        return self.encoder(x, padding_mask(lengths, U))

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """One utterance, no gradient tracking: (U, F) -> (U, D)."""
        x = Tensor(np.asarray(frames, dtype=get_dtype())[None])
        return self(x, np.array([len(frames)])).data[0]


class ASRDecoder:
    """Attention decoder used only while pretraining the speech encoder."""

    def __init__(self, dim: int, heads: int, num_layers: int, rng, store: ParameterStore,
                 prefix: str = "asr_decoder"):
        self.dim = dim
        self.embed = store.add(f"{prefix}.embed", T.truncated_normal(rng, (VOCAB_SIZE, dim)))
        self.decoder = DecoderStack(store, f"{prefix}.decoder", dim, heads, num_layers, rng)
        self.head = Linear(store, f"{prefix}.head", dim, VOCAB_SIZE, rng)

    def __call__(self, memory: Tensor, memory_lengths, dec_in: np.ndarray) -> Tensor:
        L = dec_in.shape[1]
        x = T.embedding(self.embed, dec_in) * math.sqrt(self.dim) + Tensor(positions(L, self.dim))
        h = self.decoder(x, memory, causal_mask(L), padding_mask(memory_lengths, memory.shape[1]))
        return self.head(h)


class TextLM:
    """Encoder-decoder LM over the 32-token vocabulary.

    ``embed`` is the LM's input embedding layer; ``encode`` is "the rest of
    the stack" that consumes any sequence of E-wide embeddings.
    """

    def __init__(self, cfg: TextLMConfig, rng: np.random.Generator,
                 store: ParameterStore | None = None, prefix: str = "text_lm"):
        self.cfg = cfg
        self.store = ParameterStore() if store is None else store
        E = cfg.dim
        self.table = self.store.add(f"{prefix}.embed", T.truncated_normal(rng, (cfg.vocab_size, E)))
        self.encoder = EncoderStack(self.store, f"{prefix}.encoder", E, cfg.num_heads, cfg.num_layers, rng)
        self.decoder = DecoderStack(self.store, f"{prefix}.decoder", E, cfg.num_heads, cfg.num_layers, rng)
        self.head = Linear(self.store, f"{prefix}.head", E, cfg.vocab_size, rng)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def embed(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids) * math.sqrt(self.cfg.dim)

    def encode(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        L = x.shape[1]
        return self.encoder(x + Tensor(positions(L, self.cfg.dim)), padding_mask(lengths, L))

    def decode(self, memory: Tensor, memory_lengths: np.ndarray, dec_in: np.ndarray) -> Tensor:
        L = dec_in.shape[1]
        x = self.embed(dec_in) + Tensor(positions(L, self.cfg.dim))
        h = self.decoder(x, memory, causal_mask(L), padding_mask(memory_lengths, memory.shape[1]))
        return self.head(h)

    def generate(self, memory: Tensor, memory_lengths: np.ndarray, max_len: int) -> list[list[int]]:
        """Greedy decoding; each output stops after its first EOS (kept) or at ``max_len``."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        B = memory.shape[0]
        seqs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logits = self.decode(memory, memory_lengths, seqs).data[:, -1]
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        out = []
        for row in seqs[:, 1:]:
            toks = []
            for t in row:
                if t == PAD:
                    break
                toks.append(int(t))
                if t == EOS:
                    break
            out.append(toks)
        return out

    def text_memory(self, sources: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        ids, lengths = pad_ids(sources)
        return self.encode(self.embed(ids), lengths), lengths

    def loss(self, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
             noise: np.ndarray | None = None) -> Tensor:
        """Teacher-forced loss; ``noise`` (B, S, E) is added to the source embeddings."""
        if noise is None:
            memory, lengths = self.text_memory(sources)
        else:
            ids, lengths = pad_ids(sources)
            memory = self.encode(self.embed(ids) + Tensor(noise[:, :ids.shape[1]].astype(get_dtype())), lengths)
        dec_in, dec_out = teacher_forcing(targets)
        return T.cross_entropy_next_token(self.decode(memory, lengths, dec_in), dec_out, PAD)

    def respond(self, sources: Sequence[Sequence[int]], max_len: int = 16) -> list[list[int]]:
        memory, lengths = self.text_memory(sources)
        return self.generate(memory, lengths, max_len)


# ---------------------------------------------------------------- subsampling


def subsample_indices(length: int, rate: int, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Kept frame indices: ``ceil(length / rate)`` of them, strictly increasing."""
    if length < 1:
        raise ValueError("cannot subsample an empty sequence")
    if rate < 1:
        raise ValueError("subsampling rate must be >= 1")
    keep = -(-length // rate)
    if mode == "strided":
        return np.arange(0, length, rate, dtype=np.int64)
    if mode in ("random", "random_discard"):
        if rng is None:
            raise ValueError("random subsampling needs a generator")
        return np.sort(rng.choice(length, size=keep, replace=False)).astype(np.int64)
    raise ValueError(f"unknown subsampling mode {mode!r}")


def batch_subsample(lengths: np.ndarray, rate: int, mode: str, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row kept indices as a padded (B, U') matrix plus the kept counts."""
    rows = [subsample_indices(int(n), rate, mode, rng) for n in lengths]
    kept = np.array([len(r) for r in rows], dtype=np.int64)
    index = np.zeros((len(rows), int(kept.max())), dtype=np.int64)
    for i, r in enumerate(rows):
        index[i, :len(r)] = r
    return index, kept


# ---------------------------------------------------------------- checkpoints


@dataclass
class BackboneCheckpoint:
    fingerprint: bytes
    store: ParameterStore
    loss_history: list[float] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)


def freeze(checkpoint: BackboneCheckpoint | ParameterStore) -> ParameterStore:
    store = checkpoint.store if isinstance(checkpoint, BackboneCheckpoint) else checkpoint
    return store.freeze()


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def _fit(store: ParameterStore, steps: int, lr: float, batch_loss: Callable[[int], Tensor],
         on_step: Callable[[int, float], None] | None = None) -> list[float]:
    history = []
    state = AdamState()
    for step in range(1, steps + 1):
        with Tape() as tape:
            loss = batch_loss(step)
            value = float(loss.data)
            if not math.isfinite(value):
                raise PretrainingError(step, value)
            tape.backward(loss)
        adam_step(store, lr=cosine_lr(lr, step, steps), state=state)
        store.zero_grad()
        history.append(value)
        if on_step:
            on_step(step, value)
    return history


def build_speech_encoder(cfg: SpeechEncoderConfig, seed: int) -> SpeechEncoder:
    return SpeechEncoder(cfg, make_rng(seed, "speech_encoder", "init"))


def build_text_lm(cfg: TextLMConfig, seed: int) -> TextLM:
    return TextLM(cfg, make_rng(seed, "text_lm", "init"))


def pretrain_speech_encoder(cfg: SpeechEncoderConfig, corpus: Sequence[tuple[Sequence[int], np.ndarray]],
                            steps: int, seed: int, *, held_out=(), batch_size: int = 32, lr: float = 1e-3,
                            subsample: SubsampleConfig | None = None, ctc_weight: float = 1.0,
                            fingerprint: bytes = b"", on_step=None) -> BackboneCheckpoint:
    """Train the encoder inside a recognizer on (tokens, frames) pairs.

    The recognizer's decoder reads subsampled encodings, exactly as the adapter
    will later, so every kept frame has to carry its neighbours' identity. A
    CTC head over the same subsampled encodings (weighted by ``ctc_weight``)
    pushes each kept frame towards standing for one token or for nothing.
    """
    if not corpus:
        raise ValueError("speech pretraining corpus is empty")
    subsample = subsample or SubsampleConfig()
    encoder = build_speech_encoder(cfg, seed)
    asr_store = ParameterStore()
    decoder = ASRDecoder(cfg.dim, cfg.num_heads, cfg.num_layers, make_rng(seed, "asr_decoder", "init"), asr_store)
    ctc_head = Linear(asr_store, "asr.ctc", cfg.dim, VOCAB_SIZE, make_rng(seed, "asr_ctc", "init"))
    store = encoder.store.merge(asr_store)

    def run(batch, mode, rng):
        feats, lengths = pad_frames([f for _, f in batch])
        enc = encoder(Tensor(feats), lengths)
        index, kept = batch_subsample(lengths, subsample.rate, mode, rng)
        memory = T.gather_rows(enc, index)
        dec_in, dec_out = teacher_forcing([t for t, _ in batch])
        return decoder(memory, kept, dec_in), dec_out, memory, kept

    def batch_loss(step):
        rng = make_rng(seed, "speech-pretrain", step)
        batch = [corpus[i] for i in rng.integers(len(corpus), size=batch_size)]
        logits, dec_out, memory, kept = run(batch, subsample.mode, rng)
        loss = T.cross_entropy_next_token(logits, dec_out, PAD)
        if ctc_weight:
            ctc = T.ctc_loss(ctc_head(memory), kept, [list(t) for t, _ in batch], BLANK)
            loss = loss + ctc * ctc_weight
        return loss

    history = _fit(store, steps, lr, batch_loss, on_step)
    metrics = {}
    if held_out:
        correct = total = 0
        for i in range(0, len(held_out), 64):
            logits, dec_out, _, _ = run(held_out[i:i + 64], subsample.eval_mode, None)
            keep = dec_out != PAD
            correct += int((logits.data.argmax(-1) == dec_out)[keep].sum())
            total += int(keep.sum())
        metrics["held_out_token_accuracy"] = correct / total
    return BackboneCheckpoint(fingerprint, encoder.store, history, metrics)


def pretrain_text_lm(cfg: TextLMConfig, corpus, steps: int, seed: int, *, held_out=(),
                     batch_size: int = 64, lr: float = 1e-3, embed_noise: float = 0.0,
                     fingerprint: bytes = b"", on_step=None) -> BackboneCheckpoint:
    """Teacher-forced pretraining on :class:`~slm.tasks.TextExample` records.

    With ``embed_noise`` > 0, half of each batch gets Gaussian noise of that
    standard deviation added to its source embeddings, so the frozen LM later
    reads inputs that are near, not exactly on, its token embeddings.
    """
    if not corpus:
        raise ValueError("text pretraining corpus is empty")
    lm = build_text_lm(cfg, seed)

    def batch_loss(step):
        rng = make_rng(seed, "lm-pretrain", step)
        batch = [corpus[i] for i in rng.integers(len(corpus), size=batch_size)]
        noise = None
        if embed_noise:
            width = max(len(ex.source) for ex in batch)
            noise = rng.standard_normal((batch_size, width, cfg.dim)) * embed_noise
            noise[rng.random(batch_size) < 0.5] = 0.0
        return lm.loss([ex.source for ex in batch], [ex.target for ex in batch], noise)

    history = _fit(lm.store, steps, lr, batch_loss, on_step)
    metrics = {}
    if held_out:
        metrics.update(text_exact_match(lm, held_out))
    return BackboneCheckpoint(fingerprint, lm.store, history, metrics)


def text_exact_match(lm: TextLM, examples, batch: int = 128) -> dict[str, float]:
    """Exact-sequence match of greedy outputs, overall and per family."""
    hits: dict[str, list[int]] = {}
    for i in range(0, len(examples), batch):
        chunk = examples[i:i + batch]
        outs = lm.respond([ex.source for ex in chunk], max_len=max(len(ex.target) for ex in chunk) + 2)
        for ex, out in zip(chunk, outs):
            hits.setdefault(ex.family, []).append(int(tuple(strip_special(out)) == tuple(ex.target)))
    result = {f"exact_match.{k}": float(np.mean(v)) for k, v in sorted(hits.items())}
    result["exact_match"] = float(np.mean([h for v in hits.values() for h in v]))
    return result
