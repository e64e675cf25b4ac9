"""Adapter training and fine-tuning with trainability masks, checkpointing,
resume, and the adapter-depth ablation."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbones import SpeechEncoder, TextLM
from .config import Config, TrainConfig
from .formats import (format_metrics_line, load_checkpoint, load_into, optimizer_records,
                      save_checkpoint, split_records, store_records)
from .params import AdamState, ParameterStore, TrainingError, adam_step, cosine_lr
from .rng import make_rng
from .sandwich import SandwichModel, build_sandwich
from .tasks import MixtureDataset, TaskExample, sample_batch
from .tensor import Tape

MASK_PRESETS: dict[str, tuple[str, ...]] = {
    "adapter_only": ("adapter.*",),
    # the LM encoder blocks only; the shared embedding table stays frozen
    "adapter_plus_lm_encoder": ("adapter.*", "text_lm.encoder.*"),
    "all": ("*",),
}


class NonFiniteLoss(TrainingError):
    def __init__(self, step: int, loss: float, batch_fingerprint: str):
        super().__init__(f"non-finite loss {loss} at step {step} (batch {batch_fingerprint})")
        self.step = step
        self.batch_fingerprint = batch_fingerprint


@dataclass(frozen=True)
class TrainabilityMask:
    patterns: tuple[str, ...]

    @classmethod
    def preset(cls, name: str) -> "TrainabilityMask":
        if name not in MASK_PRESETS:
            raise ValueError(f"unknown mask preset {name!r}; expected one of {sorted(MASK_PRESETS)}")
        return cls(MASK_PRESETS[name])

    def apply(self, store: ParameterStore) -> list[str]:
        """Flag matching tensors trainable and everything else frozen."""
        return store.set_trainable(self.patterns)


@dataclass
class RunRecord:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    checkpoint: str = ""
    fingerprint: str = ""
    state: AdamState = field(default_factory=AdamState, repr=False)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def batch_fingerprint(batch: Sequence[TaskExample]) -> str:
    h = hashlib.sha256()
    for ex in batch:
        h.update(repr((ex.family, ex.seed, ex.spoken, ex.target)).encode())
    return h.hexdigest()[:16]


def held_out_loss(model: SandwichModel, examples: Sequence[TaskExample], batch: int = 64) -> float:
    """Token-weighted teacher-forced loss with strided subsampling, no tape."""
    if not examples:
        raise ValueError("held-out set is empty")
    total = weight = 0.0
    for i in range(0, len(examples), batch):
        chunk = examples[i:i + batch]
        n = sum(len(ex.target) + 1 for ex in chunk)
        loss = model.batch_loss([ex.instruction for ex in chunk], [ex.speech for ex in chunk],
                                [ex.target for ex in chunk], "strided")
        total += float(loss.data) * n
        weight += n
    return total / weight


def checkpoint_path(run_dir: str | Path, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step}.slmc"


def save_run_checkpoint(path, model: SandwichModel, state: AdamState, fingerprint: bytes) -> None:
    save_checkpoint(path, store_records(model.store) + optimizer_records(state), fingerprint)


def load_run_checkpoint(path, model: SandwichModel, fingerprint: bytes | None = None) -> AdamState:
    """Restore parameters and flags into ``model``; returns the saved optimizer state."""
    _, records = load_checkpoint(path, fingerprint)
    params, state, _ = split_records(records)
    load_into(model.store, params)
    return state or AdamState()


def train(model: SandwichModel, dataset: MixtureDataset, cfg: TrainConfig, *, seed: int,
          mask: str | None = None, subsample_mode: str = "random", held_out: Sequence[TaskExample] = (),
          run_dir: str | Path | None = None, fingerprint: bytes = b"", state: AdamState | None = None,
          stop_at: int | None = None, on_step: Callable[[int, float], None] | None = None) -> RunRecord:
    """Adam on the masked tensors of ``model`` for ``cfg.steps`` total steps.

    Batches and random subsampling for step ``s`` come from a generator keyed
    on ``(seed, "batch", s)``, so a run resumed from a checkpoint at step k
    (pass its ``state``) replays steps k+1.. exactly. ``stop_at`` ends the run
    early without changing that schedule.
    """
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise ValueError("need steps >= 0 and batch_size >= 1")
    TrainabilityMask.preset(mask or cfg.mask).apply(model.store)
    state = state if state is not None else AdamState()
    record = RunRecord(fingerprint=fingerprint.hex(), state=state)
    last = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    log = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log = open(run_dir / "metrics.log", "a" if state.step else "w")
        if state.step == 0:
            path = checkpoint_path(run_dir, 0)
            save_run_checkpoint(path, model, state, fingerprint)
            record.checkpoint = str(path)
    try:
        for step in range(state.step + 1, last + 1):
            rng = make_rng(seed, "batch", step)
            batch = sample_batch(dataset, cfg.batch_size, rng)
            with Tape() as tape:
                loss = model.batch_loss([ex.instruction for ex in batch], [ex.speech for ex in batch],
                                        [ex.target for ex in batch], subsample_mode, rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLoss(step, value, batch_fingerprint(batch))
                tape.backward(loss)
            lr = cosine_lr(cfg.lr, step, cfg.steps) if cfg.lr_schedule == "cosine" else cfg.lr
            adam_step(model.store, lr=lr, state=state)
            model.store.zero_grad()
            record.losses.append(value)
            if log:
                log.write(format_metrics_line(step, value) + "\n")
            if held_out and cfg.eval_every and step % cfg.eval_every == 0:
                metrics = {"held_out_loss": held_out_loss(model, held_out)}
                record.evals.append((step, metrics))
                if log:
                    log.write(format_metrics_line(step, **metrics) + "\n")
            if run_dir is not None and (step == last or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0)):
                path = checkpoint_path(run_dir, step)
                save_run_checkpoint(path, model, state, fingerprint)
                record.checkpoint = str(path)
            if on_step:
                on_step(step, value)
    finally:
        if log:
            log.close()
    return record


def copy_model(model: SandwichModel) -> SandwichModel:
    """Independent copy: fine-tuning variants must not touch the shared backbones."""
    return copy.deepcopy(model)


def finetune(model: SandwichModel, examples: Sequence[TaskExample], cfg: TrainConfig, *, seed: int,
             mask: str = "adapter_only", **kwargs) -> RunRecord:
    """Continue training ``model`` in place on one task corpus under ``mask``."""
    if not examples:
        raise ValueError("fine-tuning corpus is empty")
    dataset = MixtureDataset({"finetune": list(examples)})
    return train(model, dataset, cfg, seed=seed, mask=mask, **kwargs)


@dataclass
class DepthResult:
    depth: int
    record: RunRecord
    held_out_loss: float


def ablate_depth(depths: Sequence[int], cfg: Config, speech_encoder: SpeechEncoder, text_lm: TextLM,
                 dataset: MixtureDataset, held_out: Sequence[TaskExample], steps: int, *,
                 seed: int | None = None, on_step=None) -> list[DepthResult]:
    """One run per adapter depth, equal budgets and data order; the adapter
    initialization is seeded per depth."""
    if not depths:
        raise ValueError("depths must be nonempty")
    seed = cfg.seed if seed is None else seed
    tcfg = TrainConfig(steps=steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                       lr_schedule=cfg.train.lr_schedule, mask="adapter_only", eval_every=0, checkpoint_every=0)
    results = []
    for depth in depths:
        c = cfg.copy()
        c.adapter.num_layers = int(depth)
        model = build_sandwich(c, speech_encoder, text_lm, seed)
        record = train(model, dataset, tcfg, seed=seed, on_step=on_step)
        results.append(DepthResult(int(depth), record, held_out_loss(model, held_out)))
    return results


def depth_table(results: Sequence[DepthResult]) -> str:
    lines = ["depth  final_train_loss  held_out_loss"]
    for r in results:
        lines.append(f"{r.depth:>5}  {r.record.final_loss:>16.6f}  {r.held_out_loss:>13.6f}")
    return "\n".join(lines) + "\n"
