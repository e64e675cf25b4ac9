"""The reference protocol end to end: pretrain both backbones, train the
adapter, then run every evaluation and ablation. Each stage caches its output
under a work directory keyed by the config, so reruns pick up where they
stopped; stage wall-clock times are stored with the results."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .biasing import evaluate_biasing, retrieval_accuracy
from .cascade import run_cascade
from .config import Config, parse_list
from .evaluation import evaluate_model
from .pipeline import (bias_finetune_corpus, bias_setup, build_corpora, held_out_mixture, load_speech_encoder,
                       load_text_lm, pretrain_lm, pretrain_speech, save_backbone, world_for)
from .sandwich import build_sandwich, shuffled_adapter_copy
from .trainer import (TrainConfig, ablate_depth, copy_model, finetune, load_run_checkpoint, save_run_checkpoint,
                      train)

log = logging.getLogger(__name__)

# independent adapter permutations averaged into the zero-shot control
CONTROL_DRAWS = 5


class Stages:
    """Tiny stage cache: a JSON result per stage plus any files it wrote."""

    def __init__(self, workdir: str | Path, cfg: Config):
        self.dir = Path(workdir) / hashlib.sha256(cfg.to_text().encode()).hexdigest()[:16]
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.snapshot").write_text(cfg.to_text())

    def path(self, name: str) -> Path:
        return self.dir / name

    def run(self, name: str, fn: Callable[[], dict]) -> dict:
        out = self.dir / f"{name}.json"
        if out.exists():
            return json.loads(out.read_text())
        t0 = time.perf_counter()
        result = fn()
        result["seconds"] = time.perf_counter() - t0
        out.write_text(json.dumps(result, indent=1, sort_keys=True))
        log.info("stage %s done in %.1fs", name, result["seconds"])
        return result


def _progress(tag: str, every: int = 500):
    def cb(step, loss):
        if step % every == 0:
            log.info("%s step %d loss %.4f", tag, step, loss)
    return cb


def run_reference(cfg: Config, workdir: str | Path, stages: tuple[str, ...] = ("core", "bias", "ablate", "cascade")) -> dict:
    """Run (or load) the requested stages; returns one merged results dict."""
    st = Stages(workdir, cfg)
    world = world_for(cfg)
    results: dict = {}

    speech_path, lm_path = st.path("speech.slmc"), st.path("lm.slmc")

    def speech_stage():
        ckpt = pretrain_speech(cfg, world, on_step=_progress("speech"))
        save_backbone(speech_path, ckpt)
        return {"loss_history": ckpt.loss_history, **ckpt.metrics}

    def lm_stage():
        ckpt = pretrain_lm(cfg, world, on_step=_progress("lm"))
        save_backbone(lm_path, ckpt)
        return {"loss_history": ckpt.loss_history, **ckpt.metrics}

    results["speech"] = st.run("speech", speech_stage)
    results["lm"] = st.run("lm", lm_stage)
    cfg = cfg.copy()
    cfg.speech_encoder.checkpoint, cfg.text_lm.checkpoint = str(speech_path), str(lm_path)
    speech_encoder, text_lm = load_speech_encoder(cfg), load_text_lm(cfg)
    corpora = build_corpora(cfg, world)
    model = build_sandwich(cfg, speech_encoder, text_lm)
    adapter_path = st.path("adapter.slmc")

    def train_stage():
        record = train(model, corpora.train, cfg.train, seed=cfg.seed, subsample_mode=cfg.subsample.mode,
                       on_step=_progress("adapter"))
        save_run_checkpoint(adapter_path, model, record.state, cfg.fingerprint())
        return {"loss_history": record.losses}

    results["train"] = st.run("train", train_stage)
    load_run_checkpoint(adapter_path, model, cfg.fingerprint())
    fp = cfg.fingerprint().hex()

    def eval_stage():
        out = {}
        for name, exs in corpora.held_out.items():
            tag = "instruct" if name == "lookup" else name
            out[name] = evaluate_model(model, exs, tag, fingerprint=fp).value
        controls = [evaluate_model(shuffled_adapter_copy(model, cfg.seed, d), corpora.held_out["lookup"],
                                   "instruct").value for d in range(CONTROL_DRAWS)]
        out["lookup_shuffled_control_draws"] = controls
        out["lookup_shuffled_control"] = float(np.mean(controls))
        return out

    results["eval"] = st.run("eval", eval_stage)

    if "bias" in stages:
        def bias_stage():
            setup = bias_setup(cfg, world, speech_encoder)
            zero = evaluate_biasing(model, setup.splits, setup.db, fingerprint=fp)
            out = {"retrieval_accuracy_wo_prefix": retrieval_accuracy(setup.splits["WO_PREFIX"], setup.db,
                                                                      speech_encoder)}
            for tag, r in zero.items():
                out[f"{tag}.asr"], out[f"{tag}.casr"] = r.asr.value, r.casr.value
            examples = bias_finetune_corpus(cfg, world, speech_encoder, setup)
            b = cfg.bias
            for mask in ("adapter_only", "adapter_plus_lm_encoder"):
                tuned = copy_model(model)
                tcfg = TrainConfig(steps=b.finetune_steps, batch_size=cfg.train.batch_size, lr=b.finetune_lr,
                                   lr_schedule=cfg.train.lr_schedule, mask=mask, eval_every=0, checkpoint_every=0)
                finetune(tuned, examples, tcfg, seed=cfg.seed, mask=mask, subsample_mode=cfg.subsample.mode,
                         on_step=_progress(f"finetune/{mask}"))
                ft = evaluate_biasing(tuned, setup.splits, setup.db, fingerprint=fp)
                for tag, r in ft.items():
                    out[f"{tag}.casr.{mask}"] = r.casr.value
            return out

        results["bias"] = st.run("bias", bias_stage)

    if "ablate" in stages:
        def ablate_stage():
            depths = parse_list(cfg.ablate.depths, int)
            res = ablate_depth(depths, cfg, speech_encoder, text_lm, corpora.train, held_out_mixture(corpora),
                               cfg.ablate.steps, on_step=_progress("ablate"))
            return {str(r.depth): r.held_out_loss for r in res}

        results["ablate"] = st.run("ablate", ablate_stage)

    if "cascade" in stages:
        def cascade_stage():
            corpus = corpora.held_out["translate"][:cfg.cascade.size]
            r = run_cascade(model, text_lm, corpus, parse_list(cfg.cascade.corruption), cfg.seed)
            return {"end_to_end": r.end_to_end_bleu, "cascade": r.cascade_bleu, "transcript_wer": r.transcript_wer,
                    "oracle": r.oracle_bleu, "corruption": {str(k): v for k, v in r.corruption_bleu.items()}}

        results["cascade"] = st.run("cascade", cascade_stage)
    return results
