"""
Training an adapter sandwich
============================

A small run of the whole pipeline: pretrain the speech encoder and the text
LM briefly, freeze both, then train only the adapter between them. At this
budget the loss falls but decoding is still poor; the reference protocol
(see ``08_reference_run.py``) uses the default config and takes about half
an hour on one core.
"""

# %%
import tempfile
from pathlib import Path

from slm.config import Config
from slm.evaluation import evaluate_model
from slm.pipeline import (build_corpora, load_speech_encoder, load_text_lm, pretrain_lm, pretrain_speech,
                          save_backbone, world_for)
from slm.sandwich import build_sandwich
from slm.trainer import train

cfg = Config.from_pairs({"corpus.recognize": "600", "corpus.translate": "600", "corpus.instruct": "600",
                         "corpus.held_out": "50", "train.steps": "300"})
world = world_for(cfg)
speech_ckpt = pretrain_speech(cfg, world, steps=600)
lm_ckpt = pretrain_lm(cfg, world, steps=600)
print("speech token accuracy", speech_ckpt.metrics)
print("LM exact match", lm_ckpt.metrics["exact_match"])

# %%
# Round-trip the backbones through checkpoint files; loading freezes them.
tmp = Path(tempfile.mkdtemp())
save_backbone(tmp / "speech.slmc", speech_ckpt)
save_backbone(tmp / "lm.slmc", lm_ckpt)
encoder = load_speech_encoder(cfg, tmp / "speech.slmc")
lm = load_text_lm(cfg, tmp / "lm.slmc")
model = build_sandwich(cfg, encoder, lm)
print("trainable", model.store.num_parameters(trainable_only=True), "of", model.store.num_parameters())

# %%
corpora = build_corpora(cfg, world)
record = train(model, corpora.train, cfg.train, seed=cfg.seed, subsample_mode=cfg.subsample.mode)
print("loss", record.losses[0], "->", record.final_loss)
for name in ("recognize", "translate"):
    rep = evaluate_model(model, corpora.held_out[name], name)
    print(name, rep.metric, round(rep.value, 4))
