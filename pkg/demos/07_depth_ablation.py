"""
Adapter depth ablation
======================

Each depth trains a fresh adapter under the same budget and the same batch
order; only the adapter's layer count changes.
"""

# %%
from slm.config import Config
from slm.pipeline import build_corpora, held_out_mixture
from slm.sandwich import build_sandwich
from slm.trainer import ablate_depth, depth_table

cfg = Config.from_pairs({"corpus.recognize": "200", "corpus.translate": "200", "corpus.instruct": "200",
                         "corpus.held_out": "20"})
corpora = build_corpora(cfg)
base = build_sandwich(cfg)  # random frozen backbones, for illustration
results = ablate_depth([1, 2], cfg, base.speech_encoder, base.text_lm, corpora.train, held_out_mixture(corpora),
                       steps=20)
print(depth_table(results))
