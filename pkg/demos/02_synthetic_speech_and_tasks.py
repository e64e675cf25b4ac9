"""
Synthetic speech and the task families
======================================

The speechifier renders each token as a noisy run of its prototype frame, so
"speech" here is a (frames x 16) array whose segmentation the encoder must
learn. Tasks pair an instruction, the rendered speech and a target.
"""

# %%
import numpy as np

from slm.config import Config
from slm.pipeline import build_corpora
from slm.tasks import make_world, speechify
from slm.vocab import detokenize, tokenize

world = make_world(0)
frames = speechify(tokenize("a 3 c"), world.speechifier, seed=1)
print(frames.shape)  # between 3 and 6 frames per token
print(np.round(frames[:4, :6], 2))

# %%
# Default corpora: recognition, cipher translation and the instruction
# families used for adapter training. Lookup questions are held out entirely.
corpora = build_corpora(Config())
for name, exs in corpora.train.tasks.items():
    ex = exs[0]
    print(f"{name:10s} n={len(exs)}  [{detokenize(ex.instruction)}] {detokenize(ex.spoken)} -> {detokenize(ex.target)}")
for name, exs in corpora.held_out.items():
    print("held out", name, len(exs))

# %%
# The lookup facts live only in the text LM's pretraining data.
key, value = next(iter(world.facts.items()))
print("fact:", detokenize(key), "->", detokenize([value]))
