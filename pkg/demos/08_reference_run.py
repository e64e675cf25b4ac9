"""
The reference protocol
======================

Pretrain both backbones, train the adapter for 5000 steps, then run every
evaluation: held-out recognition, translation and instruction following,
zero-shot lookup against a shuffled-adapter control, contextual biasing
before and after fine-tuning, the depth ablation and the cascade.

Stage outputs are cached under the work directory, so a second run only
prints. A cold run takes roughly 20-30 minutes on one core.
"""

# %%
import json
import logging
import sys

from slm.config import Config
from slm.experiments import run_reference

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
workdir = sys.argv[1] if len(sys.argv) > 1 else ".slm_cache"
results = run_reference(Config(), workdir)

# %%
for stage, values in results.items():
    shown = {k: v for k, v in values.items() if k != "loss_history"}
    print(stage, json.dumps(shown, indent=1, sort_keys=True))
