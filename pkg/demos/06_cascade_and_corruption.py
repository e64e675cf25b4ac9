"""
End-to-end versus cascade
=========================

The cascade transcribes with the sandwich and then asks the frozen text LM
to translate the transcript. Injected corruption replaces tokens of the
oracle transcripts; positions corrupted at a low rate stay corrupted at
every higher rate, so the BLEU curve is a fair dose-response.
"""

# %%
from slm.cascade import corrupt
from slm.vocab import detokenize, tokenize

oracle = [tuple(tokenize("1 2 3 4 5 6 7 8"))]
for rate in (0.0, 0.1, 0.2, 0.4, 1.0):
    print(rate, detokenize(corrupt(oracle, rate, seed=0)[0]))

# %%
# With a trained model, run_cascade reports both paths and the corruption
# curve; here the backbones are random, so only the plumbing is shown.
from slm.cascade import run_cascade
from slm.config import Config
from slm.pipeline import build_corpora
from slm.sandwich import build_sandwich

cfg = Config.from_pairs({"corpus.held_out": "8", "corpus.recognize": "8", "corpus.translate": "8",
                         "corpus.instruct": "8"})
model = build_sandwich(cfg)
result = run_cascade(model, model.text_lm, build_corpora(cfg).held_out["translate"])
print(result.to_text())
