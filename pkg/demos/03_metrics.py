"""
WER, CER and corpus BLEU
========================
"""

# %%
from slm.metrics import Normalizer, align, bleu_stats, cer, corpus_bleu, wer

rate, stats = wer(["the cat sat"], ["the bat sat down"])
print(rate, stats)
print(align("a b c".split(), "a x".split()))
print("cer", cer(["abc"], ["abd"])[0])

# %%
# Corpus BLEU sums clipped n-gram counts over all sentences before taking
# the geometric mean, then applies the brevity penalty once.
s = bleu_stats(["a b c d e"], ["a b c d"])
print(s.matches, s.totals, round(s.brevity_penalty, 4), round(s.score, 2))
print(corpus_bleu(["a b c d"], ["a b c d"]))

# %%
norm = Normalizer()
print(repr(norm("Hello,  World!")))
