import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from slm.cascade import corrupt, run_cascade, translate_text
from slm.evaluation import EmptyCorpusError
from slm.pipeline import build_corpora
from slm.sandwich import build_sandwich
from slm.vocab import CONTENT_IDS

transcripts = st.lists(st.lists(st.sampled_from(CONTENT_IDS), min_size=1, max_size=10).map(tuple),
                       min_size=1, max_size=8)


@settings(max_examples=100, deadline=None)
@given(transcripts, st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32))
def test_corruption_is_nested(ts, p, q, seed):
    lo, hi = sorted((p, q))
    a, b = corrupt(ts, lo, seed), corrupt(ts, hi, seed)
    for orig, x, y in zip(ts, a, b):
        hit_lo = {i for i, (o, t) in enumerate(zip(orig, x)) if o != t}
        hit_hi = {i for i, (o, t) in enumerate(zip(orig, y)) if o != t}
        assert hit_lo <= hit_hi
        assert all(x[i] == y[i] for i in hit_lo)  # same replacement at either rate


@settings(max_examples=50, deadline=None)
@given(transcripts, st.integers(0, 2**32))
def test_corruption_extremes(ts, seed):
    assert corrupt(ts, 0.0, seed) == [tuple(t) for t in ts]
    full = corrupt(ts, 1.0, seed)
    for orig, c in zip(ts, full):
        assert len(orig) == len(c)
        assert all(o != t and t in CONTENT_IDS for o, t in zip(orig, c))


def test_corruption_deterministic_and_rate_checked():
    ts = [tuple(CONTENT_IDS[:5])] * 3
    assert corrupt(ts, 0.3, 9) == corrupt(ts, 0.3, 9)
    with pytest.raises(ValueError):
        corrupt(ts, 1.5, 0)


def test_run_cascade_reports_consistent_numbers():
    cfg = small_config()
    model = build_sandwich(cfg)
    corpus = build_corpora(cfg).held_out["translate"][:4]
    r = run_cascade(model, model.text_lm, corpus, (0.0, 0.5), seed=0)
    assert r.corpus_size == 4
    assert r.corruption_bleu[0.0] == r.oracle_bleu
    assert 0 <= r.cascade_bleu <= 100 and 0 <= r.end_to_end_bleu <= 100
    again = run_cascade(model, model.text_lm, corpus, (0.0, 0.5), seed=0)
    assert again == r
    text = r.to_text("ab")
    assert "corrupt_0.5_bleu" in text and text.endswith("fingerprint: ab\n")


def test_translate_text_keeps_order():
    model = build_sandwich(small_config())
    ts = [tuple(CONTENT_IDS[:3]), tuple(CONTENT_IDS[3:6])]  # equal lengths share a decode budget
    both = translate_text(model.text_lm, ts)
    assert both[1] == translate_text(model.text_lm, ts[1:])[0]


def test_empty_corpus():
    model = build_sandwich(small_config())
    with pytest.raises(EmptyCorpusError):
        run_cascade(model, model.text_lm, [])
