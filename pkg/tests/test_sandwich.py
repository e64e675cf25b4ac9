import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from slm import tensor as T
from slm.backbones import subsample_indices
from slm.config import Config
from slm.gradcheck import check_gradients
from slm.sandwich import (Subsampler, build_sandwich, concat_prompt, concat_prompt_batch, forward, generate,
                          shuffled_adapter_copy, subsample)
from slm.tasks import make_world, speechify
from slm.tensor import DimensionError, Tensor
from slm.vocab import VOCAB_SIZE, tokenize

GOLDEN_RANDOM_100 = [4, 12, 15, 17, 23, 28, 29, 30, 31, 33, 36, 40, 44, 46, 47, 53, 62, 68, 71, 72, 73, 79, 86,
                     90, 92]


def rows(n, width=3):
    return Tensor(np.arange(n * width, dtype=np.float64).reshape(n, width))


# ---------------------------------------------------------------- subsampling


def test_strided_u8():
    out = subsample(rows(8), Subsampler(4, "strided"))
    assert out.data[:, 0].tolist() == [0, 12]


def test_short_input_survives():
    assert subsample(rows(3), Subsampler(4, "strided")).shape[0] == 1
    assert subsample(rows(3), Subsampler(4, "random_discard")).shape[0] == 1


def test_random_discard_golden_indices():
    enc = Tensor(np.arange(100, dtype=np.float64)[:, None])
    for _ in range(2):
        out = subsample(enc, Subsampler(4, "random_discard", seed=0))
        assert out.data[:, 0].astype(int).tolist() == GOLDEN_RANDOM_100


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        subsample(rows(0), Subsampler(4, "strided"))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 9), st.sampled_from(["strided", "random"]), st.integers(0, 1000))
def test_subsampling_length_and_subset(U, r, mode, seed):
    idx = subsample_indices(U, r, mode, np.random.default_rng(seed))
    assert len(idx) == math.ceil(U / r)
    assert np.all(np.diff(idx) > 0)
    assert idx.min() >= 0 and idx.max() < U
    if mode == "strided":
        assert idx.tolist() == list(range(0, U, r))


# ---------------------------------------------------------------- concatenation


def test_concat_prefix_suffix_bit_equal():
    t, s = rows(5, 4), rows(3, 4) * 7.0
    out = concat_prompt(t, s)
    assert out.shape == (8, 4)
    assert out.data[:5].tobytes() == t.data.tobytes()
    assert out.data[5:].tobytes() == s.data.tobytes()


def test_concat_empty_instruction():
    s = rows(3, 4)
    assert concat_prompt(Tensor(np.zeros((0, 4))), s).data.tobytes() == s.data.tobytes()


def test_concat_order():
    t = Tensor(np.array([[1.0], [2.0]]))
    s = Tensor(np.array([[3.0], [4.0]]))
    assert concat_prompt(t, s).data[:, 0].tolist() == [1, 2, 3, 4]


def test_concat_width_mismatch():
    with pytest.raises(DimensionError):
        concat_prompt(rows(2, 3), rows(2, 4))


def test_batched_concat_left_aligns_each_row():
    text = Tensor(np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2))
    speech = Tensor(100 + np.arange(2 * 2 * 2, dtype=float).reshape(2, 2, 2))
    out, lengths = concat_prompt_batch(text, np.array([3, 1]), speech, np.array([1, 2]))
    assert lengths.tolist() == [4, 3]
    np.testing.assert_array_equal(out.data[0, :4], concat_prompt(Tensor(text.data[0]), Tensor(speech.data[0, :1])).data)
    np.testing.assert_array_equal(out.data[1, :3], concat_prompt(Tensor(text.data[1, :1]), Tensor(speech.data[1])).data)


# ---------------------------------------------------------------- model


def test_adapter_width_and_length():
    model = tiny_model()
    enc = Tensor(np.random.default_rng(0).standard_normal((2, 5, 8)))
    out = model.adapter(enc, np.array([5, 3]))
    assert out.shape == (2, 5, 12)


def test_untrained_loss_near_log_v():
    cfg = Config()
    model = build_sandwich(cfg)
    world = make_world(0)
    speech = speechify(tokenize("1 2 3 4"), world.speechifier, 0)
    loss = float(forward(model, tokenize("recognize speech lang_a"), speech, tokenize("1 2 3 4")).data)
    assert abs(loss - math.log(VOCAB_SIZE)) < 0.15 * math.log(VOCAB_SIZE)


def test_forward_deterministic_with_strided_subsampling():
    model = build_sandwich(Config.from_pairs({"subsample.mode": "strided"}))
    speech = speechify(tokenize("a b c"), make_world(0).speechifier, 5)
    a = forward(model, tokenize("recognize speech lang_a"), speech, tokenize("a b c")).data
    b = forward(model, tokenize("recognize speech lang_a"), speech, tokenize("a b c")).data
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_empty_target():
    model = tiny_model()
    with pytest.raises(ValueError):
        forward(model, [3], np.zeros((5, 4)), [])


def test_adapter_gradients_match_finite_differences(f64):
    model = tiny_model()
    model.store.astype(np.float64)
    rng = np.random.default_rng(0)
    speech = rng.standard_normal((9, 4))
    tensors = {n: model.store[n] for n in model.adapter_names()}
    errors = check_gradients(lambda: forward(model, [3, 4], speech, [5, 6, 7]), tensors)
    assert max(errors.values()) < 1e-4


def test_gradients_reach_only_adapter():
    model = tiny_model()
    with T.Tape() as tape:
        loss = forward(model, [3, 4], np.random.default_rng(0).standard_normal((9, 4)), [5, 6])
        tape.backward(loss)
    got = {n for n, t in model.store.items() if t.grad is not None}
    assert got == set(model.adapter_names())


def test_trainable_count_equals_adapter_count():
    model = build_sandwich(Config())
    assert model.store.num_parameters(trainable_only=True) == model.adapter.store.num_parameters()
    assert set(model.store.trainable_names()) == set(model.adapter_names())


def test_adapter_dim_mismatch_rejected():
    from slm.sandwich import Adapter, SandwichModel
    from slm.config import AdapterConfig
    from slm.rng import make_rng

    m = tiny_model()
    bad = Adapter(8, 10, AdapterConfig(1, 2), make_rng(0))
    with pytest.raises(DimensionError):
        SandwichModel(m.speech_encoder, bad, m.text_lm, m.subsampler)


def test_generate_contract():
    model = tiny_model(vocab=32)
    speech = np.random.default_rng(1).standard_normal((10, 4))
    one = generate(model, [3, 4], speech, 1)
    assert len(one) == 1
    a = generate(model, [3, 4], speech, 6)
    assert a == generate(model, [3, 4], speech, 6)
    assert len(a) <= 6
    with pytest.raises(ValueError):
        generate(model, [3], speech, 0)


def test_shuffled_adapter_is_a_permutation():
    model = tiny_model()
    control = shuffled_adapter_copy(model, 3)
    for name, t in model.adapter.store.items():
        c = control.adapter.store[name].data
        np.testing.assert_array_equal(np.sort(c.reshape(-1)), np.sort(t.data.reshape(-1)))
    assert control.speech_encoder is model.speech_encoder
