import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from slm import tensor as T
from slm.gradcheck import check_gradients
from slm.params import AdamState, ParameterStore, TrainingError, adam_step, cosine_lr
from slm.tensor import DimensionError, Tape, Tensor


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def max_err(loss_fn, **tensors):
    return max(check_gradients(loss_fn, tensors).values())


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]


def test_matmul_row_times_column():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient(f64, rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    assert max_err(lambda: T.sum_all(T.matmul(a, b) * Tensor(w)), a=a, b=b) < 1e-6


def test_batched_matmul_gradient(f64, rng):
    a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    assert max_err(lambda: T.sum_all(T.matmul(a, b) * Tensor(w)), a=a, b=b) < 1e-6


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-12)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax_rows(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_gradient(f64, rng):
    x = param(rng, 2, 5)
    w = rng.standard_normal((2, 5))
    assert max_err(lambda: T.sum_all(T.softmax_rows(x) * Tensor(w)), x=x) < 1e-6


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8),
                  elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_are_distributions(x):
    with T.precision("f64"):
        y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0) and np.all(y <= 1)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_maps_to_bias():
    out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_normalized_row_is_fixed():
    with T.precision("f64"):
        out = T.layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient(f64, rng):
    x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
    w = rng.standard_normal((3, 6))
    assert max_err(lambda: T.sum_all(T.layer_norm(x, g, b) * Tensor(w)), x=x, g=g, b=b) < 1e-6


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_is_log_v():
    with T.precision("f64"):
        loss = T.cross_entropy_next_token(Tensor(np.zeros((5, 32))), [3, 4, 5, 6, 7], pad_id=0)
    assert abs(float(loss.data) - math.log(32)) < 1e-9


def test_cross_entropy_confident_correct_is_zero():
    logits = np.zeros((3, 8))
    logits[np.arange(3), [1, 2, 3]] = 1e4
    assert float(T.cross_entropy_next_token(Tensor(logits), [1, 2, 3], pad_id=0).data) == pytest.approx(0, abs=1e-6)


def test_cross_entropy_matches_direct_summation(rng):
    logits = rng.standard_normal((4, 8))
    targets = [1, 0, 5, 7]  # position 1 is padding
    with T.precision("f64"):
        loss = float(T.cross_entropy_next_token(Tensor(logits), targets, pad_id=0).data)
    terms = []
    for row, t in zip(logits, targets):
        if t == 0:
            continue
        terms.append(-(row[t] - math.log(sum(math.exp(v) for v in row))))
    assert abs(loss - sum(terms) / len(terms)) < 1e-9


def test_cross_entropy_rejects_out_of_vocab_target():
    with pytest.raises(IndexError):
        T.cross_entropy_next_token(Tensor(np.zeros((2, 4))), [1, 9], pad_id=0)


def test_cross_entropy_gradient(f64, rng):
    x = param(rng, 2, 3, 7)
    targets = np.array([[1, 2, 0], [6, 0, 0]])
    assert max_err(lambda: T.cross_entropy_next_token(x, targets, 0), x=x) < 1e-6


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
       st.lists(st.integers(1, 5), min_size=4, max_size=4))
def test_cross_entropy_nonnegative(logits, targets):
    with T.precision("f64"):
        assert float(T.cross_entropy_next_token(Tensor(logits), targets, 0).data) >= 0


# ---------------------------------------------------------------- ctc


def brute_force_ctc(logits: np.ndarray, length: int, target, blank: int) -> float:
    """-log p(target) by enumerating every frame path and collapsing it."""
    logp = logits[:length] - np.log(np.exp(logits[:length]).sum(-1, keepdims=True))
    total = 0.0
    for path in itertools.product(range(logits.shape[1]), repeat=length):
        collapsed = [k for i, k in enumerate(path) if k != blank and (i == 0 or k != path[i - 1])]
        if collapsed == list(target):
            total += math.exp(sum(logp[i, k] for i, k in enumerate(path)))
    return -math.log(total) if total else math.inf


def test_ctc_matches_path_enumeration(f64, rng):
    x = rng.standard_normal((4, 5, 3))
    lengths, targets = [5, 4, 3, 5], [[1, 2], [1, 1], [2], []]
    want = np.mean([brute_force_ctc(x[b], lengths[b], targets[b], 0) / max(len(targets[b]), 1) for b in range(4)])
    assert float(T.ctc_loss(Tensor(x), lengths, targets, 0).data) == pytest.approx(want, rel=1e-10)


def test_ctc_infeasible_examples_are_skipped(f64, rng):
    x = rng.standard_normal((2, 4, 3))
    both = T.ctc_loss(Tensor(x), [4, 2], [[1, 2], [1, 2, 1]], 0)
    alone = T.ctc_loss(Tensor(x[:1]), [4], [[1, 2]], 0)
    assert float(both.data) == pytest.approx(float(alone.data), rel=1e-12)
    assert float(T.ctc_loss(Tensor(x[1:]), [2], [[1, 2, 1]], 0).data) == 0.0


def test_ctc_gradient(f64, rng):
    x = param(rng, 3, 6, 4)
    targets = [[1, 3], [2, 2, 1], [3]]
    assert max_err(lambda: T.ctc_loss(x, [6, 6, 4], targets, 0), x=x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 5))
def test_ctc_is_nonnegative_and_padding_free(seed, n, extra):
    """Padding frames beyond an example's length change neither loss nor gradient."""
    r = np.random.default_rng(seed)
    target = list(r.integers(1, 4, size=n))
    length = n + extra + sum(a == b for a, b in zip(target, target[1:]))
    with T.precision("f64"):
        x = r.standard_normal((1, length, 4))
        padded = np.concatenate([x, r.standard_normal((1, 3, 4))], axis=1)
        a, b = Tensor(x, requires_grad=True), Tensor(padded, requires_grad=True)
        for t in (a, b):
            with Tape() as tape:
                loss = T.ctc_loss(t, [length], [target], 0)
                tape.backward(loss)
        assert float(loss.data) >= 0
        assert float(T.ctc_loss(a, [length], [target], 0).data) == pytest.approx(float(loss.data), rel=1e-12)
        np.testing.assert_allclose(b.grad[:, :length], a.grad, atol=1e-12)
        assert not b.grad[:, length:].any()


# ---------------------------------------------------------------- other ops


@pytest.mark.parametrize("op", ["gelu", "relu", "add_broadcast", "mul", "concat", "gather", "take",
                                "embedding", "transpose", "mean"])
def test_op_gradients(f64, rng, op):
    x = Tensor(rng.standard_normal((2, 3, 4)) + 0.1, requires_grad=True)
    y = param(rng, 4)
    w = Tensor(rng.standard_normal((2, 3, 4)))
    fns = {
        "gelu": lambda: T.sum_all(T.gelu(x) * w),
        "relu": lambda: T.sum_all(T.relu(x) * w),
        "add_broadcast": lambda: T.sum_all((x + y) * (x - y) * w),
        "mul": lambda: T.sum_all(x * y * w),
        "concat": lambda: T.sum_all(T.concat([x, x * 2.0], axis=-2) * T.concat([w, w], axis=1)),
        "gather": lambda: T.sum_all(T.gather_rows(x, np.array([[2, 0, 2], [1, 1, 0]])) * w),
        "take": lambda: T.sum_all(T.take_rows(x.reshape(6, 4), [5, 0, 5]) * Tensor(np.ones((3, 4)))),
        "embedding": lambda: T.sum_all(T.embedding(x.reshape(6, 4), np.array([[1, 1], [5, 0]])) * y),
        "transpose": lambda: T.sum_all(x.transpose(2, 0, 1) * Tensor(w.data.transpose(2, 0, 1))),
        "mean": lambda: T.mean_all(x * x),
    }
    assert max_err(fns[op], x=x, y=y) < 1e-6


def test_backward_visits_nodes_once(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        loss = T.sum_all(y + y)
        assert len(tape) == 3
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4.0)


def test_nothing_recorded_outside_tape(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.sum_all(x * x)
    assert not y.requires_grad


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_outputs_finite_on_finite_inputs(x):
    t = Tensor(x)
    for out in (T.gelu(t), T.softmax_rows(t), T.layer_norm(t, Tensor(np.ones(5)), Tensor(np.zeros(5)))):
        assert np.isfinite(out.data).all()


def test_truncated_normal_bounds(rng):
    x = T.truncated_normal(rng, (10000,))
    assert np.abs(x).max() <= 0.04 + 1e-7
    assert abs(x.std() - 0.02) < 0.004


# ---------------------------------------------------------------- adam


def test_adam_first_step_moves_by_lr():
    store = ParameterStore()
    store.add("w", np.zeros(1))
    with T.precision("f64"):
        adam_step(store, {"w": np.ones(1)}, lr=0.1, step=1)
    assert store["w"].data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_frozen_tensor_untouched():
    store = ParameterStore()
    store.add("w", np.ones(3))
    frozen = store.add("f", np.ones(3), trainable=False)
    before = frozen.data.tobytes()
    adam_step(store, {"w": np.ones(3), "f": np.ones(3)}, lr=0.1)
    assert frozen.data.tobytes() == before
    assert not np.array_equal(store["w"].data, np.ones(3))


def test_adam_zero_gradient_no_change():
    store = ParameterStore()
    store.add("w", np.arange(4.0))
    before = store["w"].data.copy()
    adam_step(store, {"w": np.zeros(4)}, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, before)


def test_adam_missing_gradient_is_training_error():
    store = ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(TrainingError):
        adam_step(store, {}, lr=0.1)


def test_adam_step_count_must_be_positive():
    store = ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ValueError):
        adam_step(store, {"w": np.ones(2)}, step=0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=6), st.integers(0, 2**31))
def test_adam_never_mutates_frozen(flags, seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for i, f in enumerate(flags):
        store.add(f"p{i}", rng.standard_normal(3), trainable=f)
    before = {n: store[n].data.tobytes() for n in store.names()}
    state = AdamState()
    for _ in range(3):
        adam_step(store, {n: rng.standard_normal(3) for n in store.names()}, lr=0.01, state=state)
    for i, f in enumerate(flags):
        if not f:
            assert store[f"p{i}"].data.tobytes() == before[f"p{i}"]


def test_cosine_lr_endpoints_and_monotone():
    lrs = [cosine_lr(1.0, s, 101) for s in range(1, 102)]
    assert lrs[0] == 1.0 and lrs[-1] == pytest.approx(0.05)
    assert lrs[50] == pytest.approx(0.525)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert cosine_lr(0.3, 1, 1) == 0.3
