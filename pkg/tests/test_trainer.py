import numpy as np
import pytest

from conftest import small_config
from slm.config import TrainConfig
from slm.formats import parse_metrics_line
from slm.pipeline import build_corpora, held_out_mixture
from slm.sandwich import build_sandwich
from slm.tensor import Tape
from slm.trainer import (MASK_PRESETS, NonFiniteLoss, TrainabilityMask, ablate_depth, checkpoint_path, copy_model,
                         depth_table, finetune, held_out_loss, load_run_checkpoint, train)

CFG = small_config()
CORPORA = build_corpora(CFG)


def tcfg(steps, **kw):
    base = dict(steps=steps, batch_size=4, lr=1e-3, eval_every=0, checkpoint_every=0)
    return TrainConfig(**{**base, **kw})


def snapshot(store, prefix=""):
    return {n: t.data.tobytes() for n, t in store.items() if n.startswith(prefix)}


def model():
    return build_sandwich(CFG)


def test_zero_steps_is_identity(tmp_path):
    m = model()
    before = snapshot(m.store)
    record = train(m, CORPORA.train, tcfg(0), seed=0, run_dir=tmp_path)
    assert record.losses == [] and snapshot(m.store) == before
    assert checkpoint_path(tmp_path, 0).exists()


def test_backbones_byte_identical_after_training():
    m = model()
    sp, lm = snapshot(m.store, "speech_encoder."), snapshot(m.store, "text_lm.")
    ad = snapshot(m.store, "adapter.")
    train(m, CORPORA.train, tcfg(20), seed=0)
    assert snapshot(m.store, "speech_encoder.") == sp
    assert snapshot(m.store, "text_lm.") == lm
    assert snapshot(m.store, "adapter.") != ad


def test_training_is_deterministic():
    a, b = model(), model()
    ra = train(a, CORPORA.train, tcfg(6), seed=3)
    rb = train(b, CORPORA.train, tcfg(6), seed=3)
    assert ra.losses == rb.losses
    assert snapshot(a.store) == snapshot(b.store)


def test_resume_matches_uninterrupted_run(tmp_path):
    full = model()
    r_full = train(full, CORPORA.train, tcfg(8), seed=1)

    part = model()
    train(part, CORPORA.train, tcfg(8, checkpoint_every=4), seed=1, run_dir=tmp_path, stop_at=4)
    resumed = model()
    state = load_run_checkpoint(checkpoint_path(tmp_path, 4), resumed)
    assert state.step == 4
    r_rest = train(resumed, CORPORA.train, tcfg(8), seed=1, state=state, run_dir=tmp_path)
    assert r_rest.losses == r_full.losses[4:]
    assert snapshot(resumed.store) == snapshot(full.store)
    steps = [parse_metrics_line(line)["step"] for line in (tmp_path / "metrics.log").read_text().splitlines()]
    assert steps == list(range(1, 9))


def test_every_adapter_tensor_gets_a_gradient():
    m = model()
    TrainabilityMask.preset("adapter_only").apply(m.store)
    batch = CORPORA.train.all_examples()[:4]
    with Tape() as tape:
        loss = m.batch_loss([e.instruction for e in batch], [e.speech for e in batch], [e.target for e in batch],
                            "strided")
        tape.backward(loss)
    for name in m.adapter_names():
        g = m.store[name].grad
        assert g is not None and np.isfinite(g).all(), name


def test_mask_presets_select_expected_tensors():
    m = model()
    only = set(TrainabilityMask.preset("adapter_only").apply(m.store))
    assert only == set(m.adapter_names())
    plus = set(TrainabilityMask.preset("adapter_plus_lm_encoder").apply(m.store))
    assert plus - only and all(n.startswith("text_lm.encoder.") for n in plus - only)
    assert "text_lm.embed" not in plus
    assert set(TrainabilityMask.preset("all").apply(m.store)) == set(m.store.names())
    with pytest.raises(ValueError):
        TrainabilityMask.preset("nope")
    assert set(MASK_PRESETS) == {"adapter_only", "adapter_plus_lm_encoder", "all"}


def test_mask_all_updates_every_component():
    m = model()
    before = snapshot(m.store)
    train(m, CORPORA.train, tcfg(3, mask="all"), seed=0)
    after = snapshot(m.store)
    for prefix in ("speech_encoder.", "adapter.", "text_lm."):
        assert any(after[n] != before[n] for n in before if n.startswith(prefix)), prefix


def test_lm_encoder_mask_leaves_decoder_alone():
    m = model()
    before = snapshot(m.store)
    train(m, CORPORA.train, tcfg(3, mask="adapter_plus_lm_encoder"), seed=0)
    after = snapshot(m.store)
    changed = {n for n in before if after[n] != before[n]}
    assert any(n.startswith("text_lm.encoder.") for n in changed)
    assert not any(n.startswith(("text_lm.decoder.", "text_lm.head", "text_lm.embed", "speech_encoder."))
                   for n in changed)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_is_reported():
    m = model()
    m.store[m.adapter_names()[0]].data[...] = np.nan
    with pytest.raises(NonFiniteLoss) as err:
        train(m, CORPORA.train, tcfg(3), seed=0)
    assert err.value.step == 1 and len(err.value.batch_fingerprint) == 16


def test_finetune_copy_leaves_original_untouched():
    m = model()
    before = snapshot(m.store)
    tuned = copy_model(m)
    finetune(tuned, CORPORA.train.all_examples()[:10], tcfg(2), seed=0)
    assert snapshot(m.store) == before
    with pytest.raises(ValueError):
        finetune(tuned, [], tcfg(2), seed=0)


def test_held_out_loss_is_deterministic():
    m = model()
    exs = held_out_mixture(CORPORA)
    assert held_out_loss(m, exs) == held_out_loss(m, exs)


def test_equal_depths_give_identical_runs():
    m = model()
    res = ablate_depth([1, 1], CFG, m.speech_encoder, m.text_lm, CORPORA.train, held_out_mixture(CORPORA), 3)
    assert res[0].record.losses == res[1].record.losses
    assert res[0].held_out_loss == res[1].held_out_loss
    table = depth_table(res)
    assert len(table.strip().splitlines()) == 3
