"""The ten acceptance criteria, each printing one PASS/FAIL line.

Criteria 4-9 share one full reference run (pretrain both backbones, train the
adapter, evaluate). Stage results are cached under ``$SLM_ACCEPTANCE_CACHE``
(default ``.slm_cache/`` in the repository root) so reruns reuse them; stage
wall-clock times are recorded when a stage actually runs.
"""

import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import small_config, tiny_model
from slm.cli import main
from slm.config import Config, TrainConfig
from slm.experiments import run_reference
from slm.formats import encode_checkpoint, read_corpus, store_records, write_corpus
from slm.gradcheck import check_gradients
from slm.metrics import IDENTITY, align, bleu_stats, cer, corpus_bleu, wer
from slm.pipeline import build_corpora
from slm.sandwich import build_sandwich, forward
from slm.tasks import make_world
from slm.trainer import copy_model, load_run_checkpoint, save_run_checkpoint, train
from test_metrics import HAND_CASES, bleu_from_counts, random_pairs, reference_distance

CACHE = Path(os.environ.get("SLM_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".slm_cache"))


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def reference():
    return run_reference(Config(), CACHE)


def test_1_gradient_correctness(report, f64):
    t0 = time.perf_counter()
    model = tiny_model(D=8, E=12, L=1, V=8)
    model.store.astype(np.float64)
    rng = np.random.default_rng(0)
    speech = rng.standard_normal((11, 4))
    tensors = {n: model.store[n] for n in model.adapter_names()}
    errors = check_gradients(lambda: forward(model, [3, 4, 5], speech, [6, 7, 5, 2]), tensors)
    worst = max(errors.values())
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 60,
           f"max relative error {worst:.2e} over {len(errors)} adapter tensors in {elapsed:.1f}s")


def test_2_frozen_contract(report):
    t0 = time.perf_counter()
    cfg = Config()
    model = build_sandwich(cfg)
    corpora = build_corpora(small_config(**{"corpus.recognize": 200, "corpus.translate": 200,
                                            "corpus.instruct": 200}))
    backbone = [n for n in model.store.names() if not n.startswith("adapter.")]

    def blob():
        return encode_checkpoint([r for r in store_records(model.store) if r.name in backbone], b"")

    before = blob()
    cfg.train.steps = 100
    train(model, corpora.train, cfg.train, seed=0, mask="adapter_only")
    elapsed = time.perf_counter() - t0
    report(2, blob() == before and elapsed < 120,
           f"{len(backbone)} backbone tensors byte-identical after 100 steps ({elapsed:.1f}s)")


def test_3_metric_oracles(report):
    pairs = random_pairs(1000, seed=21)
    word_ok = all(align(r.split(), h.split()).errors == reference_distance(r.split(), h.split()) for r, h in pairs)
    refs, hyps = map(list, zip(*pairs))
    n = sum(len(r.split()) for r in refs)
    total = sum(reference_distance(r.split(), h.split()) for r, h in pairs)
    word_ok &= Fraction(wer(refs, hyps, IDENTITY)[1].errors, n) == Fraction(total, n)
    char_total = sum(reference_distance(r.replace(" ", ""), h.replace(" ", "")) for r, h in pairs)
    char_ok = cer(refs, hyps, IDENTITY)[1].errors == char_total
    bleu_gap = 0.0
    for r, h, matches, totals, hl, rl in HAND_CASES:
        s = bleu_stats(r, h)
        assert s.matches == matches and s.totals == totals
        bleu_gap = max(bleu_gap, abs(corpus_bleu(r, h) - bleu_from_counts(matches, totals, hl, rl)))
    ident = wer(refs, refs)[0] == 0.0 and corpus_bleu(refs, refs) == pytest.approx(100.0, abs=1e-9)
    report(3, word_ok and char_ok and bleu_gap < 1e-9 and ident,
           f"WER/CER exact on 1000 pairs={word_ok and char_ok}, max BLEU gap {bleu_gap:.1e} on "
           f"{len(HAND_CASES)} cases, identity={ident}")


def test_4_end_to_end_convergence(report, reference):
    ev = reference["eval"]
    seconds = sum(reference[k]["seconds"] for k in ("speech", "lm", "train", "eval"))
    ok = ev["recognize"] <= 0.05 and ev["translate"] >= 80 and seconds <= 30 * 60
    report(4, ok, f"recognition WER {ev['recognize']:.4f} (<= 0.05), translation BLEU {ev['translate']:.2f} "
                  f"(>= 80), pipeline {seconds / 60:.1f} min (<= 30)")


def test_5_zero_shot_instruction_transfer(report, reference):
    ev = reference["eval"]
    ok = ev["lookup"] >= 0.60 and ev["lookup_shuffled_control"] <= 0.10
    report(5, ok, f"lookup exact match {ev['lookup']:.3f} (>= 0.60), shuffled-adapter control "
                  f"{ev['lookup_shuffled_control']:.3f} (<= 0.10)")


def test_6_biasing_direction(report, reference):
    b = reference["bias"]
    asr, casr = b["WO_PREFIX.asr"], b["WO_PREFIX.casr"]
    anti = abs(b["ANTI.casr"] - b["ANTI.asr"])
    ok = casr <= 0.8 * asr and anti <= 0.05
    report(6, ok, f"WO_PREFIX WER {asr:.4f} -> {casr:.4f} with retrieved mention (needs <= {0.8 * asr:.4f}); "
                  f"ANTI change {anti * 100:.2f} points (<= 5)")


def test_7_finetuning_direction(report, reference):
    b = reference["bias"]
    zero, ad, plus = b["WO_PREFIX.casr"], b["WO_PREFIX.casr.adapter_only"], b["WO_PREFIX.casr.adapter_plus_lm_encoder"]
    ok = ad < zero and plus <= ad
    report(7, ok, f"WO_PREFIX C-ASR WER zero-shot {zero:.4f} > adapter-only {ad:.4f} >= adapter+LM-encoder {plus:.4f}")


def test_8_depth_ablation(report, reference):
    a = reference["ablate"]
    l1, l2, l4 = a["1"], a["2"], a["4"]
    ok = l2 <= l1 and abs(l4 - l2) < l1 - l2
    report(8, ok, f"held-out loss L1 {l1:.4f}, L2 {l2:.4f}, L4 {l4:.4f} "
                  f"(|L4-L2|={abs(l4 - l2):.4f} < L1-L2={l1 - l2:.4f})")


def test_9_cascade_ablation(report, reference):
    c = reference["cascade"]
    curve = [c["corruption"][k] for k in sorted(c["corruption"], key=float)]
    monotone = all(b <= a for a, b in zip(curve, curve[1:]))
    ok = c["end_to_end"] >= c["cascade"] and monotone
    report(9, ok, f"end-to-end BLEU {c['end_to_end']:.2f} vs cascade {c['cascade']:.2f}; corruption curve "
                  + " ".join(f"{v:.2f}" for v in curve))


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_10_reproducibility_and_formats(report, tmp_path):
    small = {"pretrain.speech_steps": 3, "pretrain.lm_steps": 3, "train.steps": 3, "bias.finetune_steps": 2,
             "ablate.steps": 2}
    base = tmp_path / "base.cfg"
    base.write_text(small_config(**small).to_text())
    for cmd in ("pretrain-speech", "pretrain-lm"):
        assert main([cmd, "--config", str(base), "--out", str(tmp_path / cmd)]) == 0
    cfg = tmp_path / "full.cfg"
    cfg.write_text(small_config(**small, **{
        "speech_encoder.checkpoint": tmp_path / "pretrain-speech/checkpoints/step_3.slmc",
        "text_lm.checkpoint": tmp_path / "pretrain-lm/checkpoints/step_3.slmc"}).to_text())
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "train")]) == 0
    ck = str(tmp_path / "train/checkpoints/step_3.slmc")
    commands = {
        "pretrain-speech": ["--config", str(base)], "pretrain-lm": ["--config", str(base)],
        "gen-corpus": ["--config", str(cfg)], "train": ["--config", str(cfg)],
        "finetune": ["--config", str(cfg), "--checkpoint", ck], "eval": ["--config", str(cfg), "--checkpoint", ck],
        "bias-eval": ["--config", str(cfg), "--checkpoint", ck], "ablate-depth": ["--config", str(cfg)],
        "cascade": ["--config", str(cfg), "--checkpoint", ck],
    }
    identical = []
    for cmd, args in commands.items():
        a, b = tmp_path / "rerun" / cmd / "a", tmp_path / "rerun" / cmd / "b"
        assert main([cmd, *args, "--out", str(a)]) == 0 and main([cmd, *args, "--out", str(b)]) == 0
        identical.append(_tree(a) == _tree(b) and len(_tree(a)) > 1)

    # checkpoint save -> load -> save
    c = small_config()
    model = build_sandwich(c)
    tcfg = TrainConfig(steps=2, batch_size=2, eval_every=0, checkpoint_every=0)
    state = train(model, build_corpora(c).train, tcfg, seed=0).state
    save_run_checkpoint(tmp_path / "x.slmc", model, state, c.fingerprint())
    other = copy_model(build_sandwich(c, seed=5))
    save_run_checkpoint(tmp_path / "y.slmc", other, load_run_checkpoint(tmp_path / "x.slmc", other), c.fingerprint())
    round_trip = (tmp_path / "x.slmc").read_bytes() == (tmp_path / "y.slmc").read_bytes()

    # recipe regeneration
    examples = build_corpora(c).train.all_examples()
    write_corpus(tmp_path / "recipe.jsonl", examples)
    regen = read_corpus(tmp_path / "recipe.jsonl", make_world(c.seed))
    bit_exact = all(r.speech.tobytes() == e.speech.tobytes() for r, e in zip(regen, examples))

    ok = all(identical) and round_trip and bit_exact
    report(10, ok, f"{sum(identical)}/{len(identical)} subcommands rerun byte-identical, checkpoint round trip "
                   f"{round_trip}, recipe regeneration bit-exact {bit_exact} ({len(examples)} examples)")
