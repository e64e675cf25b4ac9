"""Command line: ``slm <subcommand> [--config FILE] [--seed S] ...``.

Every command writes into ``--out`` using a fixed layout::

    config.snapshot  checkpoints/step_N.slmc  metrics.log  reports/*.txt

Exit status: 0 success, 1 configuration or input error, 2 numeric failure
(non-finite loss), 3 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import tensor
from .backbones import PretrainingError
from .config import Config, ConfigError, parse_list
from .evaluation import EmptyCorpusError
from .formats import CheckpointError, format_metrics_line, read_corpus, write_bytes, write_corpus, world_to_json
from .params import TrainingError
from .vocab import VocabularyError, detokenize, strip_special, tokenize

log = logging.getLogger("slm")

COMMANDS = ("pretrain-speech", "pretrain-lm", "gen-corpus", "train", "finetune", "eval", "bias-eval",
            "ablate-depth", "cascade", "generate")
STEP_KEYS = {"pretrain-speech": "pretrain.speech_steps", "pretrain-lm": "pretrain.lm_steps",
             "train": "train.steps", "finetune": "bias.finetune_steps", "ablate-depth": "ablate.steps"}


class InputError(ValueError):
    """Bad user input other than the config file (exit status 1)."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slm", description="Adapter-sandwich speech-language model toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", default=None, help="run directory (default runs/<command>)")
        p.add_argument("--checkpoint", help="sandwich checkpoint to load or resume from")
        p.add_argument("--mask", choices=("adapter_only", "adapter_plus_lm_encoder", "all"))
        p.add_argument("--subsample", choices=("random", "strided"))
        p.add_argument("--precision", choices=("f32", "f64"))
        if name == "generate":
            p.add_argument("--instruction", required=True, help='e.g. "recognize speech lang_a"')
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--tokens", help="spoken tokens to render as speech, e.g. \"1 a 3\"")
            src.add_argument("--corpus", help="corpus file; speech is taken from --line")
            p.add_argument("--line", type=int, default=1, help="1-based corpus line (with --corpus)")
            p.add_argument("--max-len", type=int, default=16)
    return parser


def load_config(args) -> Config:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = Config.from_file(path)
    else:
        cfg = Config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        if args.command not in STEP_KEYS:
            raise ConfigError(f"--steps does not apply to {args.command}")
        cfg.set(STEP_KEYS[args.command], args.steps)
    if args.mask:
        cfg.train.mask = args.mask
    if args.subsample:
        cfg.subsample.mode = args.subsample
    if args.precision:
        cfg.precision = args.precision
    cfg.validate()
    return cfg


class RunDir:
    def __init__(self, path: str | Path, cfg: Config):
        self.path = Path(path)
        (self.path / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.path / "reports").mkdir(exist_ok=True)
        write_bytes(self.path / "config.snapshot", cfg.to_text().encode())

    def checkpoint(self, step: int) -> Path:
        return self.path / "checkpoints" / f"step_{step}.slmc"

    def report(self, name: str, text: str) -> Path:
        path = self.path / "reports" / f"{name}.txt"
        write_bytes(path, text.encode())
        return path

    def metrics(self, lines) -> None:
        write_bytes(self.path / "metrics.log", "".join(line + "\n" for line in lines).encode())


def _progress(every: int = 250):
    def cb(step, loss):
        if step % every == 0:
            log.info("step %d loss %.4f", step, loss)
    return cb


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, cfg: Config, run: RunDir) -> None:
    from .pipeline import pretrain_lm, pretrain_speech, save_backbone

    speech = args.command == "pretrain-speech"
    ckpt = (pretrain_speech if speech else pretrain_lm)(cfg, on_step=_progress())
    step = len(ckpt.loss_history)
    save_backbone(run.checkpoint(step), ckpt)
    run.metrics(format_metrics_line(i, v) for i, v in enumerate(ckpt.loss_history, 1))
    lines = [f"task: {'pretrain-speech' if speech else 'pretrain-lm'}", f"steps: {step}"]
    lines += [f"{k}: {v:.6f}" for k, v in ckpt.metrics.items()]
    lines.append(f"fingerprint: {ckpt.fingerprint.hex()}")
    run.report("pretrain", "\n".join(lines) + "\n")
    print(run.checkpoint(step))


def cmd_gen_corpus(args, cfg: Config, run: RunDir) -> None:
    from .biasing import make_entities, write_entities
    from .pipeline import build_corpora, world_for

    world = world_for(cfg)
    cfg.corpus.dir = ""
    corpora = build_corpora(cfg, world)
    d = run.path / "corpus"
    for name, exs in corpora.train.tasks.items():
        write_corpus(d / f"train_{name}.jsonl", exs)
    for name, exs in corpora.held_out.items():
        write_corpus(d / f"held_out_{name}.jsonl", exs)
    write_bytes(d / "world.json", world_to_json(world).encode())
    write_entities(d / "entities.txt", make_entities(cfg.seed, cfg.bias.entities, name="eval"))
    counts = {f"train_{k}": len(v) for k, v in corpora.train.tasks.items()}
    counts.update({f"held_out_{k}": len(v) for k, v in corpora.held_out.items()})
    run.report("corpus", "".join(f"{k}: {v}\n" for k, v in counts.items()))
    print(d)


def _backbones(cfg: Config):
    from .pipeline import load_speech_encoder, load_text_lm

    return load_speech_encoder(cfg), load_text_lm(cfg)


def _model(cfg: Config, args):
    from .pipeline import load_sandwich

    if not args.checkpoint:
        raise InputError(f"{args.command} needs --checkpoint")
    return load_sandwich(cfg, args.checkpoint)


def cmd_train(args, cfg: Config, run: RunDir) -> None:
    from .pipeline import build_corpora, held_out_mixture
    from .sandwich import build_sandwich
    from .trainer import load_run_checkpoint, train

    corpora = build_corpora(cfg)
    model = build_sandwich(cfg, *_backbones(cfg))
    state = load_run_checkpoint(args.checkpoint, model, cfg.fingerprint()) if args.checkpoint else None
    record = train(model, corpora.train, cfg.train, seed=cfg.seed, subsample_mode=cfg.subsample.mode,
                   held_out=held_out_mixture(corpora), run_dir=run.path, fingerprint=cfg.fingerprint(),
                   state=state, on_step=_progress())
    print(record.checkpoint)


def cmd_finetune(args, cfg: Config, run: RunDir) -> None:
    from .pipeline import bias_finetune_corpus, bias_setup, world_for
    from .trainer import TrainConfig, finetune

    model = _model(cfg, args)
    world = world_for(cfg)
    setup = bias_setup(cfg, world, model.speech_encoder)
    examples = bias_finetune_corpus(cfg, world, model.speech_encoder, setup)
    b = cfg.bias
    tcfg = TrainConfig(steps=b.finetune_steps, batch_size=cfg.train.batch_size, lr=b.finetune_lr,
                       lr_schedule=cfg.train.lr_schedule, mask=cfg.train.mask, eval_every=0, checkpoint_every=cfg.train.checkpoint_every)
    record = finetune(model, examples, tcfg, seed=cfg.seed, mask=cfg.train.mask,
                      subsample_mode=cfg.subsample.mode, run_dir=run.path, fingerprint=cfg.fingerprint(),
                      on_step=_progress())
    print(record.checkpoint)


def cmd_eval(args, cfg: Config, run: RunDir) -> None:
    from .evaluation import evaluate_model
    from .pipeline import build_corpora

    model = _model(cfg, args)
    corpora = build_corpora(cfg)
    fp = cfg.fingerprint().hex()
    for name, exs in corpora.held_out.items():
        if not exs:
            raise EmptyCorpusError()
        tag = "instruct" if name == "lookup" else name
        report = evaluate_model(model, exs, tag, fingerprint=fp, label=name)
        run.report(name, report.to_text())
        print(f"{name}: {report.metric}={report.value:.4f}")


def cmd_bias_eval(args, cfg: Config, run: RunDir) -> None:
    from .biasing import biasing_table, evaluate_biasing
    from .pipeline import bias_setup, world_for

    model = _model(cfg, args)
    setup = bias_setup(cfg, world_for(cfg), model.speech_encoder)
    results = evaluate_biasing(model, setup.splits, setup.db, fingerprint=cfg.fingerprint().hex())
    for tag, r in results.items():
        run.report(f"bias_{tag}_asr", r.asr.to_text())
        run.report(f"bias_{tag}_casr", r.casr.to_text())
    table = biasing_table(results)
    run.report("bias_table", table)
    print(table, end="")


def cmd_ablate(args, cfg: Config, run: RunDir) -> None:
    from .pipeline import build_corpora, held_out_mixture
    from .trainer import ablate_depth, depth_table

    corpora = build_corpora(cfg)
    speech, lm = _backbones(cfg)
    depths = parse_list(cfg.ablate.depths, int)
    results = ablate_depth(depths, cfg, speech, lm, corpora.train, held_out_mixture(corpora), cfg.ablate.steps,
                           on_step=_progress())
    run.metrics(format_metrics_line(step, loss, depth=r.depth)
                for r in results for step, loss in enumerate(r.record.losses, 1))
    table = depth_table(results)
    run.report("ablate_depth", table)
    print(table, end="")


def cmd_cascade(args, cfg: Config, run: RunDir) -> None:
    from .cascade import run_cascade
    from .pipeline import build_corpora

    model = _model(cfg, args)
    corpus = build_corpora(cfg).held_out["translate"][:cfg.cascade.size]
    result = run_cascade(model, model.text_lm, corpus, parse_list(cfg.cascade.corruption), cfg.seed)
    text = result.to_text(cfg.fingerprint().hex())
    run.report("cascade", text)
    print(text, end="")


def cmd_generate(args, cfg: Config, run: RunDir) -> None:
    from .pipeline import world_for
    from .rng import derive_seed
    from .sandwich import generate
    from .tasks import speechify

    try:
        instruction = tokenize(args.instruction)
        spoken = tokenize(args.tokens) if args.tokens else None
    except VocabularyError as exc:
        raise InputError(str(exc)) from exc
    model = _model(cfg, args)
    world = world_for(cfg)
    if spoken is not None:
        speech = speechify(spoken, world.speechifier, derive_seed(cfg.seed, "generate", *spoken))
    else:
        examples = read_corpus(args.corpus, world)
        if not 1 <= args.line <= len(examples):
            raise InputError(f"--line {args.line} outside 1..{len(examples)}")
        speech = examples[args.line - 1].speech
    print(detokenize(strip_special(generate(model, instruction, speech, args.max_len))))


HANDLERS = {"pretrain-speech": cmd_pretrain, "pretrain-lm": cmd_pretrain, "gen-corpus": cmd_gen_corpus,
            "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval, "bias-eval": cmd_bias_eval,
            "ablate-depth": cmd_ablate, "cascade": cmd_cascade, "generate": cmd_generate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        tensor.set_precision(cfg.precision)
        run = RunDir(args.out or Path("runs") / args.command, cfg) if args.command != "generate" else None
        HANDLERS[args.command](args, cfg, run)
    except (ConfigError, InputError, EmptyCorpusError, VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PretrainingError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
