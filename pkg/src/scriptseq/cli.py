"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, eval, ablate, trace.  Every
command logs to stderr (level from SCRIPTSEQ_LOG) and finishes by
printing a one-line JSON summary to stdout.  Exit codes: 0 success,
2 configuration error, 3 generation error, 4 checkpoint error, 5 data
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .corpus import SplitSpec, build_dataset, build_length_bias_dataset, load_grammar
from .errors import (
    AnswerOutOfRange,
    ConfigError,
    CorruptCheckpoint,
    GrammarTooShort,
    PoolExhausted,
    SchemaError,
    ScriptSeqError,
)
from .evaluation import ABLATION_ROWS, evaluate, run_ablations, token_trace
from .events import read_instances
from .model import (
    ModelConfig,
    add_classifier_head,
    init_params,
    load_checkpoint,
)
from .training import TrainConfig, finetune, pretrain
from .verbalizer import Vocabulary, build_vocab

logger = logging.getLogger("scriptseq")

EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _summary(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_instances(path: Path, what: str):
    if not path.exists():
        raise CommandError(EXIT_DATA, f"{what} file not found: {path}")
    try:
        return read_instances(path)
    except (SchemaError, AnswerOutOfRange) as exc:
        raise CommandError(EXIT_DATA, f"{what}: {exc}") from exc


def _load_split_dir(data_dir: Path, split: str):
    return _load_instances(data_dir / f"{split}.jsonl", f"{split} split")


def _load_ckpt(path: Path):
    if not path.exists():
        raise CommandError(EXIT_CHECKPOINT, f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_vocab(path: Path) -> Vocabulary:
    if not path.exists():
        raise CommandError(EXIT_DATA, f"vocabulary file not found: {path}")
    return Vocabulary.load(path)


def _default_vocab_path(args) -> Path:
    if args.vocab is not None:
        return Path(args.vocab)
    if getattr(args, "init", None) or getattr(args, "ckpt", None):
        anchor = Path(args.init if getattr(args, "init", None) else args.ckpt)
        return anchor.parent / "vocab.txt"
    raise CommandError(EXIT_CONFIG, "--vocab is required here")


def _effective(args, extra_overrides: dict | None = None) -> dict:
    file_cfg = cfgmod.load_config_file(args.config)
    overrides: dict = {"model": {}, "train": {}, "pretrain": {}, "finetune": {}}
    for section, key, attr in _FLAG_MAP:
        if hasattr(args, attr):
            overrides[section][key] = getattr(args, attr)
    if extra_overrides:
        for section, kv in extra_overrides.items():
            overrides[section].update(kv)
    return cfgmod.merge_config(file_cfg, overrides)


# (config section, config key, argparse attribute)
_FLAG_MAP = [
    ("model", "d_model", "d_model"),
    ("model", "n_heads", "n_heads"),
    ("model", "n_enc_layers", "n_enc_layers"),
    ("model", "n_dec_layers", "n_dec_layers"),
    ("model", "d_ffn", "d_ffn"),
    ("model", "max_len", "max_len"),
    ("model", "dropout", "dropout"),
    ("train", "learning_rate", "lr"),
    ("train", "weight_decay", "weight_decay"),
    ("train", "patience", "patience"),
    ("train", "decay", "decay"),
    ("pretrain", "epochs", "pretrain_epochs"),
    ("pretrain", "batch_size", "pretrain_batch_size"),
    ("pretrain", "mask_style", "mask_style"),
    ("pretrain", "norm", "norm"),
    ("finetune", "epochs", "finetune_epochs"),
    ("finetune", "batch_size", "finetune_batch_size"),
    ("finetune", "learning_rate", "finetune_lr"),
    ("finetune", "loss", "loss"),
    ("finetune", "margin", "margin"),
    ("finetune", "orientation", "orientation"),
    ("finetune", "scoring", "scoring"),
    ("finetune", "norm", "norm"),
]


def _model_config(effective: dict, vocab_size: int, seed: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, seed=seed, **effective["model"])


def _pretrain_config(effective: dict, seed: int) -> TrainConfig:
    t, p = effective["train"], effective["pretrain"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        weight_decay=t["weight_decay"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        patience=t["patience"],
        decay=t["decay"],
        batch_size=p["batch_size"],
        max_epochs=p["epochs"],
        mask_style=p["mask_style"],
        norm=p["norm"],
        seed=seed,
    )


def _finetune_config(effective: dict, seed: int) -> TrainConfig:
    t, f = effective["train"], effective["finetune"]
    lr = f["learning_rate"] if f["learning_rate"] is not None else t["learning_rate"]
    return TrainConfig(
        learning_rate=lr,
        weight_decay=t["weight_decay"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        patience=t["patience"],
        decay=t["decay"],
        batch_size=f["batch_size"],
        max_epochs=f["epochs"],
        loss_kind=f["loss"],
        margin=f["margin"],
        margin_orientation=f["orientation"],
        scoring=f["scoring"],
        norm=f["norm"],
        seed=seed,
    )


def _write_fingerprint(out_dir: Path, fp: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "fingerprint.json").write_text(
        json.dumps(fp, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_report(out_dir: Path, name: str, report, fp: dict) -> None:
    payload = {"fingerprint": fp, **report.to_dict()}
    (out_dir / name).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    if args.train < 0 or args.dev < 0 or args.test < 0:
        raise CommandError(EXIT_CONFIG, "split counts must be nonnegative")
    try:
        grammar = load_grammar(args.grammar)
    except SchemaError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from exc
    spec = SplitSpec(args.train, args.dev, args.test, seed=args.seed)
    out_dir = Path(args.out)
    try:
        if args.kind == "length-bias":
            paths = build_length_bias_dataset(spec, out_dir, grammar)
        else:
            paths = build_dataset(grammar, spec, out_dir)
    except (GrammarTooShort, PoolExhausted) as exc:
        raise CommandError(EXIT_GENERATION, str(exc)) from exc
    fp = cfgmod.fingerprint(
        {}, command="gen-data", grammar=str(args.grammar), kind=args.kind,
        seed=args.seed, train=args.train, dev=args.dev, test=args.test,
    )
    _write_fingerprint(out_dir, fp)
    return {
        "command": "gen-data",
        "files": {k: str(v) for k, v in paths.items()},
        "fingerprint": fp,
    }


def _dump_samples(out_dir: Path, vocab, instances, config, count: int) -> None:
    """Write `count` human-readable (source, target) infill pairs."""
    import numpy as np

    from .masking import make_infill_sample, make_random_span_sample

    make = make_infill_sample if config.mask_style == "event" else make_random_span_sample
    rng = np.random.Generator(np.random.PCG64(config.seed))
    lines = []
    for i in range(min(count, len(instances))):
        s = make(instances[i], vocab, rng)
        lines.append("source: " + " ".join(vocab.decode(s.source_ids)))
        lines.append("target: " + " ".join(vocab.decode(s.target_ids)))
        lines.append("")
    (out_dir / "samples.txt").write_text("\n".join(lines), encoding="utf-8")


def cmd_pretrain(args) -> dict:
    effective = _effective(args)
    data_dir, out_dir = Path(args.data), Path(args.out)
    train = _load_split_dir(data_dir, "train")
    dev = _load_split_dir(data_dir, "dev")
    test = _load_split_dir(data_dir, "test") if args.log_test else None
    vocab = build_vocab(train)
    params = init_params(_model_config(effective, len(vocab), args.seed))
    config = _pretrain_config(effective, args.seed)
    fp = cfgmod.fingerprint(effective, command="pretrain", seed=args.seed, data=str(data_dir))
    _write_fingerprint(out_dir, fp)
    vocab.save(out_dir / "vocab.txt")
    if args.dump_samples:
        _dump_samples(out_dir, vocab, train, config, args.dump_samples)
    best, report = pretrain(params, vocab, train, dev, config, out_dir, test)
    _write_report(out_dir, "report.json", report, fp)
    return {
        "command": "pretrain",
        "best_epoch": report.best_epoch,
        "best_dev_nll": report.best_dev_metric,
        "checkpoint": report.best_checkpoint,
        "fingerprint": fp,
    }


def cmd_finetune(args) -> dict:
    effective = _effective(args)
    data_dir, out_dir = Path(args.data), Path(args.out)
    train = _load_split_dir(data_dir, "train")
    dev = _load_split_dir(data_dir, "dev")
    test = _load_split_dir(data_dir, "test") if args.log_test else None
    config = _finetune_config(effective, args.seed)

    if args.init is not None:
        params, _ = _load_ckpt(Path(args.init))
        vocab = _load_vocab(_default_vocab_path(args))
        if params.config.vocab_size != len(vocab):
            raise CommandError(
                EXIT_CONFIG,
                f"checkpoint vocab size {params.config.vocab_size} != vocabulary {len(vocab)}",
            )
    else:
        vocab = build_vocab(train)
        params = init_params(_model_config(effective, len(vocab), args.seed))
    if config.loss_kind == "classifier" and "cls.w" not in params.tensors:
        params = add_classifier_head(params, len(train[0].candidates))

    fp = cfgmod.fingerprint(
        effective, command="finetune", seed=args.seed, data=str(data_dir),
        init=args.init and str(args.init),
    )
    _write_fingerprint(out_dir, fp)
    vocab.save(out_dir / "vocab.txt")
    best, report = finetune(params, vocab, train, dev, config, out_dir, test)
    _write_report(out_dir, "report.json", report, fp)
    return {
        "command": "finetune",
        "best_epoch": report.best_epoch,
        "best_dev_accuracy": report.best_dev_metric,
        "checkpoint": report.best_checkpoint,
        "fingerprint": fp,
    }


def cmd_eval(args) -> dict:
    effective = _effective(args)
    instances = _load_instances(Path(args.data), "eval data")
    params, _ = _load_ckpt(Path(args.ckpt))
    vocab = _load_vocab(_default_vocab_path(args))
    scoring = args.scoring or effective["finetune"]["scoring"]
    norm = args.norm or effective["finetune"]["norm"]
    fp = cfgmod.fingerprint(
        effective, command="eval", data=str(args.data), ckpt=str(args.ckpt),
        scoring=scoring, norm=norm,
    )
    report = evaluate(
        params, vocab, instances, scoring=scoring, norm=norm, fingerprint=fp
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "eval.jsonl")
    return {
        "command": "eval",
        "accuracy": report.accuracy,
        "n_instances": report.n_instances,
        "fingerprint": fp,
    }


def cmd_ablate(args) -> dict:
    effective = _effective(args)
    rows = tuple(r.strip() for r in args.rows.split(",")) if args.rows else ABLATION_ROWS
    fp = cfgmod.fingerprint(
        effective, command="ablate", seed=args.seed, data=str(args.data), rows=list(rows)
    )
    out_dir = Path(args.out)
    _write_fingerprint(out_dir, fp)
    results = run_ablations(
        Path(args.data),
        out_dir,
        model_kwargs={**effective["model"], "seed": args.seed},
        pretrain_config=_pretrain_config(effective, args.seed),
        finetune_config=_finetune_config(effective, args.seed),
        rows=rows,
        save_checkpoints=args.save_checkpoints,
    )
    return {
        "command": "ablate",
        "rows": {r["variant"]: r["accuracy"] for r in results},
        "fingerprint": fp,
    }


def cmd_trace(args) -> dict:
    instances = _load_instances(Path(args.data), "trace data")
    if not 0 <= args.index < len(instances):
        raise CommandError(EXIT_CONFIG, f"--index {args.index} outside [0, {len(instances)})")
    params, _ = _load_ckpt(Path(args.ckpt))
    vocab = _load_vocab(_default_vocab_path(args))
    inst = instances[args.index]
    out_dir = Path(args.out) if args.out else None
    traces = {}
    for j, cand in enumerate(inst.candidates):
        trace = token_trace(params, vocab, inst.script, cand)
        traces[j] = sum(v for _, v in trace.entries)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / f"trace-cand{j}.tsv").write_text(trace.to_tsv(), encoding="utf-8")
    return {
        "command": "trace",
        "index": args.index,
        "answer": inst.answer_index,
        "total_neg_logprob": traces,
    }


# --- parser -----------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, *, need_out: bool = True) -> None:
    parser.add_argument("--config", type=str, default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=str, required=need_out, default=None)
    parser.add_argument("--threads", type=int, default=None)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--d-model", dest="d_model", type=int, default=None)
    parser.add_argument("--n-heads", dest="n_heads", type=int, default=None)
    parser.add_argument("--n-enc-layers", dest="n_enc_layers", type=int, default=None)
    parser.add_argument("--n-dec-layers", dest="n_dec_layers", type=int, default=None)
    parser.add_argument("--d-ffn", dest="d_ffn", type=int, default=None)
    parser.add_argument("--max-len", dest="max_len", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--decay", choices=("decoupled", "l2"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scriptseq",
        description="Two-stage generative script event prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic MCNC benchmark")
    p.add_argument("--grammar", required=True, help="grammar JSON path or builtin:NAME")
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--dev", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--kind", choices=("standard", "length-bias"), default="standard")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage 1: event-level blank infilling")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--pretrain-epochs", "--epochs", dest="pretrain_epochs", type=int, default=None
    )
    p.add_argument(
        "--pretrain-batch-size", "--batch-size", dest="pretrain_batch_size",
        type=int, default=None,
    )
    p.add_argument("--mask-style", dest="mask_style", choices=("event", "span"), default=None)
    p.add_argument("--norm", choices=("paper", "generated"), default=None)
    p.add_argument("--log-test", action="store_true", help="log test accuracy per epoch")
    p.add_argument(
        "--dump-samples", type=int, default=0, metavar="N",
        help="write N readable (source, target) pairs to samples.txt",
    )
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: contrastive fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="stage-1 checkpoint (omit to train from scratch)")
    p.add_argument("--vocab", default=None, help="vocabulary file (default: next to --init)")
    p.add_argument(
        "--finetune-epochs", "--epochs", dest="finetune_epochs", type=int, default=None
    )
    p.add_argument(
        "--finetune-batch-size", "--batch-size", dest="finetune_batch_size",
        type=int, default=None,
    )
    p.add_argument("--finetune-lr", dest="finetune_lr", type=float, default=None)
    p.add_argument("--loss", choices=("cot", "cross", "margin", "classifier"), default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument(
        "--orientation", choices=("conventional", "paper-literal"), default=None
    )
    p.add_argument("--scoring", choices=("mean", "sum"), default=None)
    p.add_argument("--norm", choices=("paper", "generated"), default=None)
    p.add_argument("--log-test", action="store_true")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset file")
    p.add_argument("--data", required=True, help="instances .jsonl file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--scoring", choices=("mean", "sum", "classifier"), default=None)
    p.add_argument("--norm", choices=("paper", "generated"), default=None)
    _add_common(p, need_out=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score pipeline variants")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--rows", default=None, help=f"comma list among {','.join(ABLATION_ROWS)}")
    p.add_argument("--save-checkpoints", action="store_true")
    p.add_argument(
        "--pretrain-epochs", dest="pretrain_epochs", type=int, default=None
    )
    p.add_argument(
        "--pretrain-batch-size", dest="pretrain_batch_size", type=int, default=None
    )
    p.add_argument(
        "--finetune-epochs", dest="finetune_epochs", type=int, default=None
    )
    p.add_argument(
        "--finetune-batch-size", dest="finetune_batch_size", type=int, default=None
    )
    p.add_argument("--loss", choices=("cot", "cross", "margin"), default=None)
    p.add_argument("--scoring", choices=("mean", "sum"), default=None)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("trace", help="per-token scores for one instance's candidates")
    p.add_argument("--data", required=True, help="instances .jsonl file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--index", type=int, default=0)
    _add_common(p, need_out=False)
    p.set_defaults(func=cmd_trace)

    return parser


def _setup_logging() -> None:
    level = os.environ.get("SCRIPTSEQ_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"SCRIPTSEQ_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(
        level=levels[level],
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        limiter = None
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=args.threads)
        try:
            summary = args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
        _summary(summary)
        return 0
    except CommandError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GrammarTooShort, PoolExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except CorruptCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (SchemaError, AnswerOutOfRange) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ScriptSeqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
