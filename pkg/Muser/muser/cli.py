"""Command line interface for MUSER.

Every step of the pipeline is a subcommand: generate the synthetic corpus,
pre-train or fine-tune, evaluate zero-shot, run the template and few-shot
studies, or compute a single spectrum. Settings come from an optional config
file (``--config``) and ``--set key=value`` overrides; dedicated flags are
shorthands for overrides.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .core.config import Config
from .core.data import (
    DatasetRecord,
    fuse_datasets,
    load_metadata,
    read_wav,
    save_dataset,
    split_dataset,
    synth_dataset,
    write_matrix,
    write_metadata,
)
from .core.errors import MuserError, UsageError
from .core.evaluation import (
    MetricsReport,
    ablation_table,
    eval_zero_shot,
    few_shot_sweep,
    sweep_lines,
    template_ablation,
)
from .core.signal import stft
from .core.text import STUDY_TEMPLATES, TemplateSpec
from .core.training import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("muser")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Config file of key = value lines")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    common.add_argument("--seed", type=int, default=None, help="Shorthand for --set train.seed=N")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings only, no progress bars")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(prog="muser", description="Tri-modal contrastive music pre-training.", parents=[common])
    parser.add_argument("--version", action="store_true", help="Print version and exit")
    parser.add_argument("--show-config", action="store_true", help="Print the effective configuration and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="Generate the synthetic corpus")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--clip-seconds", type=float, default=None)
    p.add_argument("--rate", type=int, default=None)
    p.add_argument("--task", choices=("genre", "tagging"), default="genre", help="Label type to emit")
    p.add_argument("--split", action="store_true", help="Also write train.jsonl and test.jsonl")

    p = sub.add_parser("train", parents=[common], help="Pre-train or fine-tune")
    p.add_argument("--data", type=Path, action="append", required=True, help="Metadata file (repeatable)")
    p.add_argument("--out", type=Path, default=Path("muser.ckpt"), help="Final checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="Training log (default: <out>.log)")
    p.add_argument("--no-spectrum", action="store_true", help="Train without the spectrum branch")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", type=Path, default=None, help="Continue an interrupted run")
    p.add_argument("--init-ckpt", type=Path, default=None, help="Fine-tune from a pre-trained checkpoint")
    p.add_argument("--eval-data", type=Path, default=None, help="Held-out metadata for train.eval_every")
    p.add_argument("--checkpoint-dir", type=Path, default=None, help="Where train.checkpoint_every writes")

    for name, help_text in (("eval", "Evaluate a checkpoint"), ("zeroshot", "Zero-shot genre accuracy")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--ckpt", type=Path, required=True)
        p.add_argument("--data", type=Path, action="append", required=True)
        p.add_argument("--template", default=None, help="Template text or a named template")
        p.add_argument("--report", type=Path, default=None, help="Write the report (.json for structured)")
        if name == "eval":
            p.add_argument("--task", choices=("genre", "tagging"), default=None)

    p = sub.add_parser("fewshot", parents=[common], help="Fine-tune on growing fractions of the data")
    p.add_argument("--init-ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, action="append", required=True)
    p.add_argument("--test-data", type=Path, required=True)
    p.add_argument("--ratios", default="0.1,0.2,0.4,1.0")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--task", choices=("genre", "tagging"), default=None)

    p = sub.add_parser("stft", parents=[common], help="Write the spectrum of one WAV file")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate-templates", parents=[common], help="Compare text templates")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, action="append", required=True)
    p.add_argument(
        "--template", dest="templates", action="append", default=None,
        help=f"Template text or one of {', '.join(STUDY_TEMPLATES)} (repeatable)",
    )
    p.add_argument("--task", choices=("genre", "tagging"), default="tagging")
    p.add_argument("--out", type=Path, default=None, help="Write the tab-delimited table")
    return parser


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _load_config(args: argparse.Namespace) -> Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    flag_keys = {
        "classes": "data.classes",
        "per_class": "data.per_class",
        "clip_seconds": "data.clip_seconds",
        "rate": "data.rate",
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "lr": "train.lr",
        "task": "eval.task",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None and not (attr == "task" and args.command == "synth"):
            overrides.append(f"{key}={value}")
    if getattr(args, "no_spectrum", False):
        overrides.append("train.spectrum_enabled=false")
    return Config(args.config, overrides)


def _template(text: str) -> TemplateSpec:
    if text in STUDY_TEMPLATES:
        return STUDY_TEMPLATES[text]
    return TemplateSpec(text)


def _config_template(cfg: Config, args: argparse.Namespace) -> TemplateSpec:
    if getattr(args, "template", None):
        return _template(args.template)
    return TemplateSpec(cfg.template)


def _load_data(paths: Sequence[Path]) -> List[DatasetRecord]:
    return fuse_datasets(*(load_metadata(p) for p in paths))


def cmd_synth(args: argparse.Namespace, cfg: Config) -> int:
    records = synth_dataset(
        cfg.get("data.classes"),
        cfg.get("data.per_class"),
        cfg.get("data.clip_seconds"),
        cfg.get("data.rate"),
        cfg.seed,
        task=args.task,
    )
    path = save_dataset(records, args.out)
    print(f"wrote {len(records)} clips and {path}")
    if args.split:
        train_set, test_set = split_dataset(load_metadata(path), cfg.get("data.test_fraction"), cfg.seed)
        write_metadata(args.out / "train.jsonl", train_set)
        write_metadata(args.out / "test.jsonl", test_set)
        print(f"split {len(train_set)} train / {len(test_set)} test")
    return 0


def cmd_train(args: argparse.Namespace, cfg: Config) -> int:
    if args.resume and args.init_ckpt:
        raise UsageError("--resume and --init-ckpt are mutually exclusive")
    config: TrainConfig = cfg.train_config()
    dataset = _load_data(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and "epochs" not in cfg.explicit_train_fields():
        config = replace(config, epochs=resume.config.epochs)
    init = load_checkpoint(args.init_ckpt) if args.init_ckpt else None
    eval_set = load_metadata(args.eval_data) if args.eval_data else None
    ckpt, log = train(
        config,
        dataset,
        resume_from=resume,
        init_from=init,
        eval_dataset=eval_set,
        checkpoint_dir=args.checkpoint_dir,
        progress=_progress(args),
        explicit=cfg.explicit_train_fields() if resume else (),
    )
    save_checkpoint(ckpt, args.out)
    log_path = log.write(args.log or args.out.with_suffix(".log"))
    final = log.epoch_means[-1][1] if log.epoch_means else float("nan")
    print(f"checkpoint={args.out}")
    print(f"log={log_path}")
    print(f"final_loss={final!r}")
    return 0


def _evaluate(args: argparse.Namespace, cfg: Config, task: str) -> int:
    ckpt = load_checkpoint(args.ckpt)
    report = eval_zero_shot(
        _load_data(args.data),
        ckpt.restore_model(),
        ckpt.vocab,
        _config_template(cfg, args),
        task=task,
        max_len=ckpt.config.max_len,
    )
    for line in report.to_lines():
        if not line.startswith("class."):
            print(line)
    if args.report:
        report.write(args.report)
    return 0


def cmd_eval(args: argparse.Namespace, cfg: Config) -> int:
    return _evaluate(args, cfg, cfg.task)


def cmd_zeroshot(args: argparse.Namespace, cfg: Config) -> int:
    return _evaluate(args, cfg, "genre")


def cmd_fewshot(args: argparse.Namespace, cfg: Config) -> int:
    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"--ratios must be comma-separated numbers, got {args.ratios!r}") from None
    config = cfg.train_config()
    base = load_checkpoint(args.init_ckpt)
    dataset = _load_data(args.data)
    test_set = load_metadata(args.test_data)
    template = TemplateSpec(config.template)

    def fine_tune(subset: List[DatasetRecord]) -> Checkpoint:
        return train(config, subset, init_from=base)[0]

    def evaluate(ckpt: Checkpoint) -> MetricsReport:
        return eval_zero_shot(
            test_set, ckpt.restore_model(), ckpt.vocab, template, task=cfg.task, max_len=config.max_len
        )

    points = few_shot_sweep(
        fine_tune, dataset, ratios, evaluate,
        batch_size=config.batch_size, seed=config.seed, progress=_progress(args),
    )
    for line in sweep_lines(points):
        print(line)
    return 0


def cmd_stft(args: argparse.Namespace, cfg: Config) -> int:
    spec = stft(
        read_wav(args.input),
        cfg.get("signal.frame_len"),
        cfg.get("signal.hop"),
        cfg.get("signal.window"),
        cfg.get("signal.log_compress"),
        cfg.get("signal.eps"),
    )
    write_matrix(args.out, spec.mags)
    print(f"wrote {spec.n_bins}x{spec.n_frames} spectrum to {args.out}")
    return 0


def cmd_ablate_templates(args: argparse.Namespace, cfg: Config) -> int:
    ckpt = load_checkpoint(args.ckpt)
    names = args.templates or list(STUDY_TEMPLATES)
    reports = template_ablation(
        _load_data(args.data),
        ckpt.restore_model(),
        ckpt.vocab,
        [_template(t) for t in names],
        task=args.task,
        max_len=ckpt.config.max_len,
        progress=_progress(args),
    )
    table = ablation_table(reports)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "zeroshot": cmd_zeroshot,
    "fewshot": cmd_fewshot,
    "stft": cmd_stft,
    "ablate-templates": cmd_ablate_templates,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args)
        if args.version:
            print(__version__)
            return 0
        cfg = _load_config(args)
        if args.show_config:
            print(cfg.dumps(), end="")
            return 0
        if not args.command:
            raise UsageError("a subcommand is required (see --help)")
        return COMMANDS[args.command](args, cfg)
    except MuserError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
