"""Command-line entry point: ``eoaug <subcommand> [flags]``.

Exit codes: 0 success, 1 usage/validation/config error, 2 runtime failure.
Every subcommand writes only under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from filelock import Timeout

from . import config as config_mod
from .errors import (ConfigError, ContractError, DimensionError, EoAugError, FormatError, PolicyError, StageError,
                     ValidationError)

DEFAULT_SEED = 42
DEFAULT_OUT = "eoaug-run"
USAGE_ERRORS = (ConfigError, ValidationError, PolicyError, ContractError, DimensionError, FormatError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Reports usage problems with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class Emitter:
    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def __call__(self, event: Dict) -> None:
        if self.as_json:
            print(json.dumps(event, sort_keys=True), file=self.stream, flush=True)
        elif event.get("event") == "stage":
            extra = f" ({event['seconds']}s)" if "seconds" in event else ""
            print(f"{event['stage']}: {event['status']}{extra}", file=self.stream, flush=True)
        else:
            fields = " ".join(f"{k}={v}" for k, v in event.items() if k != "event")
            print(f"{event.get('event')}: {fields}", file=self.stream, flush=True)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="pipeline config JSON, a path or bundled name; None means built-in defaults")
    p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="base seed for all randomness")
    p.add_argument("--out", default=DEFAULT_OUT, help="output directory")
    p.add_argument("--json", action="store_true", help="emit one JSON line per completed stage")


def _load_cfg(args) -> config_mod.PipelineConfig:
    return config_mod.load_config(args.config, args.override, args.seed)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def cmd_make_dataset(args, emit: Emitter) -> int:
    from .datakit.dataset import SplitSpec, make_synth_dataset, split
    from .datakit.imageio import save_dataset
    from .rng import derive

    overrides = list(args.override)
    for flag, key in (("classes", "data.classes"), ("per_class", "data.per_class"), ("size", "data.size")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    cfg = config_mod.load_config(args.config, overrides, args.seed)
    d = cfg.data
    ds = make_synth_dataset(d.classes, d.per_class, d.size, derive(cfg.seed, "dataset"))
    parts = split(ds, SplitSpec(d.split, derive(cfg.seed, "split")))
    for name, part in zip(("train", "val", "test"), parts):
        path = save_dataset(part, Path(args.out) / "dataset" / name)
        emit({"event": "dataset", "split": name, "records": len(part), "manifest": str(path)})
    return 0


def cmd_instruct(args, emit: Emitter) -> int:
    from .eot import atomic_write
    from .promptgen import instantiate, load_meta_prompt, prompts_to_json

    cfg = _load_cfg(args)
    if args.classes:
        classes = [c for item in args.classes for c in item.split(",") if c]
    else:
        from .datakit.dataset import class_names_for
        classes = list(class_names_for(cfg.data.classes))
    prompts = instantiate(load_meta_prompt(args.meta or cfg.meta_prompt), classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "prompts.json", prompts_to_json(prompts).encode("utf-8"))
    emit({"event": "stage", "stage": "instruct", "status": "ran", "output": "prompts.json"})
    return 0


def _stage_command(stage: str) -> Callable:
    def run(args, emit: Emitter) -> int:
        from .pipeline.stages import run_pipeline

        run_pipeline(_load_cfg(args), args.out, log=emit, stop_after=stage, lock=False)
        return 0

    return run


def cmd_train_classifier(args, emit: Emitter) -> int:
    from .datakit.imageio import load_dataset
    from .pipeline.classifier import evaluate_topk, train_classifier
    from .pipeline.stages import Run, run_pipeline

    cfg = _load_cfg(args)
    out = Path(args.out)
    needs = "augment" if args.strategy == "Diffusion" else "instruct"
    run_pipeline(cfg, out, log=emit, stop_after=needs, lock=False)
    run = Run(cfg, out)
    train, val, test = run.splits()
    generated = load_dataset(out / "generated" / "manifest.jsonl", run.class_names) \
        if args.strategy == "Diffusion" else None
    encoder, history = train_classifier(train, val, args.strategy, cfg.classifier, run.seed("classifier", args.strategy, 0),
                                        generated=generated, policy_path=args.policy)
    encoder.params.save(out / "classifier.ckpt")
    metrics = evaluate_topk(encoder, test)
    emit({"event": "classifier", "strategy": args.strategy, "epochs": len(history), **metrics})
    return 0


def cmd_evaluate(args, emit: Emitter) -> int:
    from .pipeline.evaluate import topk_accuracy

    if args.scores is None:
        raise UsageError("evaluate needs --scores FILE with {\"scores\": [[...]], \"labels\": [...]}")
    with open(args.scores, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        scores, labels = np.asarray(doc["scores"], dtype=np.float64), doc["labels"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{args.scores}: expected 'scores' and 'labels' ({exc})") from None
    acc = topk_accuracy(scores, labels, args.k)
    if args.json:
        emit({"event": "evaluate", "k": args.k, "accuracy": acc})
    else:
        print(f"top{args.k} {acc:.4f}")
    return 0


def cmd_report(args, emit: Emitter) -> int:
    from .eot import atomic_write
    from .pipeline.evaluate import EvalReport, emit_report

    out = Path(args.out)
    if args.results is not None:
        with open(args.results, encoding="utf-8") as fh:
            rows = json.load(fh)
        try:
            results = [EvalReport(**row) for row in rows]
        except TypeError as exc:
            raise ValidationError(f"{args.results}: bad result row ({exc})") from None
        report_json, report_md = emit_report(results)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "report.json", report_json.encode("utf-8"))
        atomic_write(out / "report.md", report_md.encode("utf-8"))
    else:
        path = out / "report.md"
        if not path.exists():
            raise UsageError(f"no report in {out}; pass --results FILE or run the pipeline first")
        report_md = path.read_text(encoding="utf-8")
    print(report_md, end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = Parser(prog="eoaug", description="Diffusion-based data augmentation pipeline at desk scale.",
                    formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def add(name: str, help_text: str, func: Callable) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        _common(p)
        p.set_defaults(func=func)
        return p

    p = add("make-dataset", "write the synthetic dataset splits as EOT1 files with manifests", cmd_make_dataset)
    p.add_argument("--classes", type=int, default=None, help="number of classes (config data.classes)")
    p.add_argument("--per-class", type=int, default=None, help="images per class (config data.per_class)")
    p.add_argument("--size", type=int, default=None, help="image side in pixels (config data.size)")

    p = add("instruct", "instantiate the meta-prompt for each class into prompts.json", cmd_instruct)
    p.add_argument("--classes", action="append", default=None, metavar="NAME[,NAME...]",
                   help="class names; None means the dataset classes")
    p.add_argument("--meta", default=None, help="meta-prompt text file; None means the bundled one")

    add("caption", "caption the training images (runs earlier stages if needed)", _stage_command("caption"))
    add("pretrain", "train the base denoiser (runs earlier stages if needed)", _stage_command("pretrain"))
    add("finetune", "LoRA fine-tune the denoiser on captioned images", _stage_command("finetune"))
    add("augment", "generate the prompt-spec image set", _stage_command("augment"))

    from .config import STRATEGIES
    p = add("train-classifier", "train the dual encoder under one augmentation strategy", cmd_train_classifier)
    p.add_argument("--strategy", choices=STRATEGIES, default="Baseline", help="augmentation strategy")
    p.add_argument("--policy", default=None, help="AutoAugment policy file; None means the bundled ImageNet policy")

    p = add("evaluate", "top-k accuracy of a score matrix", cmd_evaluate)
    p.add_argument("--scores", default=None, help="JSON file with 'scores' (n x K) and 'labels' (n)")
    p.add_argument("--k", type=int, default=1, help="k of top-k")

    add("pipeline", "run or resume every stage and write the report", _stage_command("evaluate"))

    p = add("report", "render report.json and report.md", cmd_report)
    p.add_argument("--results", default=None, help="JSON list of result rows; None prints the run's report")
    return parser


def run(argv: Optional[Sequence[str]] = None, stdout=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    emit = Emitter(args.json, stdout)
    lock = None
    try:
        from .pipeline.stages import RunLockedError, run_lock

        if args.command not in ("evaluate", "report") or args.command == "report" and args.results:
            lock = run_lock(Path(args.out))
            try:
                lock.acquire()
            except Timeout:
                raise RunLockedError(f"{args.out} is in use by another invocation") from None
        return args.func(args, emit)
    except UsageError as exc:
        print(f"eoaug {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"eoaug {args.command}: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, USAGE_ERRORS) else 2
    except USAGE_ERRORS as exc:
        print(f"eoaug {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (EoAugError, OSError, RuntimeError, ValueError) as exc:
        print(f"eoaug {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    finally:
        if lock is not None and lock.is_locked:
            lock.release()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
