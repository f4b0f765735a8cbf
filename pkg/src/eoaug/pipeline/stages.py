"""Stage orchestration over a run directory.

Stages run in order and each one writes its outputs atomically, manifest
last. On a rerun a stage is skipped when its output exists, unless an
earlier stage ran in the same invocation. Every stage reloads its inputs
from disk so a resumed run sees exactly the bytes a fresh run would.
"""

from __future__ import annotations

import json
import shutil
import statistics
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from filelock import FileLock, Timeout

from .. import config as config_mod
from .. import jsonl, lora
from ..captioner import BeamConfig, Vocabulary, caption_dataset, default_corpus, fit_caption_lm
from ..config import PipelineConfig
from ..datakit.dataset import LabeledDataset, SplitSpec, make_synth_dataset, split
from ..datakit.imageio import load_dataset
from ..diffusion import (LORA_LAYERS, Denoiser, DenoiserSpec, ddpm_loss_fn, linear_schedule, load_denoiser,
                         save_denoiser)
from ..eot import atomic_write
from ..errors import ConfigError, EoAugError, StageError
from ..promptgen import (PromptSpec, instantiate, load_meta_prompt, load_prompt_spec, prompts_from_json,
                         prompts_to_json)
from ..rng import SplitMix64, derive
from ..textcond import embed_text
from ..trainkit import Optimizer, train_loop
from .classifier import evaluate_topk, text_vocab, train_classifier
from .encoder import DualEncoder, EncoderSpec
from .evaluate import EvalReport, emit_report, zero_shot_eval
from .generate import generate_augmented_set, save_generated

STAGES = ("instruct", "caption", "pretrain", "finetune", "augment", "evaluate")
OUTPUTS = {
    "instruct": "prompts.json",
    "caption": "captions.jsonl",
    "pretrain": "denoiser.ckpt",
    "finetune": "lora.ckpt",
    "augment": "generated/manifest.jsonl",
    "evaluate": "report.json",
}
LOCK_NAME = ".eoaug.lock"

Log = Callable[[Dict], None]


class RunLockedError(EoAugError, RuntimeError):
    pass


def run_lock(out: Path) -> FileLock:
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / LOCK_NAME), timeout=0)


def _write_json(path: Path, doc) -> None:
    atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


class Run:
    """Shared, lazily built inputs of one run directory."""

    def __init__(self, cfg: PipelineConfig, out: Path, threads: Optional[int] = None):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self._splits: Optional[Tuple[LabeledDataset, LabeledDataset, LabeledDataset]] = None

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def class_names(self) -> Tuple[str, ...]:
        return self.splits()[0].class_names

    def splits(self) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
        if self._splits is None:
            d = self.cfg.data
            ds = make_synth_dataset(d.classes, d.per_class, d.size, derive(self.cfg.seed, "dataset"))
            self._splits = split(ds, SplitSpec(d.split, derive(self.cfg.seed, "split")))
        return self._splits

    def prompt_spec(self) -> PromptSpec:
        return load_prompt_spec(self.cfg.augment.prompt_spec, self.class_names)

    def seed(self, *keys) -> int:
        return derive(self.cfg.seed, *keys)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_instruct(run: Run) -> None:
    prompts = instantiate(load_meta_prompt(run.cfg.meta_prompt), run.class_names)
    atomic_write(run.path("prompts.json"), prompts_to_json(prompts).encode("utf-8"))


def stage_caption(run: Run) -> None:
    c = run.cfg.caption
    prompts = prompts_from_json(run.path("prompts.json").read_text(encoding="utf-8"))
    spec = run.prompt_spec()
    vocab = Vocabulary.default()
    corpus = default_corpus(vocab, [spec.entries[name] for name in run.class_names])
    lm = fit_caption_lm(corpus, vocab, c.smoothing, len(run.class_names))
    train = run.splits()[0]
    beam = BeamConfig(c.width, c.min_len, c.max_len, c.length_penalty)
    records = caption_dataset(train.images, train.labels, train.ids, run.class_names,
                              {p.class_name: p.text for p in prompts}, lm, vocab, beam)
    jsonl.write(run.path("captions.jsonl"), records)


def _denoiser_spec(run: Run) -> DenoiserSpec:
    d = run.cfg.diffusion
    return DenoiserSpec(3, tuple(d.widths), d.emb_dim, d.groups)


def stage_pretrain(run: Run) -> None:
    """Train the base denoiser on an independent draw of the generator, conditioned on class prompts."""
    cfg = run.cfg
    d = cfg.diffusion
    spec = run.prompt_spec()
    base = make_synth_dataset(cfg.data.classes, cfg.pretrain.base_per_class, cfg.data.size, run.seed("base"),
                              run.class_names)
    conds = {c: embed_text(spec.full_prompt(name), d.emb_dim) for c, name in enumerate(run.class_names)}
    items = [(img, conds[int(label)]) for img, label in zip(base.images, base.labels)]
    schedule = linear_schedule(d.T, d.beta_start, d.beta_end)
    den = Denoiser.init(_denoiser_spec(run), run.seed("denoiser"))
    history = train_loop(den.params, items, ddpm_loss_fn(den, schedule, run.seed("pretrain-noise"), d.cond_dropout),
                         Optimizer(cfg.pretrain.optimizer), cfg.pretrain.loop, run.seed("pretrain"))
    jsonl.write(run.path("pretrain_history.jsonl"), history)
    save_denoiser(run.path("denoiser.ckpt"), den, schedule)


def stage_finetune(run: Run) -> None:
    """LoRA fine-tune of the frozen base on (training image, caption) pairs."""
    cfg = run.cfg
    den, schedule = load_denoiser(run.path("denoiser.ckpt"))
    lora.attach(den.params, LORA_LAYERS, cfg.finetune.lora_rank, run.seed("lora"))
    captions = {r["id"]: r["caption"] for r in jsonl.read(run.path("captions.jsonl"))}
    train = run.splits()[0]
    items = [(img, embed_text(captions[i], den.spec.emb_dim)) for i, img in zip(train.ids, train.images)]
    history = train_loop(den.params, items,
                         ddpm_loss_fn(den, schedule, run.seed("finetune-noise"), cfg.diffusion.cond_dropout),
                         Optimizer(cfg.finetune.optimizer), cfg.finetune.loop, run.seed("finetune"))
    jsonl.write(run.path("finetune_history.jsonl"), history)
    lora.save_adapters(den.params, run.path("lora.ckpt"))


def load_adapted_denoiser(run: Run):
    den, schedule = load_denoiser(run.path("denoiser.ckpt"))
    lora.load_adapters(den.params, run.path("lora.ckpt"))
    return den, schedule


def stage_augment(run: Run) -> None:
    cfg = run.cfg
    den, schedule = load_adapted_denoiser(run)
    gen, prompts = generate_augmented_set(den, schedule, run.prompt_spec(), run.class_names,
                                          cfg.diffusion.guidance_scale, run.seed("generate"), cfg.data.size,
                                          cfg.augment.per_class_count, cfg.augment.chunk, run.threads)
    target = run.path("generated")
    if target.exists():
        shutil.rmtree(target)
    save_generated(gen, prompts, target)


def holdout_split(ds: LabeledDataset, fraction: float, seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Per-class hold-out of ``fraction`` of the items (at least one per class)."""
    keep, held = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[SplitMix64.from_keys(seed, "holdout", c).permutation(members.size)]
        n_held = max(1, int(round(fraction * members.size))) if members.size > 1 else 0
        held.extend(members[:n_held].tolist())
        keep.extend(members[n_held:].tolist())
    return ds.subset(sorted(keep)), ds.subset(sorted(held))


def stage_evaluate(run: Run, log: Optional[Log] = None) -> None:
    cfg = run.cfg
    cc = cfg.classifier
    train, val, test = run.splits()
    generated = load_dataset(run.path("generated/manifest.jsonl"), run.class_names)
    runs: Dict[str, List[Dict]] = {}
    saved: Optional[DualEncoder] = None
    for strategy in cc.strategies:
        runs[strategy] = []
        for s in range(cc.seeds):
            encoder, history = train_classifier(train, val, strategy, cc, run.seed("classifier", strategy, s),
                                                generated=generated)
            metrics = evaluate_topk(encoder, test)
            runs[strategy].append({"seed": s, **metrics, "epochs": len(history)})
            if log is not None:
                log({"event": "classifier", "strategy": strategy, "seed": s, **metrics})
            if saved is None or strategy == cc.strategies[-1] and s == 0:
                saved = encoder
    zero_shot: Dict = {}
    if cc.zero_shot:
        gen_train, gen_val = holdout_split(generated, cc.zero_shot_holdout, run.seed("zero-shot-holdout"))
        accs = []
        for s in range(cc.seeds):
            encoder, history = train_classifier(gen_train, gen_val, "Baseline", cc, run.seed("zero-shot", s),
                                                val_template=cc.zero_shot_template)
            accs.append(zero_shot_eval(encoder, run.class_names, test.images, test.labels, cc.zero_shot_template))
            if log is not None:
                log({"event": "zero_shot", "seed": s, "accuracy": accs[-1]})
        untrained = DualEncoder.init(EncoderSpec(3, tuple(cc.widths), cc.embed_dim),
                                     text_vocab(run.class_names, cc.zero_shot_template), run.seed("untrained"))
        zero_shot = {"per_seed": accs, "median": statistics.median(accs),
                     "untrained": zero_shot_eval(untrained, run.class_names, test.images, test.labels,
                                                 cc.zero_shot_template)}
    if saved is not None:
        saved.params.save(run.path("classifier.ckpt"))
    results = build_results(runs, zero_shot)
    report_json, report_md = emit_report(results)
    doc = json.loads(report_json)
    doc["runs"] = runs
    doc["zero_shot"] = zero_shot
    _write_json(run.path("report.json"), doc)
    atomic_write(run.path("report.md"), report_md.encode("utf-8"))


def median_metrics(per_seed: List[Dict]) -> Dict[str, float]:
    return {k: statistics.median(r[k] for r in per_seed) for k in ("top1", "top3")}


def build_results(runs: Dict[str, List[Dict]], zero_shot: Dict) -> List[EvalReport]:
    """One top-1 row per strategy (compared against Baseline when present) and a zero-shot row."""
    med = {s: median_metrics(r) for s, r in runs.items()}
    base = med.get("Baseline")
    results = []
    for strategy, m in med.items():
        compare = base["top1"] if base is not None and strategy != "Baseline" else None
        results.append(EvalReport(f"DualEncoder top-1 ({strategy})", strategy, m["top1"], m["top3"],
                                  baseline=compare))
    if zero_shot:
        m = med.get("Diffusion") or next(iter(med.values()), {"top1": 0.0, "top3": 0.0})
        results.append(EvalReport("DualEncoder zero-shot (generated only)", "Diffusion", m["top1"], m["top3"],
                                  zero_shot=zero_shot["median"], baseline=zero_shot["untrained"],
                                  headline="zero_shot"))
    return results


STAGE_FUNCS = {
    "instruct": stage_instruct,
    "caption": stage_caption,
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "augment": stage_augment,
    "evaluate": stage_evaluate,
}


def materialize_config(cfg: PipelineConfig, out: Path) -> None:
    """Write config.json on the first run; refuse to resume under a different config."""
    text = config_mod.dumps(cfg)
    path = out / "config.json"
    if path.exists():
        if path.read_text(encoding="utf-8") != text:
            raise ConfigError(f"{out} was created with a different config; use a fresh output directory")
        return
    atomic_write(path, text.encode("utf-8"))


def run_pipeline(cfg: PipelineConfig, out, log: Optional[Log] = None, threads: Optional[int] = None,
                 stop_after: Optional[str] = None, lock: bool = True) -> List[Tuple[str, str]]:
    """Run (or resume) every stage; returns (stage, "ran" | "skipped") pairs.

    A failing stage raises :class:`StageError` naming it; outputs of earlier
    stages stay on disk. Pass ``lock=False`` when the caller already holds
    the run lock.
    """
    out = Path(out)
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}")
    guard = run_lock(out) if lock else None
    if guard is not None:
        try:
            guard.acquire()
        except Timeout:
            raise RunLockedError(f"{out} is in use by another invocation") from None
    try:
        materialize_config(cfg, out)
        run = Run(cfg, out, threads)
        status: List[Tuple[str, str]] = []
        dirty = False
        for stage in STAGES:
            if dirty or not run.path(OUTPUTS[stage]).exists():
                start = time.perf_counter()
                try:
                    if stage == "evaluate":
                        stage_evaluate(run, log)
                    else:
                        STAGE_FUNCS[stage](run)
                except Exception as exc:  # noqa: BLE001 - reported with the stage name
                    raise StageError(stage, exc) from exc
                dirty = True
                status.append((stage, "ran"))
                if log is not None:
                    log({"event": "stage", "stage": stage, "status": "ran", "output": OUTPUTS[stage],
                         "seconds": round(time.perf_counter() - start, 3)})
            else:
                status.append((stage, "skipped"))
                if log is not None:
                    log({"event": "stage", "stage": stage, "status": "skipped", "output": OUTPUTS[stage]})
            if stage == stop_after:
                break
        return status
    finally:
        if guard is not None:
            guard.release()
