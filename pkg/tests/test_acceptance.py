"""End-to-end acceptance criteria; each test records a PASS/FAIL line printed after the session."""

import json
import math
import statistics
import time
from fractions import Fraction
from importlib import resources

import numpy as np
import pytest

from eoaug import captioner as C
from eoaug import config as config_mod
from eoaug import diffusion as D
from eoaug import lora
from eoaug import tensor as T
from eoaug.config import PipelineConfig, load_config
from eoaug.pipeline import run_pipeline
from eoaug.pipeline.encoder import DualEncoder, EncoderSpec, TextVocab
from eoaug.pipeline.evaluate import EvalReport, format_delta, report_cells
from eoaug.rng import SplitMix64
from eoaug.tensor import ParamSet, Tensor
from eoaug.trainkit import (AdamwConfig, LoopConfig, Optimizer, Scheduler, SgdConfig, clip_grad_norm,
                            contrastive_loss, lr_at, train_loop)

from conftest import ACCEPTANCE_RESULTS, numeric_grad, rel_error
from oracles import exhaustive_best, greedy, random_lm


def record(name, passed, detail):
    ACCEPTANCE_RESULTS[name] = (bool(passed), detail)
    assert passed, f"criterion {name}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def away_from_zero(a):
    # keep relu inputs off the kink so central differences are well defined
    return np.where(np.abs(a) < 1e-2, a + 0.05, a)


def op_cases(r):
    """name -> builder(r) returning (function of input tensors, list of input arrays)."""
    targets = np.array([0, 3, 1, 4])

    return {
        "matmul": lambda: (T.matmul, [r.normal((3, 4)), r.normal((4, 2))]),
        "transpose": lambda: (T.transpose, [r.normal((3, 4))]),
        "conv2d": lambda: (T.conv2d, [r.normal((2, 2, 4, 5)), r.normal((3, 2, 3, 3))]),
        "add": lambda: (T.add, [r.normal((2, 3)), r.normal((2, 3))]),
        "sub": lambda: (T.sub, [r.normal((2, 3)), r.normal((2, 3))]),
        "mul": lambda: (T.mul, [r.normal((2, 3)), r.normal((2, 3))]),
        "affine": lambda: (lambda x: T.affine(x, 1.7, -0.3), [r.normal((2, 3))]),
        "add_bias": lambda: (T.add_bias, [r.normal((3, 4)), r.normal(4)]),
        "add_channel": lambda: (T.add_channel, [r.normal((2, 3, 2, 2)), r.normal((2, 3))]),
        "add_channel_shared": lambda: (T.add_channel, [r.normal((2, 3, 2, 2)), r.normal(3)]),
        "relu": lambda: (T.relu, [away_from_zero(r.normal((3, 4)))]),
        "group_norm": lambda: (lambda x: T.group_norm(x, 2), [r.normal((2, 4, 3, 3))]),
        "sum": lambda: (lambda x: T.sum(x, axes=(1,)), [r.normal((2, 3, 2))]),
        "mean": lambda: (lambda x: T.mean(x, axes=(2, 3)), [r.normal((2, 3, 2, 2))]),
        "avg_pool2": lambda: (T.avg_pool2, [r.normal((1, 2, 4, 4))]),
        "upsample2": lambda: (T.upsample2, [r.normal((1, 2, 2, 3))]),
        "l2_normalize": lambda: (T.l2_normalize, [r.normal((3, 4))]),
        "softmax_cross_entropy": lambda: (
            lambda z: T.softmax_cross_entropy(z, targets), [r.normal((4, 5))]),
        "lora_forward": lambda: (
            lambda x, w, a, b: lora.lora_forward(x, lora.LoraAdapter(w, a, b)),
            [r.normal((2, 5)), r.normal((5, 4)), r.normal((5, 2)), r.normal((4, 2))]),
        "contrastive_loss": lambda: (
            lambda a, b: contrastive_loss(T.l2_normalize(a), T.l2_normalize(b), 0.07),
            [r.normal((4, 3)), r.normal((4, 3))]),
    }


def check_op(fn, arrays, r):
    """Relative error of backward against central differences for a random projection of the output."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = r.normal(out.shape) if out.shape else np.array(1.0)

    def scalar(*ts):
        o = fn(*ts)
        return T.sum(T.mul(o, Tensor(proj))) if o.shape else o

    grads = T.grad(scalar(*tensors), tensors)
    worst = 0.0
    for i, a in enumerate(arrays):
        num = numeric_grad(lambda: scalar(*[Tensor(x) for x in arrays]).item(), a)
        worst = max(worst, rel_error(grads[i], num))
    return worst


def directional_error(params: ParamSet, loss_of, r, h=1e-5):
    """Backward gradient vs central difference along one random unit direction over all trainable params.

    Returns None when the segment [-h, h] crosses a relu kink, detected by
    the two one-sided differences disagreeing; such instances are redrawn.
    """
    grads = T.backward(loss_of(), params)
    names = sorted(grads)
    dirs = {n: r.normal(params[n].shape) for n in names}
    norm = math.sqrt(sum(float(np.sum(v * v)) for v in dirs.values()))
    analytic = sum(float(np.sum(grads[n] * dirs[n])) for n in names) / norm
    mid = loss_of().item()
    for n in names:
        params[n].data += h * dirs[n] / norm
    up = loss_of().item()
    for n in names:
        params[n].data -= 2 * h * dirs[n] / norm
    down = loss_of().item()
    for n in names:
        params[n].data += h * dirs[n] / norm
    fwd, bwd = (up - mid) / h, (mid - down) / h
    if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1e-6):
        return None
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)


def network_errors(make_instance, r, count=100):
    """Worst directional error over ``count`` kink-free instances and the number redrawn."""
    worst, redrawn, i = 0.0, 0, 0
    while i < count:
        params, loss_of = make_instance(i + redrawn)
        err = directional_error(params, loss_of, r)
        if err is None:
            redrawn += 1
            continue
        worst = max(worst, err)
        i += 1
    return worst, redrawn


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    r = SplitMix64(2024)
    cases = op_cases(r)
    worst = {}
    for name, build in cases.items():
        worst[name] = max(check_op(*build(), r) for _ in range(100))
    spec = D.DenoiserSpec(channels=2, widths=(4, 8, 4), emb_dim=6, groups=4)
    sched = D.linear_schedule(10, 0.01, 0.2)

    def denoiser_instance(i):
        den = D.Denoiser.init(spec, i)
        if i % 2:
            lora.attach(den.params, D.LORA_LAYERS, 1, i)
            for layer in D.LORA_LAYERS:
                b_name = lora.factor_names(layer)[1]
                den.params.set(b_name, r.normal(den.params[b_name].shape))
        x0, noise = r.uniform((2, 2, 4, 4)), r.normal((2, 2, 4, 4))
        cond, t = r.normal((2, 6)), r.integers(1, 11, 2)
        return den.params, lambda: D.ddpm_loss(den, x0, cond, t, noise, sched)

    vocab = TextVocab(["forest", "river", "pasture", "a remote sensing image of"])
    texts = ["forest", "river", "a remote sensing image of pasture"]

    def encoder_instance(i):
        enc = DualEncoder.init(EncoderSpec(3, (4, 4, 4), 8), vocab, i)
        imgs = r.uniform((3, 3, 8, 8))
        return enc.params, lambda: contrastive_loss(enc.encode_images(imgs), enc.encode_texts(texts), 0.07)

    worst["denoiser"], den_redrawn = network_errors(denoiser_instance, r)
    worst["dual_encoder"], enc_redrawn = network_errors(encoder_instance, r)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    record("1 gradient correctness", not bad and elapsed < 120,
           f"max rel err {max(worst.values()):.2e} over {len(worst)} ops x 100 instances "
           f"({den_redrawn + enc_redrawn} network instances redrawn at relu kinks), {elapsed:.1f}s"
           + (f"; failing {sorted(bad)}" if bad else ""))


# ---------------------------------------------------------------------------
# 2. forward-process consistency
# ---------------------------------------------------------------------------

def test_criterion_2_forward_process_consistency():
    start = time.perf_counter()
    sched = D.linear_schedule(50, 1e-4, 0.02)
    n, x0 = 10_000, 0.7
    notes, ok = [], True
    for t in (1, sched.T // 2, sched.T):
        r = SplitMix64.from_keys(7, "iterated", t)
        x = np.full(n, x0)
        for s in range(1, t + 1):
            x = D.forward_step(x, s, sched, r.normal(n))
        m = D.forward_marginal(np.full(n, x0), t, sched, SplitMix64.from_keys(7, "marginal", t).normal(n))
        se_mean = math.sqrt(x.var(ddof=1) / n + m.var(ddof=1) / n)
        se_var = math.sqrt(2 * x.var(ddof=1) ** 2 / (n - 1) + 2 * m.var(ddof=1) ** 2 / (n - 1))
        z_mean = abs(x.mean() - m.mean()) / se_mean
        z_var = abs(x.var(ddof=1) - m.var(ddof=1)) / se_var
        ok &= z_mean < 3 and z_var < 3
        notes.append(f"t={t}: {z_mean:.2f}/{z_var:.2f} SE")
    elapsed = time.perf_counter() - start
    record("2 forward-process consistency", ok and elapsed < 60,
           f"mean/var gaps {', '.join(notes)}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. LoRA algebra
# ---------------------------------------------------------------------------

def test_criterion_3_lora_algebra():
    r = SplitMix64(33)
    ad = lora.LoraAdapter(Tensor(r.normal((8, 6))), Tensor(r.normal((8, 2)), True), Tensor(r.normal((6, 2)), True))
    merged = lora.lora_merge(ad)
    merge_err = max(float(np.abs(lora.lora_forward(x, ad).data - x @ merged).max())
                    for x in (r.normal((1, 8)) for _ in range(100)))

    W = r.normal((8, 6))
    fresh = lora.lora_init(W, 2, 1)
    x = r.normal((100, 8))
    identity = lora.lora_forward(x, fresh).data.tobytes() == (x @ W).tobytes()

    spec = D.DenoiserSpec(channels=2, widths=(4, 8, 4), emb_dim=6, groups=4)
    den = D.Denoiser.init(spec, 0)
    frozen_before = {n: den.params[n].data.tobytes() for n in den.params}
    lora.attach(den.params, D.LORA_LAYERS, 2, 9)
    sched = D.linear_schedule(10, 0.01, 0.2)
    items = [(r.uniform((2, 4, 4)), r.normal(6)) for _ in range(100)]
    train_loop(den.params, items, D.ddpm_loss_fn(den, sched, 5), Optimizer(AdamwConfig(lr=1e-2)),
               LoopConfig(epochs=1, micro_batch=1, accumulation_steps=1, clip_max_norm=1.0), 5)
    unchanged = all(den.params[n].data.tobytes() == b for n, b in frozen_before.items())
    moved = any(np.any(den.params[lora.factor_names(layer)[1]].data != 0) for layer in D.LORA_LAYERS)

    ratios_ok = True
    for n, m, d in ((64, 64, 4), (32, 16, 2), (6, 8, 3), (100, 40, 1)):
        a = lora.lora_init(np.zeros((n, m)), d, 0)
        ratios_ok &= Fraction(a.trainable_count, a.frozen_count) == Fraction(d * (n + m), n * m)
    record("3 LoRA algebra", merge_err < 1e-9 and identity and unchanged and moved and ratios_ok,
           f"merge err {merge_err:.1e}, fresh identity {identity}, W unchanged after 100 steps {unchanged}, "
           f"exact ratio {ratios_ok}")


# ---------------------------------------------------------------------------
# 4. beam-search oracle
# ---------------------------------------------------------------------------

def test_criterion_4_beam_search_oracle():
    exhaustive_hits = 0
    for seed in range(50):
        vocab = 4 + seed % 2            # 2 or 3 content tokens plus BOS/EOS
        max_len = 3 + seed % 2
        lm = random_lm(500 + seed, 2, vocab, concentration=0.5)
        penalty = (-1.0, 0.0, 0.7)[seed % 3]
        cfg = C.BeamConfig(vocab ** max_len, 1 + seed % 2, max_len, penalty)
        cap = C.beam_search(lm, seed % 2, cfg)
        seq, score = exhaustive_best(lm, seed % 2, cfg.min_len, max_len, penalty)
        exhaustive_hits += cap.tokens == seq and abs(cap.score - score) < 1e-9
    greedy_hits = 0
    for seed in range(50):
        lm = random_lm(900 + seed, 1, 6)
        penalty = (-1.0, 0.0)[seed % 2]
        cap = C.beam_search(lm, 0, C.BeamConfig(1, 2, 8, penalty))
        seq, score = greedy(lm, 0, 2, 8, penalty)
        greedy_hits += cap.tokens == seq and abs(cap.score - score) < 1e-9
    record("4 beam-search oracle", exhaustive_hits == 50 and greedy_hits == 50,
           f"exhaustive {exhaustive_hits}/50, greedy {greedy_hits}/50")


# ---------------------------------------------------------------------------
# 5. accumulation equivalence
# ---------------------------------------------------------------------------

def test_criterion_5_accumulation_equivalence():
    spec = D.DenoiserSpec(channels=2, widths=(4, 8, 4), emb_dim=6, groups=4)
    sched = D.linear_schedule(10, 0.01, 0.2)
    r = SplitMix64(55)
    items = [(r.uniform((2, 4, 4)), r.normal(6)) for _ in range(8)]
    dists = {}
    for label, opt in (("sgd", SgdConfig(lr=0.05, momentum=0.95, weight_decay=1e-5)),
                       ("adamw", AdamwConfig(lr=1e-3))):
        finals = []
        for mb, acc in ((1, 4), (4, 1)):
            den = D.Denoiser.init(spec, 3)
            train_loop(den.params, items, D.ddpm_loss_fn(den, sched, 11), Optimizer(opt),
                       LoopConfig(epochs=2, micro_batch=mb, accumulation_steps=acc, clip_max_norm=1.0), 11)
            finals.append(np.concatenate([den.params[n].data.ravel() for n in sorted(den.params)]))
        dists[label] = float(np.linalg.norm(finals[0] - finals[1]))
    record("5 accumulation equivalence", all(d < 1e-10 for d in dists.values()),
           ", ".join(f"{k} distance {v:.1e}" for k, v in dists.items()))


# ---------------------------------------------------------------------------
# 6. scheduler and clip exactness
# ---------------------------------------------------------------------------

def test_criterion_6_scheduler_and_clip():
    s = Scheduler("cosine", 5.0, 1e-8)
    start, end = lr_at(s, 0, 1e-5), lr_at(s, 5, 1e-5)
    out, norm = clip_grad_norm({"g": np.array([3.0, 4.0])}, 1.0)
    clipped = out["g"].tolist()
    record("6 scheduler and clip exactness", start == 1e-5 and end == 1e-8 and clipped == [0.6, 0.8] and norm == 5.0,
           f"lr(0)={start!r}, lr(5)={end!r}, clip(3,4)->{tuple(clipped)}")


# ---------------------------------------------------------------------------
# 7. config fidelity
# ---------------------------------------------------------------------------

def test_criterion_7_config_fidelity():
    fixture = resources.files("eoaug.data").joinpath("configs", "eurosat-mini.json").read_text(encoding="utf-8")
    same_bytes = fixture == config_mod.dumps(PipelineConfig())
    cfg = load_config("eurosat-mini")
    c, f, k = cfg.caption, cfg.finetune, cfg.classifier
    checks = {
        "beam": (c.width, c.min_len, c.max_len, c.length_penalty) == (5, 10, 256, -1.0),
        "diffusion loop": (f.optimizer.lr, f.loop.micro_batch, f.loop.accumulation_steps, f.loop.clip_max_norm,
                           f.loop.scheduler.kind, f.loop.epochs) == (1e-4, 1, 4, 1.0, "constant", 20),
        "classifier": (k.optimizer.lr, k.optimizer.momentum, k.optimizer.weight_decay, k.loop.scheduler.kind,
                       k.loop.scheduler.t_max, k.loop.scheduler.eta_min, k.loop.epochs)
                      == (1e-5, 0.95, 1e-5, "cosine", 5.0, 1e-8, 5),
    }
    bad = [name for name, ok in checks.items() if not ok]
    record("7 config fidelity", same_bytes and not bad,
           f"fixture bytes match defaults {same_bytes}; " + (f"mismatch {bad}" if bad else "beam, loop, classifier ok"))


# ---------------------------------------------------------------------------
# 8. desk end-to-end experiment
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_desk_experiment(tmp_path):
    start = time.perf_counter()
    cfg = load_config("desk")
    run_pipeline(cfg, tmp_path / "desk")
    elapsed = time.perf_counter() - start
    doc = json.loads((tmp_path / "desk" / "report.json").read_text())
    runs = doc["runs"]
    med = {s: statistics.median(r["top1"] for r in rows) for s, rows in runs.items()}
    monotone = all(r["top1"] <= r["top3"] for rows in runs.values() for r in rows)
    zs = doc["zero_shot"]["median"]
    chance = 1.0 / cfg.data.classes
    seeds = {s: len(rows) for s, rows in runs.items()}
    ok = (med["Diffusion"] >= med["Baseline"] and monotone and zs >= 3 * chance and elapsed <= 45 * 60
          and set(seeds.values()) == {5})
    record("8 desk experiment", ok,
           f"median top-1 Diffusion {med['Diffusion']:.3f} vs Baseline {med['Baseline']:.3f}, "
           f"top3>=top1 {monotone}, zero-shot median {zs:.3f} (need {3 * chance:.2f}), {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 9. report formatting
# ---------------------------------------------------------------------------

def test_criterion_9_report_formatting():
    rows = [EvalReport("CLIP-RN50", "Diffusion", 0.5, 0.6, zero_shot=0.5807, baseline=0.411, headline="zero_shot"),
            EvalReport("CLIP-ViT", "Diffusion", 0.5, 0.6, zero_shot=0.6923, baseline=0.494, headline="zero_shot")]
    cells = [" | ".join(report_cells(r)) for r in rows]
    ok = cells[0] == "41.1% | 58.07% | +16.97%" and report_cells(rows[1])[2] == "+19.83%" \
        and format_delta(0.0) == "+0.00%"
    record("9 report formatting", ok, f"rows '{cells[0]}' and '{cells[1]}'")


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    cfg = load_config("smoke")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        run_pipeline(cfg, out)
    reports = [(o / "report.json").read_bytes() for o in outs]
    images = [{p.name: p.read_bytes() for p in sorted((o / "generated" / "images").iterdir())} for o in outs]
    ok = reports[0] == reports[1] and images[0] == images[1] and len(images[0]) > 0
    record("10 determinism", ok,
           f"report.json identical {reports[0] == reports[1]}, {len(images[0])} generated images identical "
           f"{images[0] == images[1]}")
