"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

A module-level summary repeats every line once the module finishes.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from leapd.alignment import (
    class_probabilities, cosine_similarity, dissimilarity_score, domain_invariant_loss, domain_specific_loss,
    prompt_ce_loss, similarity_score, total_loss,
)
from leapd.cli import run
from leapd.config import RunConfig
from leapd.datasets import DatasetError, format_visdrone_line, make_domain_split, parse_visdrone_line
from leapd.detector import detect
from leapd.encoders import l2_normalize
from leapd.evaluation import iou, average_precision, map_metrics
from leapd.training import (
    compute_losses, init_state, load_checkpoint, read_metrics, save_checkpoint, strip_domain_modules, train,
    train_step,
)
from map_oracle import oracle_map, random_instance
from visdrone_cases import CASES

TRAIN_DOMAINS = [("low", "front", "day"), ("high", "bird", "day")]
HELDOUT_DOMAINS = [("medium", "side", "night")]

RESULTS = {}


@pytest.fixture(scope="module", autouse=True)
def summary():
    yield
    print("\n=== acceptance summary ===")
    for k in sorted(RESULTS):
        print(RESULTS[k])


def verdict(n, name, ok, detail):
    line = f"[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS[n] = line
    print("\n" + line)
    assert ok, line


def smoke_split(seed):
    return make_domain_split(TRAIN_DOMAINS, HELDOUT_DOMAINS, per_domain=100, seed=seed, heldout_per_domain=50)


# 1 ----------------------------------------------------------------------------


def test_c01_closed_form_losses():
    t0 = time.perf_counter()
    eps = 1e-7
    u = lambda *x: l2_normalize(torch.tensor(x, dtype=torch.float64))  # noqa: E731
    sig10 = 1 / (1 + math.exp(-10))
    v = u(1.0, 0.0, 0.0)
    prompts = torch.stack([u(0.2, math.sqrt(0.96), 0.0), u(0.1, 0.0, math.sqrt(0.99))])
    checks = [
        ("cos 45deg", float(cosine_similarity([1.0, 0.0], [1.0, 1.0])), 1 / math.sqrt(2)),
        ("p equal sims", float(class_probabilities(v, torch.stack([u(0, 1, 0), u(0, 0, 1)]), 0.01)[0]), 0.5),
        ("p (0.2,0.1)[0]", float(class_probabilities(v, prompts, 0.01)[0]), sig10),
        ("p (0.2,0.1)[1]", float(class_probabilities(v, prompts, 0.01)[1]), 1 - sig10),
        ("ce perfect", float(prompt_ce_loss([0.0, 1.0], 1)), 0.0),
        ("ce uniform 4", float(prompt_ce_loss([0.25] * 4, 0)), 1.3862944),
        ("s identical", float(similarity_score(v, v)), 1.0),
        ("s opposite", float(similarity_score(v, -v)), eps),
        ("s orthogonal", float(similarity_score(v, u(0, 1, 0))), 0.5),
        ("ds identical", float(dissimilarity_score(v, v)), eps),
        ("ds opposite", float(dissimilarity_score(v, -v)), 1.0),
        ("ds orthogonal", float(dissimilarity_score(v, u(0, 1, 0))), 0.5),
        ("L_di(1)", float(domain_invariant_loss(1.0)), 0.0),
        ("L_di(0.5)", float(domain_invariant_loss(0.5)), 0.3465736),
        ("L_di(eps)", float(domain_invariant_loss(eps)), (1 - eps) * -math.log(eps)),
        ("L_ds(1,1)", float(domain_specific_loss([1.0, 1.0])), 0.0),
        ("L_ds(0.5)", float(domain_specific_loss([0.5])), 0.3465736),
        ("L_ds(1,0.5)", float(domain_specific_loss([1.0, 0.5])), 0.1732868),
        ("total ones", total_loss((1, 1, 1, 1)).L_total, 3.0),
        ("total zeros", total_loss((0, 0, 0, 0)).L_total, 0.0),
        ("total mixed", total_loss((0.3, 0.2, 0.4, 0.6)).L_total, 1.0),
        ("iou 1/7", iou((0, 0, 2, 2), (1, 1, 2, 2)), 1 / 7),
        ("AP TP first", average_precision([("a", (0, 0, 4, 4), 0.9), ("a", (9, 9, 1, 1), 0.8)],
                                          {"a": [(0, 0, 4, 4)]}, 0.5), 1.0),
        ("AP FP first", average_precision([("a", (9, 9, 1, 1), 0.9), ("a", (0, 0, 4, 4), 0.8)],
                                          {"a": [(0, 0, 4, 4)]}, 0.5), 0.5),
    ]
    # the 7-digit references carry up to 5e-8 rounding of their own
    bad = [(name, got, want) for name, got, want in checks if abs(got - want) > 1e-6]
    elapsed = time.perf_counter() - t0
    verdict(1, "closed-form losses", not bad and elapsed < 5,
            f"{len(checks) - len(bad)}/{len(checks)} within 1e-6 in {elapsed:.2f}s" + (f" bad={bad}" if bad else ""))


# 2 ----------------------------------------------------------------------------


def _probe(model, loss_fn, params, rng, h=1e-5):
    """Directional derivative along a random unit direction: autograd vs central differences."""
    direction = [torch.from_numpy(rng.normal(size=tuple(p.shape))) for p in params]
    norm = math.sqrt(sum(float((d**2).sum()) for d in direction))
    direction = [d / norm for d in direction]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, direction) if p.grad is not None)
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(h * d)
        up = float(loss_fn())
        for p, d in zip(params, direction):
            p.add_(-2 * h * d)
        down = float(loss_fn())
        for p, d in zip(params, direction):
            p.add_(h * d)
    numeric = (up - down) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def test_c02_gradient_suite():
    t0 = time.perf_counter()
    tr, _ = make_domain_split(TRAIN_DOMAINS, HELDOUT_DOMAINS, per_domain=2, seed=11)
    samples = [tr[i] for i in range(len(tr))]
    rng = np.random.default_rng(0)
    worst, probes = {}, 0
    for mode, extra in (("learnable", {}), ("manual", {"freeze_text_encoder": "false"})):
        cfg = RunConfig(prompt_mode=mode, pyramid_channels=16, embed_dim=32, prompt_len=4, **extra)
        model = init_state(cfg, tr.categories, tr.domains).model
        model.train()
        named = {n: p for n, p in model.named_parameters() if p.requires_grad}
        det = [p for n, p in named.items() if n.startswith("detector.")]
        fsn = [p for n, p in named.items() if n.startswith("fsn.")]
        side = [p for n, p in named.items() if n.startswith(("prompt_bank", "text_encoder."))]

        def term(name):
            return lambda: compute_losses(model, samples)[name]

        def total():
            t = compute_losses(model, samples)
            return sum(w * t[k] for w, k in zip(cfg.lambdas, ("L_od", "L_lp", "L_di", "L_ds")))

        plan = [("L_od", term("L_od"), det), ("L_lp", term("L_lp"), side), ("L_di", term("L_di"), det + fsn),
                ("L_ds", term("L_ds"), det + fsn + side), ("L_total", total, det + fsn + side)]
        per = 24 if mode == "learnable" else 16
        for name, fn, params in plan:
            for _ in range(per):
                err = _probe(model, fn, params, rng)
                key = f"{mode}:{name}"
                worst[key] = max(worst.get(key, 0.0), err)
                probes += 1
    elapsed = time.perf_counter() - t0
    peak = max(worst.values())
    verdict(2, "gradients vs central differences", probes >= 200 and peak < 1e-4 and elapsed < 120,
            f"{probes} probes, worst rel err {peak:.2e} ({max(worst, key=worst.get)}) in {elapsed:.1f}s")


# 3 ----------------------------------------------------------------------------


def test_c03_probability_normalization():
    rng = np.random.default_rng(3)
    worst_sum, worst_shift = 0.0, 0.0
    for _ in range(1000):
        n, d = int(rng.integers(1, 12)), int(rng.integers(2, 16))
        tau = float(10 ** rng.uniform(-2.5, 0.5))
        v = torch.from_numpy(rng.normal(size=d))
        prompts = torch.from_numpy(rng.normal(size=(n, d)))
        p = class_probabilities(v, prompts, tau)
        worst_sum = max(worst_sum, abs(float(p.sum()) - 1))
        logits = cosine_similarity(v[None], prompts) / tau
        shifted = torch.softmax(logits + float(rng.uniform(-1e3, 1e3)), 0)
        worst_shift = max(worst_shift, float((shifted - p).abs().max()))
    verdict(3, "probability normalization", worst_sum <= 1e-6 and worst_shift <= 1e-9,
            f"1000 cases, max |sum-1| {worst_sum:.1e}, max shift deviation {worst_shift:.1e}")


# 4 ----------------------------------------------------------------------------


def test_c04_map_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        det, gt, cats, ign = random_instance(rng)
        if map_metrics(det, gt, cats, ign).metrics() != oracle_map(det, gt, cats, ign):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(4, "mAP oracle equivalence", mismatches == 0 and elapsed < 60,
            f"{200 - mismatches}/200 exact matches in {elapsed:.1f}s")


# 5 ----------------------------------------------------------------------------


def test_c05_detached_inference(tmp_path):
    tr, ho = make_domain_split(TRAIN_DOMAINS, HELDOUT_DOMAINS, per_domain=8, seed=5, heldout_per_domain=20)
    state = init_state(RunConfig(batch_size=8), tr.categories, tr.domains)
    for start in (0, 8):
        train_step(state, [tr[i] for i in range(start, start + 8)])
    full = save_checkpoint(state.model, tmp_path / "full.leapd")
    slim = strip_domain_modules(full, tmp_path / "slim.leapd")
    a, b = load_checkpoint(full), load_checkpoint(slim)
    same = sum(detect(a.detector, ho[i].image) == detect(b.detector, ho[i].image) for i in range(20))
    n_dets = sum(len(detect(a.detector, ho[i].image)) for i in range(20))
    verdict(5, "detached inference", same == 20 and not b.has_domain_modules,
            f"{same}/20 images bit-identical ({n_dets} detections), "
            f"checkpoint {full.stat().st_size} -> {slim.stat().st_size} bytes")


# 6 ----------------------------------------------------------------------------


def test_c06_degeneracy():
    tr, _ = make_domain_split(TRAIN_DOMAINS, HELDOUT_DOMAINS, per_domain=24, seed=6)
    learn = init_state(RunConfig(lambda_lp=0.0, lambda_di=0.0, lambda_ds=0.0), tr.categories, tr.domains)
    base = init_state(RunConfig(prompt_mode="detector_only"), tr.categories, tr.domains)
    order = np.random.default_rng(6).permutation(len(tr))
    worst = 0.0
    for step in range(50):
        idx = [order[(step * 8 + k) % len(tr)] for k in range(8)]
        batch = [tr[int(i)] for i in idx]
        train_step(learn, batch)
        train_step(base, batch)
        lp = dict(learn.model.named_parameters())
        for name, p in base.model.named_parameters():
            worst = max(worst, float((lp[name].detach() - p.detach()).abs().max()))
    verdict(6, "degeneracy to detector-only", worst == 0.0,
            f"50 steps, max abs parameter difference {worst!r}")


# 7 ----------------------------------------------------------------------------


def test_c07_smoke_experiment(tmp_path):
    t0 = time.perf_counter()
    tr, ho = smoke_split(0)
    cfg = RunConfig(prompt_mode="learnable", seed=0, epochs=12, batch_size=16)
    train(cfg, tr, tmp_path, eval_dataset=ho)
    elapsed = time.perf_counter() - t0
    rows = read_metrics(tmp_path / "metrics.jsonl")
    epochs = [r for r in rows if r["kind"] == "epoch"]
    steps = [r for r in rows if r["kind"] == "step"]
    lp0, lp1 = epochs[0]["mean_L_lp"], epochs[-1]["mean_L_lp"]
    t_first, t_last = steps[0]["L_total"], steps[-1]["L_total"]
    ok = len(epochs) == 12 and lp1 < lp0 and t_last < t_first and elapsed < 1800
    verdict(7, "one-step smoke experiment", ok,
            f"{len(tr)} train / {len(ho)} held-out, {len(steps)} steps in {elapsed:.0f}s; "
            f"L_lp epoch mean {lp0:.3f} -> {lp1:.3f}; L_total {t_first:.3f} -> {t_last:.3f}; "
            f"held-out mAP50 {epochs[-1]['mAP50']:.4f}")


# 8 ----------------------------------------------------------------------------


def test_c08_directional_trend(tmp_path):
    from leapd.evaluation import evaluate

    scores = {"detector_only": [], "learnable": []}
    for seed in range(5):
        tr, ho = smoke_split(seed)
        for mode in scores:
            cfg = RunConfig(prompt_mode=mode, seed=seed)
            ckpt = train(cfg, tr, tmp_path / f"{mode}_{seed}")
            scores[mode].append(evaluate(load_checkpoint(ckpt).detector, ho).mAP50)
    med = {m: float(np.median(v)) for m, v in scores.items()}
    detail = "; ".join(f"{m} median {med[m]:.4f} [{', '.join(f'{x:.4f}' for x in v)}]" for m, v in scores.items())
    verdict(8, "directional trend (5 seeds)", med["learnable"] >= med["detector_only"] - 0.005,
            f"{detail}; delta {med['learnable'] - med['detector_only']:+.4f}")


# 9 ----------------------------------------------------------------------------


def test_c09_ablation_structure(tmp_path):
    data = tmp_path / "data"
    assert run(["gen-data", "--per-domain", "20", "--heldout-per-domain", "10", "--seed", "9",
                "--out", str(data)]) == 0
    out = tmp_path / "ablation"
    code = run(["ablate", "--lengths", "4,8,16,32", "--data", str(data / "train"), "--val", str(data / "heldout"),
                "--set", "epochs=2", "--out", str(out)])
    rows = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()] if code == 0 else []
    params = {r["detector_params"] for r in rows}
    learn = [r for r in rows if r["prompt_mode"] == "learnable"]
    base = RunConfig(epochs=2)
    configs_ok = True
    for r in learn:
        cfg = load_checkpoint(out / f"len_{r['row']}" / "checkpoint.leapd").config
        configs_ok &= cfg == base.replace(prompt_len=r["prompt_len"])
    table = (out / "ablation.txt").read_text() if code == 0 else ""
    ok = (code == 0 and len(rows) == 5 and [r["prompt_len"] for r in learn] == [4, 8, 16, 32]
          and len(params) == 1 and None not in params and configs_ok)
    verdict(9, "ablation structure", ok,
            f"exit {code}, {len(rows)} rows ({', '.join(r['row'] for r in rows)}), "
            f"detector params {sorted(params, key=str)}, configs differ only in n: {configs_ok}\n{table}")


# 10 ---------------------------------------------------------------------------


def test_c10_parser_fixtures():
    agree, round_trips = 0, 0
    for lineno, (line, expected) in enumerate(CASES, 1):
        try:
            rec = parse_visdrone_line(line, lineno)
        except DatasetError as e:
            agree += expected[0] == "error" and expected[1] in str(e) and f"line {lineno}" in str(e)
            continue
        if expected[0] != "ok":
            continue
        box, score, cat, trunc, occ, ignored, canonical = expected[1:]
        agree += (rec.box, rec.score, rec.category, rec.truncation, rec.occlusion, rec.ignored) == \
            (box, score, cat, trunc, occ, ignored)
        if canonical:
            round_trips += format_visdrone_line(rec) == line
    n_canon = sum(1 for _, e in CASES if e[0] == "ok" and e[-1])
    verdict(10, "parser fixtures", agree == len(CASES) == 50 and round_trips == n_canon,
            f"{agree}/{len(CASES)} lines as specified, {round_trips}/{n_canon} exact round-trips")
