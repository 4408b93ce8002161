"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 6 first projects its wall time from timed steps and only trains the
full protocol when the projection fits the budget (or EGSNET_ACCEPTANCE_FULL=1).
"""

import math
import os
import time

import numpy as np
import pytest
import torch
from sklearn.metrics import davies_bouldin_score

from egsnet.ablation import ACCEPTANCE_CONFIG, BudgetExceeded, estimate_seconds, run_ablation
from egsnet.config import Config
from egsnet.datasets import generate_synthetic_suite, split_target
from egsnet.evaluator import db_index, evaluate_suite, meta_test
from egsnet.losses import alignment_penalty, emotion_loss, similarity_loss
from egsnet.metrics import RelationMetric, assign_nearest, cosine_match_scores, prototype_scores
from egsnet.model import EGSNet, encode
from egsnet.trainer import frozen_batch_stats, init_state, load_checkpoint, run_joint_stage, split_state, train

from conftest import ACCEPTANCE_LINES
from test_losses import all_gradcheck_errors
from test_metrics import _argmax_oracle, _cos_oracle, _proto_oracle

pytestmark = pytest.mark.acceptance


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_oracle_equivalence():
    t = time.perf_counter()
    g = np.random.default_rng(7)
    rel = RelationMetric(16).double()
    worst, argmax_ok = 0.0, True
    for _ in range(100):
        s = torch.from_numpy(g.normal(size=(25, 16)))
        y = torch.arange(5).repeat_interleave(5)
        q = torch.from_numpy(g.normal(size=(80, 16)))
        p, c = prototype_scores(s, y, q), cosine_match_scores(s, y, q)
        r = rel(s, y, q).detach()
        protos = torch.stack([s[y == w].mean(0) for w in range(5)])
        with torch.no_grad():
            r_oracle = np.array([[rel.comparator(torch.cat([protos[w], q[i]])).item() for w in range(5)] for i in range(80)])
        for got, want in ((p, _proto_oracle(s, y, q, 5)), (c, _cos_oracle(s, y, q, 5)), (r, r_oracle)):
            worst = max(worst, float(np.abs(got.numpy() - want).max()))
            argmax_ok &= assign_nearest(got).tolist() == [_argmax_oracle(row) for row in want]
    secs = time.perf_counter() - t
    report(1, worst < 1e-6 and argmax_ok and secs < 60,
           f"100 episodes, max |score diff| {worst:.1e}, argmax agree {argmax_ok}, {secs:.1f}s")


def test_criterion_2_gradient_correctness():
    t = time.perf_counter()
    errs = all_gradcheck_errors()
    secs = time.perf_counter() - t
    worst = max(errs.values())
    report(2, worst < 1e-4 and secs < 120, f"{len(errs)} loss checks, max relative error {worst:.1e}, {secs:.1f}s")


def test_criterion_3_loss_identities(tiny_registry, tiny_cfg):
    worst_ln = 0.0
    for n in (2, 5, 7, 12):
        logits = torch.zeros(9, n, dtype=torch.float64)
        labels = np.arange(9) % n
        worst_ln = max(worst_ln, abs(similarity_loss(logits, labels).item() - math.log(n)))
        worst_ln = max(worst_ln, abs(emotion_loss(logits, labels, range(n)).item() - math.log(n)))
    # penalty right after the split, on a partly trained model
    state = init_state(tiny_cfg, tiny_registry)
    run_joint_stage(state, tiny_registry, tiny_cfg, max_steps=4)
    split_state(state)
    x = tiny_registry.source_domains[0].images[:16]
    m = state.model
    with frozen_batch_stats(m.similarity_encoder):
        fs = encode(m.similarity_encoder, x)
    m.emotion_encoder.train()
    fe = encode(m.emotion_encoder, x)
    pen = alignment_penalty(fe, fs)
    grads = torch.autograd.grad(pen, list(m.similarity_encoder.parameters()), allow_unused=True)
    frozen_zero = all(g is None or torch.all(g == 0) for g in grads)
    ok = worst_ln < 1e-9 and pen.item() == 0.0 and frozen_zero
    report(3, ok, f"|CE - ln N| max {worst_ln:.1e}, penalty after split {pen.item()}, frozen grads zero {frozen_zero}")


def test_criterion_4_chance_level():
    cfg = Config(**ACCEPTANCE_CONFIG)
    registry = generate_synthetic_suite(cfg.synthetic())
    _, compound = split_target(registry)
    t = time.perf_counter()
    torch.manual_seed(cfg.seed)
    model = EGSNet(registry.num_canonical, channels=cfg.channels, blocks=cfg.blocks, image_side=cfg.image_side)
    rep = meta_test(model.similarity_encoder, model.metric, compound, 5, cfg.k_shot, cfg.n_query, 1000, cfg.eval_seed)
    secs = time.perf_counter() - t
    lo, hi = rep.mean_accuracy - rep.ci95_halfwidth, rep.mean_accuracy + rep.ci95_halfwidth
    report(4, lo <= 0.2 <= hi and secs < 300,
           f"untrained encoder, compound split, 1000 5-way {cfg.k_shot}-shot tasks: "
           f"{rep.mean_accuracy:.3f} [{lo:.3f}, {hi:.3f}], {secs:.1f}s")


def test_criterion_5_db_index():
    g = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        k = int(g.integers(2, 6))
        y = np.concatenate([np.arange(k), g.integers(0, k, size=int(g.integers(20, 80)))])
        x = g.normal(size=(y.size, int(g.integers(2, 10)))) + g.normal(scale=3, size=(k, 1))[y]
        worst = max(worst, abs(db_index(x, y) - davies_bouldin_score(x, y)))
    hand = db_index(np.array([[-1.0, 0], [1.0, 0], [3.0, 0], [5.0, 0]]), np.array([0, 0, 1, 1]))
    report(5, worst < 1e-9 and abs(hand - 0.5) < 1e-12, f"20 instances, max |diff| {worst:.1e}; two-cluster example {hand}")


@pytest.mark.slow
def test_criterion_6_ablation_ordering():
    budget = 60 * 60
    cfg = Config(**ACCEPTANCE_CONFIG)
    seeds = [0, 1, 2, 3, 4]
    rows = ("similarity_only", "joint", "full")
    projected = estimate_seconds(cfg, len(seeds), rows)["total"]
    cores = os.cpu_count()
    if projected > budget and os.environ.get("EGSNET_ACCEPTANCE_FULL") != "1":
        report(6, False, f"projected {projected / 60:.0f} min on {cores} core(s) exceeds the {budget // 60} min budget; "
                         "ordering not run (set EGSNET_ACCEPTANCE_FULL=1 to run it regardless)")
    enforce = None if os.environ.get("EGSNET_ACCEPTANCE_FULL") == "1" else budget
    try:
        summary = run_ablation(cfg, seeds, rows, budget_seconds=enforce)
    except BudgetExceeded as e:
        report(6, False, f"budget exceeded: {e}")
    wins = summary["full_beats_similarity_only"]
    mean = summary["mean"]
    ok = wins >= 4 and mean["full"] >= mean["joint"] and summary["seconds"] < budget
    report(6, ok, f"full > similarity-only in {wins}/5 seeds, mean full {mean['full']:.4f} vs joint {mean['joint']:.4f} "
                  f"vs similarity-only {mean['similarity_only']:.4f}, {summary['seconds'] / 60:.0f} min")


SHOT_CONFIG = dict(
    image_side=32,
    channels=32,
    blocks=4,
    epochs_joint=3,
    epochs_alternate=1,
    episodes_per_epoch=20,
    period_len=5,
    n_way=5,
    k_shot=5,
    n_query=16,
    eval_tasks=1000,
)


@pytest.mark.slow
def test_criterion_7_shot_monotonicity(tmp_path):
    cfg = Config(**SHOT_CONFIG)
    registry = generate_synthetic_suite(cfg.synthetic())
    violations, checked = [], 0
    for mode in ("full", "similarity_only", "alternate_only", "emotion_only"):
        out = tmp_path / mode
        train(cfg.replace(mode=mode), registry, out_dir=out)
        for ckpt in sorted((out / "checkpoints").glob("*.pt")):
            state, _ = load_checkpoint(ckpt)
            branch = "emotion" if mode == "emotion_only" else "similarity"
            bundle = evaluate_suite(state.model, registry, cfg, shots=[1, 5], branch=branch)
            acc = {(e["split"], e["k_shot"]): e["mean_accuracy"] for e in bundle["accuracy"]}
            for split in ("target", "basic", "compound"):
                checked += 1
                if acc[(split, 5)] < acc[(split, 1)]:
                    violations.append(f"{mode}/{ckpt.name}/{split}: {acc[(split, 5)]:.3f} < {acc[(split, 1)]:.3f}")
    report(7, not violations, f"{checked} checkpoint-split pairs, violations: {violations or 'none'}")


def test_criterion_8_determinism_and_resume(tmp_path):
    cfg = Config(**SHOT_CONFIG).replace(epochs_joint=2, episodes_per_epoch=8, checkpoint_every=1, period_len=3)
    registry = generate_synthetic_suite(cfg.synthetic())
    a = train(cfg, registry, out_dir=tmp_path / "a")
    train(cfg, registry, out_dir=tmp_path / "b")
    same = (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
    state, saved = load_checkpoint(tmp_path / "a" / "checkpoints" / "joint_epoch0001.pt")
    n = len(state.steps)
    resumed = train(saved, registry, state=state)
    want = np.array([r["loss"] for r in a.steps[n : n + 10]])
    got = np.array([r["loss"] for r in resumed.steps[n : n + 10]])
    diff = float(np.abs(want - got).max()) if got.size == want.size == 10 else math.inf
    report(8, same and diff <= 1e-6, f"history files identical {same}; resume max |loss diff| over next 10 steps {diff:.1e}")
