"""Ablation protocol: similarity-only baseline vs joint-only vs the full two-stage model.

One full run yields two rows: the joint-stage checkpoint is the joint-only
model and the final checkpoint is the full model. The similarity-only and
alternate-only rows are separate runs. All rows are scored on the compound
subset of the target domain.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .datasets import generate_synthetic_suite, split_target
from .evaluator import meta_test
from .trainer import alternate_step, init_state, joint_step, run_alternate_stage, run_joint_stage, split_state, train

log = logging.getLogger(__name__)

ROWS = ("similarity_only", "joint", "alternate_only", "full")


@dataclass
class SeedResult:
    seed: int
    accuracy: dict = field(default_factory=dict)
    seconds: float = 0.0


def _score(model, domain, cfg: Config, k_shot: int) -> float:
    enc = model.similarity_encoder
    rep = meta_test(enc, model.metric, domain, cfg.n_way, k_shot, cfg.eval_query, cfg.eval_tasks, cfg.eval_seed)
    return rep.mean_accuracy


def run_seed(base: Config, seed: int, rows=ROWS, k_shot: int = 5) -> SeedResult:
    cfg = base.replace(seed=seed, data_seed=seed)
    registry = generate_synthetic_suite(cfg.synthetic())
    _, compound = split_target(registry)
    out = SeedResult(seed)
    started = time.perf_counter()
    if "similarity_only" in rows:
        s = train(cfg.replace(mode="similarity_only"), registry)
        out.accuracy["similarity_only"] = _score(s.model, compound, cfg, k_shot)
    if "joint" in rows or "full" in rows:
        full_cfg = cfg.replace(mode="full")
        state = init_state(full_cfg, registry)
        run_joint_stage(state, registry, full_cfg)
        out.accuracy["joint"] = _score(state.model, compound, cfg, k_shot)
        if "full" in rows:
            run_alternate_stage(state, registry, full_cfg)
            out.accuracy["full"] = _score(state.model, compound, cfg, k_shot)
    if "alternate_only" in rows:
        s = train(cfg.replace(mode="alternate_only"), registry)
        out.accuracy["alternate_only"] = _score(s.model, compound, cfg, k_shot)
    out.seconds = time.perf_counter() - started
    log.info("seed %d: %s (%.0fs)", seed, out.accuracy, out.seconds)
    return out


def summarize(results: list[SeedResult]) -> dict:
    rows = list(results[0].accuracy)
    mean = {r: float(np.mean([x.accuracy[r] for x in results])) for r in rows}
    wins = sum(x.accuracy["full"] > x.accuracy["similarity_only"] for x in results) if {"full", "similarity_only"} <= set(rows) else None
    return {
        "seeds": [x.seed for x in results],
        "per_seed": [x.accuracy for x in results],
        "mean": mean,
        "full_beats_similarity_only": wins,
        "seconds": float(sum(x.seconds for x in results)),
    }


class BudgetExceeded(RuntimeError):
    def __init__(self, message: str, partial: list):
        super().__init__(message)
        self.partial = partial


def run_ablation(base: Config, seeds, rows=ROWS, budget_seconds=None) -> dict:
    """Run every seed; with a budget, stop once the elapsed time passes it."""
    started = time.perf_counter()
    results = []
    for s in seeds:
        results.append(run_seed(base, s, rows))
        elapsed = time.perf_counter() - started
        if budget_seconds is not None and elapsed > budget_seconds and len(results) < len(seeds):
            raise BudgetExceeded(f"{elapsed:.0f}s spent after {len(results)} of {len(seeds)} seeds", results)
    return summarize(results)


def _time_steps(fn, n: int) -> float:
    fn()  # warm-up
    t = time.perf_counter()
    for _ in range(n):
        fn()
    return (time.perf_counter() - t) / n


def estimate_seconds(base: Config, num_seeds: int, rows=ROWS, probe: int = 3) -> dict:
    """Project the ablation's wall time from a few timed steps of each kind."""
    cfg = base.replace(seed=0, data_seed=0)
    registry = generate_synthetic_suite(cfg.synthetic())
    state = init_state(cfg, registry)
    per = {
        "similarity": _time_steps(lambda: joint_step(state, registry, cfg, True, False), probe),
        "both": _time_steps(lambda: joint_step(state, registry, cfg, True, True), probe),
    }
    split_state(state)
    state.stage = "alternate"

    def alt():
        alternate_step(state, registry, cfg)
        state.step += 1

    per["alternate"] = _time_steps(alt, probe)
    joint, alt_steps = cfg.epochs_joint * cfg.episodes_per_epoch, cfg.epochs_alternate * cfg.episodes_per_epoch
    seed_seconds = 0.0
    if "similarity_only" in rows:
        seed_seconds += joint * per["similarity"]
    if "joint" in rows or "full" in rows:
        seed_seconds += joint * per["both"]
    if "full" in rows:
        seed_seconds += alt_steps * per["alternate"]
    if "alternate_only" in rows:
        seed_seconds += alt_steps * per["alternate"]
    return {"per_step": per, "per_seed": seed_seconds, "total": seed_seconds * num_seeds}


ACCEPTANCE_CONFIG = dict(
    image_side=84,
    num_basic_classes=7,
    num_compound_classes=12,
    num_source_domains=3,
    backbone="conv4",
    blocks=4,
    channels=64,
    epochs_joint=30,
    epochs_alternate=2,
    episodes_per_epoch=50,
    n_way=5,
    k_shot=5,
    n_query=16,
)


if __name__ == "__main__":
    import argparse

    from .config import parse_set

    p = argparse.ArgumentParser(description="run the ablation protocol on the synthetic suite")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--rows", default=",".join(ROWS))
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = Config(**ACCEPTANCE_CONFIG).replace(**parse_set(a.set))
    summary = run_ablation(base, [int(s) for s in a.seeds.split(",")], a.rows.split(","))
    summary["config"] = base.to_dict()
    text = json.dumps(summary, indent=2)
    print(text)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)
