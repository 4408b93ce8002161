"""Two-stage training: joint multi-task learning, then alternate two-student learning.

The whole run is a single sequence of steps over a :class:`TrainState`; every
piece of mutable state (parameters, Adam moments, sampler streams, counters,
logs) lives on the state so a checkpoint taken at an epoch boundary resumes
exactly.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import __version__
from .config import Config
from .datasets import Domain, DomainRegistry
from .losses import (
    alignment_penalty,
    emotion_alternate_loss,
    emotion_loss,
    joint_loss,
    similarity_alternate_loss,
    similarity_loss,
    theta_schedule,
)
from .model import EGSNet, classify_emotion, encode, parameters_finite
from .optim import NonFiniteError, adam_step, init_moments
from .sampler import EpisodeSampler, make_batch_samplers, select_domain

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "egsnet-checkpoint"
CHECKPOINT_VERSION = 1
STEP_FIELDS = ("stage", "step", "epoch", "branch", "domain", "loss", "l_sim", "l_emo", "penalty", "theta")
HISTORY_FIELDS = ("stage", "epoch", "branch", "steps", "loss", "l_sim", "l_emo", "penalty", "theta")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    model: EGSNet
    moments: dict
    domain_rng: np.random.Generator
    episodes: EpisodeSampler
    batches: list
    stage: str = "joint"
    step: int = 0
    completed: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    history: list = field(default_factory=list)
    timing: list = field(default_factory=list)

    @property
    def stage_tag(self) -> str:
        return self.completed[-1] if self.completed else "init"


def model_arch(cfg: Config, registry: DomainRegistry) -> dict:
    return dict(
        num_classes=registry.num_canonical,
        metric=cfg.metric,
        backbone=cfg.backbone,
        channels=cfg.channels,
        blocks=cfg.blocks,
        image_side=registry.target_domain.image_shape[0],
        in_channels=registry.target_domain.image_shape[2],
    )


def init_state(cfg: Config, registry: DomainRegistry) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = EGSNet(**model_arch(cfg, registry))
    moments = {name: init_moments(p) for name, p in model.all_parameters().items()}
    return TrainState(
        model=model,
        moments=moments,
        domain_rng=np.random.default_rng([cfg.seed, 1]),
        episodes=EpisodeSampler(cfg.n_way, cfg.k_shot, cfg.n_query, [cfg.seed, 2]),
        batches=make_batch_samplers(registry.source_domains, cfg.batch_size, cfg.seed),
    )


def split_state(state: TrainState) -> TrainState:
    """Split the shared encoder; the similarity copy inherits the joint Adam moments."""
    if not state.model.shared:
        return state
    state.model.split()
    for name in list(state.moments):
        if name.startswith("emotion_encoder."):
            state.moments["split_encoder." + name[len("emotion_encoder."):]] = copy.deepcopy(state.moments[name])
    return state


@contextlib.contextmanager
def frozen_batch_stats(module: torch.nn.Module):
    """Run ``module`` in train mode without gradients and without touching its buffers.

    The frozen branch thereby sees the same batch-statistics normalization as
    the active one while staying bit-identical.
    """
    saved = {k: v.clone() for k, v in module.named_buffers()}
    was_training = module.training
    module.train()
    try:
        with torch.no_grad():
            yield module
    finally:
        with torch.no_grad():
            for k, v in module.named_buffers():
                v.copy_(saved[k])
        module.train(was_training)


def _episode_scores(model: EGSNet, encoder, episode, n_way: int):
    images = np.concatenate([episode.support_images, episode.query_images])
    feats = encode(encoder, images)
    ns = episode.support_images.shape[0]
    scores = model.metric(feats[:ns], episode.support_labels, feats[ns:], n_way)
    return scores, feats, images


def _emotion_terms(model: EGSNet, encoder, domain: Domain, batch):
    feats = encode(encoder, batch.images)
    logits = classify_emotion(model.classifier, feats)
    return emotion_loss(logits, domain.canonical[batch.labels], domain.present_canonical()), feats


def _apply(state: TrainState, params: dict, loss: torch.Tensor, cfg: Config):
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    grads = [torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)]
    adam_step(
        [params[n] for n in names],
        grads,
        [state.moments[n] for n in names],
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
    )


def joint_step(state: TrainState, registry: DomainRegistry, cfg: Config, use_sim=True, use_emo=True) -> dict:
    """One joint-stage update on a randomly selected source domain."""
    model = state.model
    d = select_domain(registry, state.domain_rng)
    domain = registry.source_domains[d]
    model.train()
    rec = {"domain": domain.id, "l_sim": 0.0, "l_emo": 0.0, "penalty": 0.0, "theta": 0.0}
    params = {}
    l_sim = l_emo = None
    if use_sim:
        episode = state.episodes.sample(domain)
        scores, _, _ = _episode_scores(model, model.similarity_encoder, episode, cfg.n_way)
        l_sim = similarity_loss(scores, episode.query_labels)
        params.update(model.similarity_parameters())
        rec["l_sim"] = l_sim.item()
    if use_emo:
        batch = state.batches[d].sample(domain)
        l_emo, _ = _emotion_terms(model, model.emotion_encoder, domain, batch)
        params.update(model.emotion_parameters())
        rec["l_emo"] = l_emo.item()
    if l_sim is not None and l_emo is not None:
        loss = joint_loss(l_sim, l_emo, cfg.loss())
    else:
        loss = l_sim if l_sim is not None else l_emo
    _apply(state, params, loss, cfg)
    rec["loss"] = loss.item()
    rec["branch"] = "both" if (use_sim and use_emo) else ("similarity" if use_sim else "emotion")
    return rec


def period_steps(cfg: Config) -> int:
    return cfg.period_len * (cfg.episodes_per_epoch if cfg.period_unit == "epochs" else 1)


def active_branch(step: int, cfg: Config) -> str:
    """Alternate-stage role at ``step``; the emotion branch goes first."""
    return "emotion" if (step // period_steps(cfg)) % 2 == 0 else "similarity"


def alternate_counter(step: int, cfg: Config) -> int:
    return step if cfg.theta_counter == "global" else step % period_steps(cfg)


def alternate_step(state: TrainState, registry: DomainRegistry, cfg: Config) -> dict:
    """One alternate-stage update of the active branch against the frozen other one."""
    model = state.model
    if model.shared:
        raise TrainingError("alternate stage needs split encoders")
    branch = active_branch(state.step, cfg)
    theta = theta_schedule(alternate_counter(state.step, cfg), cfg.loss())
    d = select_domain(registry, state.domain_rng)
    domain = registry.source_domains[d]
    episode = state.episodes.sample(domain)
    rec = {"domain": domain.id, "branch": branch, "theta": theta, "l_sim": 0.0, "l_emo": 0.0}
    if branch == "emotion":
        batch = state.batches[d].sample(domain)
        model.emotion_encoder.train()
        model.classifier.train()
        with frozen_batch_stats(model.similarity_encoder) as enc_s:
            f_s = encode(enc_s, batch.images)
        l_emo, f_e = _emotion_terms(model, model.emotion_encoder, domain, batch)
        penalty = alignment_penalty(f_e, f_s)
        loss = emotion_alternate_loss(l_emo, penalty, theta)
        params = model.emotion_parameters()
        if cfg.train_metric_in_emotion:
            params.update({f"metric.{n}": p for n, p in model.metric.named_parameters()})
        rec["l_emo"] = l_emo.item()
    else:
        model.similarity_encoder.train()
        model.metric.train()
        scores, f_s, images = _episode_scores(model, model.similarity_encoder, episode, cfg.n_way)
        with frozen_batch_stats(model.emotion_encoder) as enc_e:
            f_e = encode(enc_e, images)
        l_sim = similarity_loss(scores, episode.query_labels)
        penalty = alignment_penalty(f_s, f_e)
        loss = similarity_alternate_loss(l_sim, penalty, theta)
        params = model.similarity_parameters()
        if cfg.train_classifier_in_similarity:
            params.update({f"classifier.{n}": p for n, p in model.classifier.named_parameters()})
        rec["l_sim"] = l_sim.item()
    _apply(state, params, loss, cfg)
    rec["penalty"] = penalty.item()
    rec["loss"] = loss.item()
    return rec


def _close_epoch(state: TrainState, cfg: Config, started: float):
    stage = state.stage
    epoch = state.step // cfg.episodes_per_epoch
    recs = [r for r in state.steps if r["stage"] == stage and r["epoch"] == epoch - 1]
    for branch in dict.fromkeys(r["branch"] for r in recs):
        rows = [r for r in recs if r["branch"] == branch]
        state.history.append(
            {
                "stage": stage,
                "epoch": epoch,
                "branch": branch,
                "steps": len(rows),
                **{k: float(np.mean([r[k] for r in rows])) for k in ("loss", "l_sim", "l_emo", "penalty", "theta")},
            }
        )
    state.timing.append({"stage": stage, "epoch": epoch, "seconds": time.perf_counter() - started})


def _run_stage(
    state: TrainState,
    registry: DomainRegistry,
    cfg: Config,
    stage: str,
    epochs: int,
    step_fn: Callable[[], dict],
    on_epoch: Optional[Callable[[TrainState], None]] = None,
    max_steps: Optional[int] = None,
) -> TrainState:
    # near-zero losses push Adam's second moments into denormals, which are many times slower on CPU
    torch.set_flush_denormal(True)
    if state.stage != stage:
        state.stage, state.step = stage, 0
    total = epochs * cfg.episodes_per_epoch
    started = time.perf_counter()
    done = 0
    while state.step < total:
        if max_steps is not None and done >= max_steps:
            return state
        try:
            rec = step_fn()
        except NonFiniteError as e:
            raise TrainingError(f"{stage} step {state.step}: {e}") from e
        if not parameters_finite(state.model):
            raise TrainingError(f"{stage} step {state.step}: non-finite parameters")
        rec.update(stage=stage, step=state.step, epoch=state.step // cfg.episodes_per_epoch)
        state.steps.append({k: rec[k] for k in STEP_FIELDS})
        state.step += 1
        done += 1
        if state.step % cfg.episodes_per_epoch == 0:
            _close_epoch(state, cfg, started)
            started = time.perf_counter()
            log.info("%s epoch %d: %s", stage, state.step // cfg.episodes_per_epoch, state.history[-1])
            if on_epoch is not None:
                on_epoch(state)
    if stage not in state.completed:
        state.completed.append(stage)
    return state


def run_joint_stage(state, registry, cfg: Config, on_epoch=None, max_steps=None, use_sim=True, use_emo=None):
    """Stage 1 on a shared encoder. ``use_emo`` defaults to ``lambda_emo > 0``."""
    if not state.model.shared:
        raise TrainingError("joint stage needs the shared encoder")
    if use_emo is None:
        use_emo = cfg.lambda_emo > 0
    return _run_stage(
        state, registry, cfg, "joint", cfg.epochs_joint,
        lambda: joint_step(state, registry, cfg, use_sim, use_emo), on_epoch, max_steps,
    )


def run_alternate_stage(state, registry, cfg: Config, on_epoch=None, max_steps=None):
    """Stage 2; splits the shared encoder on entry."""
    split_state(state)
    return _run_stage(
        state, registry, cfg, "alternate", cfg.epochs_alternate,
        lambda: alternate_step(state, registry, cfg), on_epoch, max_steps,
    )


def stage_plan(mode: str) -> list[str]:
    return {
        "full": ["joint", "alternate"],
        "joint_only": ["joint"],
        "alternate_only": ["alternate"],
        "emotion_only": ["joint"],
        "similarity_only": ["joint"],
    }[mode]


def train(
    cfg: Config,
    registry: DomainRegistry,
    out_dir=None,
    state: Optional[TrainState] = None,
    max_steps: Optional[int] = None,
) -> TrainState:
    """Run the stages of ``cfg.mode``, resuming ``state`` if given.

    With ``out_dir`` set, checkpoints are written every ``checkpoint_every``
    epochs and at every stage boundary, and logs are rewritten after each.
    """
    state = state or init_state(cfg, registry)
    out = Path(out_dir) if out_dir else None
    ckpt_dir = out / "checkpoints" if out else None

    def persist(s: TrainState, name: str):
        if out is None:
            return
        save_checkpoint(s, cfg, ckpt_dir / f"{name}.pt")
        write_logs(s, out)

    def on_epoch(s: TrainState):
        e = s.step // cfg.episodes_per_epoch
        if cfg.checkpoint_every and e % cfg.checkpoint_every == 0:
            persist(s, f"{s.stage}_epoch{e:04d}")

    start = len(state.steps)
    for stage in stage_plan(cfg.mode):
        if stage in state.completed:
            continue
        left = None if max_steps is None else max_steps - (len(state.steps) - start)
        try:
            if stage == "joint":
                use_sim = cfg.mode != "emotion_only"
                use_emo = cfg.mode != "similarity_only" and cfg.lambda_emo > 0
                run_joint_stage(state, registry, cfg, on_epoch, left, use_sim=use_sim, use_emo=use_emo)
            else:
                run_alternate_stage(state, registry, cfg, on_epoch, left)
        except TrainingError:
            persist(state, "diagnostic")
            raise
        if stage not in state.completed:
            return state  # step budget exhausted mid-stage
        persist(state, f"{stage}_final")
    persist(state, "final")
    return state


# ---------------------------------------------------------------------------
# persistence


def _sampler_state(state: TrainState) -> dict:
    return {
        "domain_rng": state.domain_rng.bit_generator.state,
        "episodes": {
            "rng": state.episodes.rng.bit_generator.state,
            "n_way": state.episodes.n_way,
            "k_shot": state.episodes.k_shot,
            "n_query": state.episodes.n_query,
        },
        "batches": [
            {
                "rng": b.rng.bit_generator.state,
                "order": b.order.copy(),
                "cursor": b.cursor,
                "epoch": b.epoch,
                "domain_id": b.domain_id,
                "size": b.size,
                "batch_size": b.batch_size,
            }
            for b in state.batches
        ],
    }


def _restore_samplers(payload: dict, registry: Optional[DomainRegistry], cfg: Config):
    domain_rng = np.random.default_rng()
    domain_rng.bit_generator.state = payload["domain_rng"]
    ep = payload["episodes"]
    episodes = EpisodeSampler(ep["n_way"], ep["k_shot"], ep["n_query"], 0)
    episodes.rng.bit_generator.state = ep["rng"]
    batches = []
    from .sampler import BatchSampler

    for b in payload["batches"]:
        s = BatchSampler.__new__(BatchSampler)
        s.domain_id, s.size, s.batch_size = b["domain_id"], b["size"], b["batch_size"]
        s.rng = np.random.default_rng()
        s.rng.bit_generator.state = b["rng"]
        s.order, s.cursor, s.epoch = np.asarray(b["order"]), b["cursor"], b["epoch"]
        batches.append(s)
    return domain_rng, episodes, batches


def save_checkpoint(state: TrainState, cfg: Config, path) -> Path:
    """Write ``path`` (torch container) and ``path.json`` (scalar sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "arch": state.model.arch,
        "shared": state.model.shared,
        "stage": state.stage,
        "stage_tag": state.stage_tag,
        "completed": list(state.completed),
        "step": state.step,
        "model": {k: v.detach().clone() for k, v in state.model.state_dict().items()},
        "moments": {k: {"m": v["m"].clone(), "v": v["v"].clone(), "t": v["t"]} for k, v in state.moments.items()},
        "samplers": _sampler_state(state),
        "torch_rng": torch.get_rng_state(),
        "steps": list(state.steps),
        "history": list(state.history),
        "timing": list(state.timing),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": state.stage,
        "stage_tag": state.stage_tag,
        "completed": list(state.completed),
        "step": state.step,
        "epoch": state.step // cfg.episodes_per_epoch,
        "shared": state.model.shared,
        "embedding_dim": state.model.dim,
        "metric": cfg.metric,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "config_hash": cfg.content_hash(),
        "last_loss": state.steps[-1]["loss"] if state.steps else None,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return path


def load_checkpoint(path, registry: Optional[DomainRegistry] = None) -> tuple[TrainState, Config]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    cfg = Config(**payload["config"])
    model = EGSNet(**payload["arch"])
    if not payload["shared"]:
        model.split()
    model.load_state_dict(payload["model"])
    domain_rng, episodes, batches = _restore_samplers(payload["samplers"], registry, cfg)
    state = TrainState(
        model=model,
        moments={k: dict(v) for k, v in payload["moments"].items()},
        domain_rng=domain_rng,
        episodes=episodes,
        batches=batches,
        stage=payload["stage"],
        step=payload["step"],
        completed=list(payload["completed"]),
        steps=list(payload["steps"]),
        history=list(payload["history"]),
        timing=list(payload["timing"]),
    )
    torch.set_rng_state(payload["torch_rng"])
    return state, cfg


def write_csv(rows: list, fields, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_logs(state: TrainState, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "history": out / "history.csv",
        "steps": out / "steps.csv",
        "timing": out / "timing.csv",
    }
    write_csv(state.history, HISTORY_FIELDS, paths["history"])
    write_csv(state.steps, STEP_FIELDS, paths["steps"])
    write_csv(state.timing, ("stage", "epoch", "seconds"), paths["timing"])
    return paths
