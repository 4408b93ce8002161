"""Meta-test protocol, nearest-centroid evaluation, Davies-Bouldin index and report bundles."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from .datasets import Domain, DomainRegistry, split_target
from .metrics import PrototypeMetric, assign_nearest
from .model import EGSNet, encode
from .sampler import episode_indices

REPORT_SCHEMA_ID = "egsnet-report"
REPORT_VERSION = 1
SPLITS = ("target", "basic", "compound")


class EvaluationError(ValueError):
    def __init__(self, message: str, split: Optional[str] = None):
        super().__init__(message)
        self.split = split


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    num_tasks: int
    per_task_accuracies: list
    n_way: int
    k_shot: int
    n_query: int
    split: str = ""
    metric: str = ""
    db_index: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def ci95(accuracies) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(1.96 * acc.std() / math.sqrt(acc.size))


@torch.no_grad()
def embed_domain(encoder, domain: Domain, chunk: int = 256) -> torch.Tensor:
    """Inference-mode embeddings of every image in ``domain``."""
    was_training = encoder.training
    encoder.eval()
    try:
        parts = [encode(encoder, domain.images[i : i + chunk]) for i in range(0, len(domain), chunk)]
    finally:
        encoder.train(was_training)
    if not parts:
        return torch.zeros((0, encoder.dim))
    return torch.cat(parts)


@torch.no_grad()
def meta_test(
    encoder,
    metric,
    domain: Domain,
    n_way: int,
    k_shot: int,
    n_query: int,
    num_tasks: int,
    seed: int,
    features: Optional[torch.Tensor] = None,
    split: str = "",
) -> EvalReport:
    """Mean accuracy over ``num_tasks`` episodes; task ``t`` is drawn with seed ``seed + t``."""
    if features is None:
        features = embed_domain(encoder, domain)
    metric_mode = metric.training
    metric.eval()
    accs = np.empty(num_tasks)
    support_labels = torch.arange(n_way).repeat_interleave(k_shot)
    query_labels = np.repeat(np.arange(n_way), n_query)
    try:
        for t in range(num_tasks):
            rng = np.random.default_rng(seed + t)
            _, s_idx, q_idx = episode_indices(domain.labels, n_way, k_shot, n_query, rng)
            scores = metric(features[s_idx.reshape(-1)], support_labels, features[q_idx.reshape(-1)], n_way)
            accs[t] = np.mean(assign_nearest(scores) == query_labels)
    finally:
        metric.train(metric_mode)
    return EvalReport(
        mean_accuracy=float(accs.mean()),
        ci95_halfwidth=ci95(accs),
        num_tasks=num_tasks,
        per_task_accuracies=accs.tolist(),
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        split=split,
        metric=getattr(metric, "variant", type(metric).__name__),
    )


def nearest_centroid_eval(encoder, domain, n_way, k_shot, n_query, num_tasks, seed, features=None, split="") -> EvalReport:
    """Meta-test with the Euclidean prototype metric forced (for emotion-branch encoders)."""
    return meta_test(encoder, PrototypeMetric(), domain, n_way, k_shot, n_query, num_tasks, seed, features, split)


def db_index(features, labels) -> float:
    """Davies-Bouldin index of labeled features; lower means tighter, better separated classes."""
    x = np.asarray(features.detach().cpu() if isinstance(features, torch.Tensor) else features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise EvaluationError("DB index needs at least two classes")
    centroids = np.stack([x[y == c].mean(axis=0) for c in classes])
    scatter = np.array([np.linalg.norm(x[y == c] - centroids[i], axis=1).mean() for i, c in enumerate(classes)])
    dist = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=-1)
    off = ~np.eye(classes.size, dtype=bool)
    if np.any(dist[off] == 0):
        raise EvaluationError("degenerate clusters: coincident class centroids")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, dist, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


def resolve_splits(registry: DomainRegistry, names) -> dict:
    basic = compound = None
    out = {}
    for name in names:
        if name == "target":
            out[name] = registry.target_domain
            continue
        if name not in ("basic", "compound"):
            raise EvaluationError(f"unknown split {name!r}; expected one of {SPLITS}", name)
        if basic is None:
            try:
                basic, compound = split_target(registry)
            except ValueError as e:
                raise EvaluationError(f"split {name!r} unavailable: {e}", name) from e
        out[name] = basic if name == "basic" else compound
    return out


def evaluate_suite(
    model: EGSNet,
    registry: DomainRegistry,
    cfg,
    splits=None,
    shots=None,
    branch: Optional[str] = None,
    extra: Optional[dict] = None,
) -> dict:
    """Meta-test every split x shot combination and DB-index the basic/compound subsets."""
    splits = list(splits or cfg.splits)
    shots = list(shots or cfg.shots)
    branch = branch or cfg.eval_branch
    encoder = model.similarity_encoder if branch == "similarity" else model.emotion_encoder
    metric = model.metric if branch == "similarity" else PrototypeMetric()
    domains = resolve_splits(registry, splits)
    entries, dbs = [], []
    for name, domain in domains.items():
        counts = domain.class_counts()
        eligible = int(np.sum(counts >= max(shots) + cfg.eval_query))
        if eligible < cfg.n_way:
            raise EvaluationError(
                f"split {name!r} has {eligible} classes with >= {max(shots) + cfg.eval_query} samples; "
                f"{cfg.n_way}-way evaluation impossible",
                name,
            )
        feats = embed_domain(encoder, domain)
        for k in shots:
            rep = meta_test(encoder, metric, domain, cfg.n_way, k, cfg.eval_query, cfg.eval_tasks,
                            cfg.eval_seed, feats, split=name)
            entries.append(rep.to_dict())
        if name in ("basic", "compound"):
            idx = np.arange(len(domain))
            if cfg.db_max_samples and idx.size > cfg.db_max_samples:
                idx = np.random.default_rng(cfg.eval_seed).choice(idx, cfg.db_max_samples, replace=False)
                idx.sort()
            dbs.append({"split": name, "value": db_index(feats[idx], domain.labels[idx]), "num_samples": int(idx.size)})
    return {
        "schema": REPORT_SCHEMA_ID,
        "version": REPORT_VERSION,
        "branch": branch,
        "metric": getattr(metric, "variant", ""),
        "n_way": cfg.n_way,
        "n_query": cfg.eval_query,
        "num_tasks": cfg.eval_tasks,
        "eval_seed": cfg.eval_seed,
        "splits": splits,
        "shots": shots,
        "accuracy": entries,
        "db_index": dbs,
        "meta": extra or {},
    }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "version", "branch", "metric", "n_way", "splits", "shots", "accuracy", "db_index"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "version": {"type": "integer", "minimum": 1},
        "branch": {"enum": ["similarity", "emotion"]},
        "metric": {"type": "string"},
        "n_way": {"type": "integer", "minimum": 1},
        "n_query": {"type": "integer", "minimum": 1},
        "num_tasks": {"type": "integer", "minimum": 1},
        "splits": {"type": "array", "items": {"enum": list(SPLITS)}},
        "shots": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "accuracy": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["split", "k_shot", "mean_accuracy", "ci95_halfwidth", "num_tasks", "per_task_accuracies"],
                "properties": {
                    "split": {"enum": list(SPLITS)},
                    "k_shot": {"type": "integer", "minimum": 1},
                    "mean_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "ci95_halfwidth": {"type": "number", "minimum": 0},
                    "num_tasks": {"type": "integer", "minimum": 1},
                    "per_task_accuracies": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
        "db_index": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["split", "value"],
                "properties": {"split": {"enum": ["basic", "compound"]}, "value": {"type": "number", "minimum": 0}},
            },
        },
        "meta": {"type": "object"},
    },
}


def validate_report(bundle: dict) -> dict:
    jsonschema.validate(bundle, REPORT_SCHEMA)
    return bundle


def write_bundle(bundle: dict, out_dir) -> dict:
    """Write ``report.json``, ``report.csv`` (accuracy rows) and ``report_db.csv``."""
    validate_report(bundle)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "db_csv": out / "report_db.csv"}
    with open(paths["json"], "w") as fh:
        json.dump(bundle, fh, indent=2)
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "k_shot", "n_way", "mean_accuracy", "ci95_halfwidth", "num_tasks"])
        for e in bundle["accuracy"]:
            w.writerow([e["split"], e["k_shot"], e["n_way"], repr(e["mean_accuracy"]), repr(e["ci95_halfwidth"]), e["num_tasks"]])
    with open(paths["db_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "db_index", "num_samples"])
        for d in bundle["db_index"]:
            w.writerow([d["split"], repr(d["value"]), d.get("num_samples", "")])
    return paths


def read_bundle(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    with open(p) as fh:
        return validate_report(json.load(fh))


def compare_bundles(bundles: dict) -> list[dict]:
    """Rows of ``mean ± ci`` per split/shot, one per named bundle."""
    if len(bundles) < 2:
        raise EvaluationError("comparison needs at least two report bundles")
    keysets = {name: {(e["split"], e["k_shot"]) for e in b["accuracy"]} for name, b in bundles.items()}
    first_name, first = next(iter(keysets.items()))
    for name, keys in keysets.items():
        if keys != first:
            raise EvaluationError(
                f"bundle {name!r} covers {sorted(keys)} but {first_name!r} covers {sorted(first)}"
            )
    cols = sorted(first, key=lambda sk: (SPLITS.index(sk[0]), -sk[1]))
    rows = []
    for name, b in bundles.items():
        by_key = {(e["split"], e["k_shot"]): e for e in b["accuracy"]}
        row = {"run": name}
        for split, k in cols:
            e = by_key[(split, k)]
            row[f"{split}_{k}shot_mean"] = e["mean_accuracy"]
            row[f"{split}_{k}shot_ci95"] = e["ci95_halfwidth"]
        for d in b["db_index"]:
            row[f"{d['split']}_db_index"] = d["value"]
        rows.append(row)
    return rows
