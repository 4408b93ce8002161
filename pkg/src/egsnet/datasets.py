"""Image domains, the synthetic basic/compound benchmark, and target splits.

A :class:`Domain` is an immutable labeled image pool (``M x H x W x C`` float32
in ``[0, 1]``). Source domains only hold basic classes; the target domain
holds basic and compound classes and is split for evaluation.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
REGISTRY_FILE = "registry.json"
REGISTRY_FORMAT = "egsnet-registry"
REGISTRY_VERSION = 1

BASIC_EXPRESSIONS = ("happiness", "sadness", "disgust", "anger", "fear", "surprise", "neutral")


class DatasetError(ValueError):
    """Raised for malformed domains, registries or image folders."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Domain:
    """Labeled image pool with contiguous labels ``0..num_classes-1``.

    ``canonical`` maps each native label to an index of the registry-wide
    basic label space (``-1`` for classes outside it, e.g. compound classes).
    ``origin_labels`` records, for re-indexed subsets, the label each class
    had in the domain it was split from.
    """

    id: str
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    canonical: Optional[np.ndarray] = None
    origin_labels: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"domain {self.id!r}: images must be M x H x W x C, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DatasetError(f"domain {self.id!r}: {labels.shape[0]} labels for {images.shape[0]} images")
        c = len(self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise DatasetError(f"domain {self.id!r}: label outside [0, {c})")
        counts = np.bincount(labels, minlength=c)
        for name, n in zip(self.class_names, counts):
            if n == 0:
                raise DatasetError(f"domain {self.id!r}: empty class {name!r}")
        canonical = self.canonical
        if canonical is None:
            canonical = np.arange(c, dtype=np.int64)
        canonical = np.asarray(canonical, dtype=np.int64)
        if canonical.shape != (c,):
            raise DatasetError(f"domain {self.id!r}: canonical map must have {c} entries")
        object.__setattr__(self, "images", _freeze(images))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "canonical", _freeze(canonical))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def present_canonical(self) -> np.ndarray:
        """Canonical basic-class indices present in this domain."""
        return np.unique(self.canonical[self.canonical >= 0])


@dataclass(frozen=True, eq=False)
class DomainRegistry:
    source_domains: tuple[Domain, ...]
    target_domain: Domain
    target_basic_labels: frozenset
    target_compound_labels: frozenset
    canonical_classes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "source_domains", tuple(self.source_domains))
        object.__setattr__(self, "target_basic_labels", frozenset(int(x) for x in self.target_basic_labels))
        object.__setattr__(self, "target_compound_labels", frozenset(int(x) for x in self.target_compound_labels))
        if not self.canonical_classes:
            names = sorted({n for d in self.source_domains for n in d.class_names})
            object.__setattr__(self, "canonical_classes", tuple(names))
        else:
            object.__setattr__(self, "canonical_classes", tuple(self.canonical_classes))
        self.validate()

    def validate(self):
        if not self.source_domains:
            raise DatasetError("registry needs at least one source domain")
        basic, compound = self.target_basic_labels, self.target_compound_labels
        if basic & compound:
            raise DatasetError(f"basic and compound label sets overlap: {sorted(basic & compound)}")
        all_labels = set(range(self.target_domain.num_classes))
        if basic | compound != all_labels:
            raise DatasetError("basic and compound label sets must cover the target labels exactly")
        shape = self.target_domain.image_shape
        for d in self.source_domains:
            if d.image_shape != shape:
                raise DatasetError(f"domain {d.id!r} has image shape {d.image_shape}, target has {shape}")

    @property
    def num_canonical(self) -> int:
        return len(self.canonical_classes)

    def domain(self, domain_id: str) -> Domain:
        for d in (*self.source_domains, self.target_domain):
            if d.id == domain_id:
                return d
        raise KeyError(domain_id)


@dataclass(frozen=True)
class SyntheticConfig:
    num_basic_classes: int = 7
    num_compound_classes: int = 12
    image_side: int = 84
    samples_per_class: int = 40
    domain_shift_strength: float = 0.3
    noise_std: float = 0.6
    seed: int = 0
    num_source_domains: int = 3

    def validate(self):
        b = self.num_basic_classes
        if b < 2:
            raise DatasetError("num_basic_classes must be >= 2")
        if self.num_compound_classes < 0:
            raise DatasetError("num_compound_classes must be >= 0")
        if self.num_compound_classes > b * (b - 1) // 2:
            raise DatasetError(
                f"num_compound_classes={self.num_compound_classes} exceeds the {b * (b - 1) // 2} "
                f"available pairs of {b} basic classes"
            )
        if self.image_side < 2 or self.samples_per_class < 1 or self.num_source_domains < 1:
            raise DatasetError("image_side >= 2, samples_per_class >= 1 and num_source_domains >= 1 required")
        if self.domain_shift_strength < 0 or self.noise_std < 0:
            raise DatasetError("domain_shift_strength and noise_std must be non-negative")


# ---------------------------------------------------------------------------
# image folders


def _read_image(path: Path, side: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"cannot decode image {path}: {e}") from e


def _is_image(p: Path) -> bool:
    return p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES


def load_image_folder(
    path,
    manifest=None,
    side: int = 84,
    domain_id: Optional[str] = None,
    class_names: Optional[Sequence[str]] = None,
) -> Domain:
    """Load ``<class_name>/<image>`` folders, or ``relative_path,label`` manifest rows.

    Folder mode orders classes by sorted name. In manifest mode labels are
    taken verbatim; ``class_names`` defaults to the sorted sub-directories of
    ``path`` (or ``class_<i>`` when there are none).
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    domain_id = domain_id or root.name
    if manifest is None:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
        if class_names is not None:
            names = list(class_names)
        if not names:
            raise DatasetError(f"no class folders under {root}")
        images, labels = [], []
        for label, name in enumerate(names):
            files = sorted(p for p in (root / name).iterdir() if _is_image(p)) if (root / name).is_dir() else []
            if not files:
                raise DatasetError(f"empty class {name!r} in {root}")
            for f in files:
                images.append(_read_image(f, side))
                labels.append(label)
        return Domain(domain_id, np.stack(images), np.asarray(labels), tuple(names))

    rows = []
    with open(manifest, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DatasetError(f"{manifest}:{lineno}: expected 'relative_path,label'")
            rel, lab = row[0].strip(), row[1].strip()
            try:
                label = int(lab)
            except ValueError:
                if lineno == 1:  # header
                    continue
                raise DatasetError(f"{manifest}:{lineno}: label {lab!r} is not an integer") from None
            rows.append((rel, label))
    if not rows:
        raise DatasetError(f"manifest {manifest} lists no images")
    if class_names is None:
        subdirs = sorted(p.name for p in root.iterdir() if p.is_dir())
        n = max(l for _, l in rows) + 1
        class_names = subdirs if len(subdirs) >= n else [f"class_{i}" for i in range(n)]
    names = list(class_names)
    for rel, label in rows:
        if not 0 <= label < len(names):
            raise DatasetError(f"manifest label {label} for {rel!r} outside [0, {len(names)})")
    images = np.stack([_read_image(root / rel, side) for rel, _ in rows])
    return Domain(domain_id, images, np.asarray([l for _, l in rows]), tuple(names))


def with_canonical(domain: Domain, canonical_classes: Sequence[str], strict: bool = True) -> Domain:
    """Attach the map from native class names to the canonical basic label space."""
    index = {n: i for i, n in enumerate(canonical_classes)}
    missing = [n for n in domain.class_names if n not in index]
    if missing and strict:
        raise DatasetError(f"domain {domain.id!r}: classes {missing} not in canonical space {list(canonical_classes)}")
    canonical = np.asarray([index.get(n, -1) for n in domain.class_names])
    return Domain(domain.id, domain.images, domain.labels, domain.class_names, canonical, domain.origin_labels)


# ---------------------------------------------------------------------------
# synthetic suite


def _class_name_basic(i: int) -> str:
    return f"basic_{i:02d}"


def _class_name_compound(a: int, b: int) -> str:
    return f"compound_{a:02d}_{b:02d}"


def synthetic_prototypes(cfg: SyntheticConfig) -> np.ndarray:
    """Per-class basic prototypes, ``num_basic x side x side x 3`` in [0.1, 0.9].

    Each prototype is a sum of a few random oriented sinusoidal gratings per
    channel plus two Gaussian blobs.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    s = cfg.image_side
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, s), np.linspace(0.0, 1.0, s), indexing="ij")
    protos = np.empty((cfg.num_basic_classes, s, s, 3), dtype=np.float64)
    for c in range(cfg.num_basic_classes):
        img = np.zeros((s, s, 3))
        for ch in range(3):
            for _ in range(3):
                angle = rng.uniform(0, np.pi)
                freq = rng.uniform(1.5, 6.0)
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.3, 1.0)
                img[..., ch] += amp * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        for _ in range(2):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            width = rng.uniform(0.08, 0.2)
            color = rng.uniform(-1.5, 1.5, size=3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            img += blob[..., None] * color
        lo, hi = img.min(), img.max()
        protos[c] = 0.1 + 0.8 * (img - lo) / (hi - lo)
    return protos.astype(np.float32)


def compound_pairs(cfg: SyntheticConfig) -> list[tuple[int, int]]:
    """The basic-class pairs used as compound classes, in sorted order."""
    cfg.validate()
    pairs = list(itertools.combinations(range(cfg.num_basic_classes), 2))
    rng = np.random.default_rng([cfg.seed, 1])
    chosen = rng.choice(len(pairs), size=cfg.num_compound_classes, replace=False)
    return sorted(pairs[i] for i in chosen)


def compose_halves(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Left half of ``left`` beside the right half of ``right``."""
    out = left.copy()
    half = left.shape[1] // 2
    out[:, half:] = right[:, half:]
    return out


def _render(protos: np.ndarray, counts: int, shift: tuple[np.ndarray, np.ndarray], noise_std: float, rng):
    gain, bias = shift
    n = protos.shape[0]
    base = np.clip(protos * gain + bias, 0.0, 1.0)
    images = np.repeat(base, counts, axis=0)
    if noise_std > 0:
        images = images + rng.normal(0.0, noise_std, size=images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    labels = np.repeat(np.arange(n), counts)
    return images, labels


def _domain_shift(strength: float, rng) -> tuple[np.ndarray, np.ndarray]:
    gain = 1.0 + strength * rng.uniform(-1.0, 1.0, size=3)
    bias = 0.5 * strength * rng.uniform(-1.0, 1.0, size=3)
    return gain.astype(np.float32), bias.astype(np.float32)


def generate_synthetic_suite(cfg: SyntheticConfig = SyntheticConfig()) -> DomainRegistry:
    """Build source domains of basic classes and a shifted basic+compound target.

    Every domain draws its own color/brightness shift; compound class
    ``(a, b)`` is the left half of prototype ``a`` beside the right half of
    prototype ``b``. Deterministic in ``cfg.seed``.
    """
    protos = synthetic_prototypes(cfg)
    pairs = compound_pairs(cfg)
    basic_names = tuple(_class_name_basic(i) for i in range(cfg.num_basic_classes))
    sources = []
    for j in range(cfg.num_source_domains):
        rng = np.random.default_rng([cfg.seed, 2, j])
        shift = _domain_shift(cfg.domain_shift_strength, rng)
        images, labels = _render(protos, cfg.samples_per_class, shift, cfg.noise_std, rng)
        sources.append(Domain(f"source_{j}", images, labels, basic_names))

    rng = np.random.default_rng([cfg.seed, 3])
    shift = _domain_shift(cfg.domain_shift_strength, rng)
    compound_protos = (
        np.stack([compose_halves(protos[a], protos[b]) for a, b in pairs]) if pairs else protos[:0]
    )
    target_protos = np.concatenate([protos, compound_protos])
    images, labels = _render(target_protos, cfg.samples_per_class, shift, cfg.noise_std, rng)
    names = basic_names + tuple(_class_name_compound(a, b) for a, b in pairs)
    nb = cfg.num_basic_classes
    target = with_canonical(Domain("target", images, labels, names), basic_names, strict=False)
    return DomainRegistry(
        tuple(sources),
        target,
        frozenset(range(nb)),
        frozenset(range(nb, nb + len(pairs))),
        basic_names,
    )


def _subset(domain: Domain, keep: Sequence[int], suffix: str) -> Domain:
    keep = sorted(keep)
    remap = np.full(domain.num_classes, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    mask = remap[domain.labels] >= 0
    return Domain(
        f"{domain.id}_{suffix}",
        domain.images[mask],
        remap[domain.labels[mask]],
        tuple(domain.class_names[i] for i in keep),
        domain.canonical[keep],
        tuple(int(i) for i in keep),
    )


def split_target(registry: DomainRegistry) -> tuple[Domain, Domain]:
    """Partition the target domain into its basic and compound subsets."""
    basic, compound = registry.target_basic_labels, registry.target_compound_labels
    if basic & compound:
        raise DatasetError(f"basic and compound label sets overlap: {sorted(basic & compound)}")
    if not basic or not compound:
        raise DatasetError("target split needs non-empty basic and compound label sets")
    t = registry.target_domain
    return _subset(t, basic, "basic"), _subset(t, compound, "compound")


# ---------------------------------------------------------------------------
# on-disk suites


def dump_domain(domain: Domain, root) -> None:
    root = Path(root)
    for c, name in enumerate(domain.class_names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        idx = np.flatnonzero(domain.labels == c)
        for k, i in enumerate(idx):
            arr = np.round(domain.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(d / f"{k:05d}.png")


def dump_suite(registry: DomainRegistry, root) -> Path:
    """Write every domain in folder convention plus ``registry.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for d in (*registry.source_domains, registry.target_domain):
        dump_domain(d, root / d.id)
    t = registry.target_domain
    meta = {
        "format": REGISTRY_FORMAT,
        "version": REGISTRY_VERSION,
        "image_side": int(t.image_shape[0]),
        "canonical_classes": list(registry.canonical_classes),
        "source_domains": [d.id for d in registry.source_domains],
        "target_domain": t.id,
        "target_basic_classes": [t.class_names[i] for i in sorted(registry.target_basic_labels)],
        "target_compound_classes": [t.class_names[i] for i in sorted(registry.target_compound_labels)],
    }
    with open(root / REGISTRY_FILE, "w") as fh:
        json.dump(meta, fh, indent=2)
    return root


def load_suite(root, side: Optional[int] = None) -> DomainRegistry:
    """Load a registry written by :func:`dump_suite` (or hand-written in the same format)."""
    root = Path(root)
    path = root / REGISTRY_FILE
    if not path.is_file():
        raise DatasetError(f"no {REGISTRY_FILE} in {root}")
    with open(path) as fh:
        meta = json.load(fh)
    if meta.get("format") != REGISTRY_FORMAT:
        raise DatasetError(f"{path}: not an {REGISTRY_FORMAT} file")
    side = side or int(meta.get("image_side", 84))
    canonical = meta["canonical_classes"]
    sources = tuple(
        with_canonical(load_image_folder(root / sid, side=side, domain_id=sid), canonical)
        for sid in meta["source_domains"]
    )
    target = load_image_folder(root / meta["target_domain"], side=side, domain_id=meta["target_domain"])
    target = with_canonical(target, canonical, strict=False)
    index = {n: i for i, n in enumerate(target.class_names)}
    try:
        basic = frozenset(index[n] for n in meta["target_basic_classes"])
        compound = frozenset(index[n] for n in meta["target_compound_classes"])
    except KeyError as e:
        raise DatasetError(f"{path}: unknown target class {e}") from None
    return DomainRegistry(sources, target, basic, compound, tuple(canonical))


def directory_digest(root) -> str:
    """Content hash over all files below ``root`` (paths and bytes)."""
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
