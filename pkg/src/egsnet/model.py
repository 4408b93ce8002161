"""Encoders, the emotion classifier and the two-branch model state."""

from __future__ import annotations

import copy
import warnings
from typing import Optional

import numpy as np
import torch
from torch import nn

from .metrics import MetricModule, make_metric

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.25, 0.25, 0.25)


def conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(kernel_size=2, stride=2),
    )


class Encoder(nn.Module):
    """Image encoder mapping ``B x H x W x C`` images in [0, 1] to ``B x d`` embeddings.

    Inputs are standardized per channel with fixed constants, passed through
    the backbone and global-average pooled.
    """

    def __init__(
        self,
        backbone: str = "conv4",
        channels: int = 64,
        blocks: int = 4,
        in_channels: int = 3,
        image_side: Optional[int] = None,
        mean=None,
        std=None,
    ):
        super().__init__()
        self.backbone_name = backbone
        self.in_channels = in_channels
        self.image_side = image_side
        if backbone == "conv4":
            layers = [conv_block(in_channels if i == 0 else channels, channels) for i in range(blocks)]
            self.backbone = nn.Sequential(*layers)
            self.dim = channels
        elif backbone == "resnet18":
            from torchvision.models import resnet18

            net = resnet18(weights=None)
            if in_channels != 3:
                net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
            self.backbone = nn.Sequential(*(m for n, m in net.named_children() if n not in ("fc", "avgpool")))
            self.dim = 512
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        mean = DEFAULT_MEAN[:1] * in_channels if mean is None and in_channels != 3 else (mean or DEFAULT_MEAN)
        std = DEFAULT_STD[:1] * in_channels if std is None and in_channels != 3 else (std or DEFAULT_STD)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[-1] != self.in_channels:
            raise ValueError(f"expected B x H x W x {self.in_channels} images, got {tuple(images.shape)}")
        if self.image_side is not None and tuple(images.shape[1:3]) != (self.image_side, self.image_side):
            raise ValueError(f"expected {self.image_side}x{self.image_side} images, got {tuple(images.shape[1:3])}")
        if images.shape[0] == 0:
            return images.new_zeros((0, self.dim))
        x = images.permute(0, 3, 1, 2)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        x = x.contiguous(memory_format=torch.channels_last)
        x = self.backbone(x)
        return x.mean(dim=(2, 3))


def as_tensor(images, dtype=torch.float32) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    arr = np.ascontiguousarray(images)
    if not arr.flags.writeable:
        arr = arr.copy()  # domain arrays are read-only
    return torch.from_numpy(arr).to(dtype)


def encode(enc: Encoder, images) -> torch.Tensor:
    """Embed images with ``enc`` in its current train/eval mode."""
    dtype = next(enc.parameters()).dtype
    return enc(as_tensor(images, dtype))


def classify_emotion(clf: nn.Linear, features: torch.Tensor) -> torch.Tensor:
    if features.ndim != 2 or features.shape[1] != clf.in_features:
        raise ValueError(f"classifier expects B x {clf.in_features} features, got {tuple(features.shape)}")
    return clf(features)


class EGSNet(nn.Module):
    """Emotion branch (encoder + classifier) and similarity branch (encoder + metric).

    While ``shared`` the two branch handles refer to one encoder; after
    :meth:`split` the similarity encoder is an independent deep copy.
    """

    def __init__(
        self,
        num_classes: int,
        metric: str = "prototype",
        backbone: str = "conv4",
        channels: int = 64,
        blocks: int = 4,
        image_side: Optional[int] = None,
        in_channels: int = 3,
    ):
        super().__init__()
        self.arch = dict(
            num_classes=num_classes,
            metric=metric,
            backbone=backbone,
            channels=channels,
            blocks=blocks,
            image_side=image_side,
            in_channels=in_channels,
        )
        self.emotion_encoder = Encoder(backbone, channels, blocks, in_channels, image_side)
        self.split_encoder: Optional[Encoder] = None
        self.classifier = nn.Linear(self.emotion_encoder.dim, num_classes)
        self.metric: MetricModule = make_metric(metric, self.emotion_encoder.dim)

    @property
    def shared(self) -> bool:
        return self.split_encoder is None

    @property
    def similarity_encoder(self) -> Encoder:
        return self.emotion_encoder if self.split_encoder is None else self.split_encoder

    @property
    def dim(self) -> int:
        return self.emotion_encoder.dim

    def split(self) -> "EGSNet":
        if not self.shared:
            warnings.warn("model already split; split_shared is a no-op", stacklevel=2)
            return self
        self.split_encoder = copy.deepcopy(self.emotion_encoder)
        return self

    def emotion_parameters(self) -> dict[str, nn.Parameter]:
        out = {f"emotion_encoder.{n}": p for n, p in self.emotion_encoder.named_parameters()}
        out.update({f"classifier.{n}": p for n, p in self.classifier.named_parameters()})
        return out

    def similarity_parameters(self) -> dict[str, nn.Parameter]:
        prefix = "emotion_encoder" if self.shared else "split_encoder"
        out = {f"{prefix}.{n}": p for n, p in self.similarity_encoder.named_parameters()}
        out.update({f"metric.{n}": p for n, p in self.metric.named_parameters()})
        return out

    def all_parameters(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())


def split_shared(state: EGSNet) -> EGSNet:
    return state.split()


def build_model(arch: dict) -> EGSNet:
    return EGSNet(**arch)


def parameters_finite(model: nn.Module) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


def parameter_digest(params) -> str:
    """SHA-256 over the raw bytes of a parameter/buffer collection."""
    import hashlib

    h = hashlib.sha256()
    items = params.items() if isinstance(params, dict) else enumerate(params)
    for name, t in items:
        h.update(str(name).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_digest(module: nn.Module) -> str:
    return parameter_digest(module.state_dict())
