"""3D classifiers for difference maps.

Two families share one contract: the module returns one logit per sample,
``predict_batch`` applies the sigmoid, and every model exposes a
``backbone`` (convolutional part) and a ``head`` (fully-connected part) so
the feature-extraction strategy can freeze the former.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

CHECKPOINT_FORMAT = "gliotl-checkpoint/1"

# Widths picked so the default VGG on the default 96x96x64 grid lands near
# 7.5M trainable parameters and the default SE-ResNeXt near 19.4M.
VGG_DEFAULT_CHANNELS = (32, 64, 128, 256)
VGG_DEFAULT_FC = (112, 64, 32, 1)
SERESNEXT_DEFAULT_DEPTHS = (2, 3, 4, 2)


@dataclass(frozen=True)
class ArchitectureSpec:
    family: str
    input_shape: tuple[int, int, int] = (96, 96, 64)
    conv_block_channels: tuple[int, ...] = VGG_DEFAULT_CHANNELS
    fc_widths: tuple[int, ...] = VGG_DEFAULT_FC
    convs_per_block: int = 2
    cardinality: int = 32
    se_reduction: int = 16
    stage_depths: tuple[int, ...] = SERESNEXT_DEFAULT_DEPTHS
    stage_planes: tuple[int, ...] = (64, 128, 256, 512)
    base_width: int = 4
    stem_channels: int = 64
    dropout: float | None = None

    def __post_init__(self):
        for name in ("input_shape", "conv_block_channels", "fc_widths", "stage_depths", "stage_planes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.family not in ("vgg3d", "seresnext3d"):
            raise ValidationError(f"unknown model family {self.family!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValidationError(f"bad input_shape {self.input_shape}")
        if self.family == "vgg3d":
            if len(self.conv_block_channels) != 4:
                raise ValidationError("vgg3d needs exactly 4 conv blocks")
            if len(self.fc_widths) != 4 or self.fc_widths[-1] != 1:
                raise ValidationError("vgg3d needs 4 fully-connected widths ending in 1")
            if self.convs_per_block < 1:
                raise ValidationError("convs_per_block must be >= 1")
        else:
            if len(self.stage_depths) != len(self.stage_planes):
                raise ValidationError("stage_depths and stage_planes differ in length")
            if self.se_reduction < 1 or self.cardinality < 1:
                raise ValidationError("cardinality and se_reduction must be >= 1")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def vgg3d(cls, **kw) -> "ArchitectureSpec":
        return cls(family="vgg3d", **kw)

    @classmethod
    def seresnext3d(cls, **kw) -> "ArchitectureSpec":
        return cls(family="seresnext3d", **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


# -- VGG --------------------------------------------------------------------


class VGG3D(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 1
        for c_out in spec.conv_block_channels:
            for _ in range(spec.convs_per_block):
                layers += [nn.Conv3d(c_in, c_out, 3, padding=1), nn.BatchNorm3d(c_out), nn.ReLU(inplace=True)]
                c_in = c_out
            layers.append(nn.MaxPool3d(2))
        self.backbone = nn.Sequential(*layers)
        spatial = [s // 16 for s in spec.input_shape]
        n_flat = c_in * int(np.prod(spatial))
        head: list[nn.Module] = [nn.Flatten()]
        widths = [n_flat, *spec.fc_widths]
        for i in range(4):
            head.append(nn.Linear(widths[i], widths[i + 1]))
            if i < 3:
                head.append(nn.ReLU(inplace=True))
                if spec.dropout:
                    head.append(nn.Dropout(spec.dropout))
        self.head = nn.Sequential(*head)

    def forward(self, x):
        return self.head(self.backbone(x)).squeeze(1)


# -- SE-ResNeXt -------------------------------------------------------------


class SqueezeExcite3D(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc1 = nn.Conv3d(channels, hidden, 1)
        self.fc2 = nn.Conv3d(hidden, channels, 1)

    def forward(self, x):
        s = self.pool(x)
        s = torch.relu(self.fc1(s))
        return x * torch.sigmoid(self.fc2(s))


class SEResNeXtBottleneck(nn.Module):
    expansion = 4

    def __init__(self, c_in, planes, stride, cardinality, base_width, reduction):
        super().__init__()
        width = int(planes * base_width / 64) * cardinality
        c_out = planes * self.expansion
        self.conv1 = nn.Conv3d(c_in, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = nn.Conv3d(width, width, 3, stride=stride, padding=1, groups=cardinality, bias=False)
        self.bn2 = nn.BatchNorm3d(width)
        self.conv3 = nn.Conv3d(width, c_out, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(c_out)
        self.se = SqueezeExcite3D(c_out, reduction)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv3d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm3d(c_out)
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = torch.relu(self.bn2(self.conv2(out)))
        out = self.se(self.bn3(self.conv3(out)))
        skip = x if self.downsample is None else self.downsample(x)
        return torch.relu(out + skip)


class SEResNeXt3D(nn.Module):
    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        stem = [
            nn.Conv3d(1, spec.stem_channels, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm3d(spec.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(3, stride=2, padding=1),
        ]
        blocks = []
        c_in = spec.stem_channels
        for i, (depth, planes) in enumerate(zip(spec.stage_depths, spec.stage_planes)):
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(
                    SEResNeXtBottleneck(c_in, planes, stride, spec.cardinality, spec.base_width, spec.se_reduction)
                )
                c_in = planes * SEResNeXtBottleneck.expansion
        self.backbone = nn.Sequential(*stem, *blocks)
        head: list[nn.Module] = [nn.AdaptiveAvgPool3d(1), nn.Flatten()]
        if spec.dropout:
            head.append(nn.Dropout(spec.dropout))
        head.append(nn.Linear(c_in, 1))
        self.head = nn.Sequential(*head)

    def forward(self, x):
        return self.head(self.backbone(x)).squeeze(1)


def _check_downsampling(spec: ArchitectureSpec) -> None:
    size = list(spec.input_shape)
    if spec.family == "vgg3d":
        for b in range(4):
            if min(size) < 2:
                raise ValidationError(
                    f"input {spec.input_shape} too small: conv block {b + 1} pools a spatial size of {size}"
                )
            size = [s // 2 for s in size]
        return
    stages = [("stem convolution", 7, 2, 3), ("stem max-pool", 3, 2, 1)]
    stages += [(f"stage {i + 1}", 3, 2, 1) for i in range(1, len(spec.stage_depths))]
    for name, k, s, p in stages:
        if min(size) < 2:
            raise ValidationError(f"input {spec.input_shape} too small: {name} downsamples a spatial size of {size}")
        size = [(n + 2 * p - k) // s + 1 for n in size]


# -- handle -----------------------------------------------------------------


@dataclass
class ModelHandle:
    module: nn.Module
    spec: ArchitectureSpec
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return count_parameters(self)

    @property
    def total_parameter_count(self) -> int:
        return count_parameters(self, trainable_only=False)

    def clone(self) -> "ModelHandle":
        return ModelHandle(copy.deepcopy(self.module), self.spec, self.seed, dict(self.meta))

    def state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}

    def load_state(self, state: dict) -> None:
        self.module.load_state_dict(state)


def build_model(spec: ArchitectureSpec, seed: int = 0) -> ModelHandle:
    _check_downsampling(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        module = VGG3D(spec) if spec.family == "vgg3d" else SEResNeXt3D(spec)
    return ModelHandle(module, spec, seed)


def count_parameters(model, trainable_only: bool = True) -> int:
    module = model.module if isinstance(model, ModelHandle) else model
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def freeze_backbone(model: ModelHandle) -> None:
    for p in model.module.backbone.parameters():
        p.requires_grad_(False)


def unfreeze_all(model: ModelHandle) -> None:
    for p in model.module.parameters():
        p.requires_grad_(True)


def head_parameter_count(model: ModelHandle) -> int:
    return sum(p.numel() for p in model.module.head.parameters())


def as_batch_tensor(batch, spec: ArchitectureSpec) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch, dtype=torch.float32)
    expected = (1, *spec.input_shape)
    if x.ndim != 5 or tuple(x.shape[1:]) != expected:
        raise ValidationError(f"batch must be N x {' x '.join(map(str, expected))}, got {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ValidationError("empty batch")
    if not torch.isfinite(x).all():
        raise ValidationError("batch contains non-finite values")
    return x


def predict_batch(model: ModelHandle, batch, chunk: int = 16) -> np.ndarray:
    """Sigmoid probabilities for a batch, always in inference mode."""
    x = as_batch_tensor(batch, model.spec)
    was_training = model.module.training
    model.module.eval()
    try:
        outs = []
        with torch.no_grad():
            for i in range(0, x.shape[0], chunk):
                param = next(model.module.parameters())
                outs.append(torch.sigmoid(model.module(x[i : i + chunk].to(param.dtype))))
        return torch.cat(outs).double().numpy()
    finally:
        model.module.train(was_training)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: ModelHandle, path, epoch: int | None = None, val_auc: float | None = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "state_dict": model.module.state_dict(),
        "epoch": epoch,
        "val_auc": val_auc,
        "extra": extra,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[ModelHandle, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    spec = ArchitectureSpec.from_dict(payload["spec"])
    model = build_model(spec, payload.get("seed") or 0)
    model.module.load_state_dict(payload["state_dict"])
    meta = {k: payload.get(k) for k in ("epoch", "val_auc", "extra")}
    return model, meta


def with_input_shape(spec: ArchitectureSpec, shape: Sequence[int]) -> ArchitectureSpec:
    return replace(spec, input_shape=tuple(shape))
