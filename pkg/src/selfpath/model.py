"""Shared encoder, task heads, gradient reversal and the generator.

Tensors are NCHW float32 with intensities in [0, 1].  ``forward_shared``
returns the encoder's spatial feature map; heads that need a vector pool it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, ParameterError
from .pretext import CLASSIFICATION, PIXELWISE, TaskSpec

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "small-conv"
    input_size: int = 128
    feature_width: int = 64

    def __post_init__(self):
        if self.arch not in ("small-conv", "deep-residual"):
            raise ConfigError(f"unknown encoder architecture {self.arch!r}")
        if self.input_size < 16 or self.input_size & (self.input_size - 1):
            raise ConfigError("input_size must be a power of two >= 16")
        if self.feature_width < 8:
            raise ConfigError("feature_width must be >= 8")


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    outputs: int = 0
    grl_lambda: float = 1.0


# ---------------------------------------------------------------------------
# gradient reversal
# ---------------------------------------------------------------------------

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ParameterError("GRL coefficient must be >= 0")
    return _GradReverse.apply(x, float(lam))


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        self.lam = lam

    def forward(self, x):
        return grad_reverse(x, self.lam)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class SmallConvEncoder(nn.Module):
    """Four stride-2 3x3 conv blocks.

    GroupNorm normalises each sample on its own, so outputs never depend on
    the rest of the batch.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w = cfg.feature_width
        widths = [max(w // 8, 4), max(w // 4, 4), max(w // 2, 4), w]
        layers, c = [], 3
        for o in widths:
            layers += [nn.Conv2d(c, o, 3, stride=2, padding=1), nn.GroupNorm(min(4, o), o), nn.ReLU(inplace=True)]
            c = o
        self.body = nn.Sequential(*layers)
        self.stride = 16

    def forward(self, x):
        return self.body((x - 0.5) * 4.0)


class ResidualEncoder(nn.Module):
    """ResNet-50 trunk (randomly initialised), optionally projected to ``feature_width``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)
        self.proj = nn.Identity() if cfg.feature_width == 2048 else nn.Conv2d(2048, cfg.feature_width, 1)
        self.stride = 32

    def forward(self, x):
        return self.proj(self.body(x))


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    return SmallConvEncoder(cfg) if cfg.arch == "small-conv" else ResidualEncoder(cfg)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def pool(features: torch.Tensor) -> torch.Tensor:
    return F.adaptive_avg_pool2d(features, 1).flatten(1)


class ClassifierHead(nn.Module):
    """Adaptive average pooling to a ``grid x grid`` map, then a linear layer; returns logits.

    Pretext heads use grid=2 so arrangement tasks can see which quadrant a
    feature came from.
    """

    def __init__(self, width: int, n: int, grid: int = 1):
        super().__init__()
        self.grid = grid
        self.fc = nn.Linear(width * grid * grid, n)

    def forward(self, features):
        return self.fc(F.adaptive_avg_pool2d(features, self.grid).flatten(1))


class DecoderHead(nn.Module):
    """Transposed-conv decoder back to input resolution, no skip connections."""

    def __init__(self, width: int, out_channels: int, n_up: int):
        super().__init__()
        layers, c = [], width
        for _ in range(n_up):
            o = max(c // 2, 8)
            layers += [nn.ConvTranspose2d(c, o, 4, stride=2, padding=1), nn.ReLU(inplace=True)]
            c = o
        layers += [nn.Conv2d(c, out_channels, 3, padding=1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)

    def forward(self, features):
        return self.body(features)


class DiscriminatorHead(nn.Module):
    """Real/fake head; returns logits of the 'fake' probability."""

    def __init__(self, width: int):
        super().__init__()
        self.fc = nn.Linear(width, 1)

    def forward(self, features):
        return self.fc(pool(features)).squeeze(1)


class DomainHead(nn.Module):
    def __init__(self, width: int, grl_lambda: float = 1.0, hidden: int = 100, n_domains: int = 2):
        super().__init__()
        self.grl = GradientReversal(grl_lambda)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, n_domains))

    def forward(self, features):
        return self.mlp(pool(self.grl(features)))


class Generator(nn.Module):
    """Maps z ~ U(-1, 1)^z_dim to an image in [0, 1]."""

    def __init__(self, z_dim: int = 100, size: int = 128, base: int = 128):
        super().__init__()
        self.z_dim = z_dim
        n_up = int(math.log2(size // 4))
        self.fc = nn.Sequential(nn.Linear(z_dim, base * 16), nn.ReLU(inplace=True))
        layers, c = [], base
        for _ in range(n_up):
            o = max(c // 2, 8)
            layers += [nn.ConvTranspose2d(c, o, 4, stride=2, padding=1), nn.ReLU(inplace=True)]
            c = o
        layers += [nn.Conv2d(c, 3, 3, padding=1), nn.Sigmoid()]
        self.base = base
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ParameterError(f"noise must have shape (batch, {self.z_dim}), got {tuple(z.shape)}")
        return self.body(self.fc(z).view(-1, self.base, 4, 4))


def sample_noise(n: int, z_dim: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    return torch.rand(n, z_dim, generator=generator) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class SelfPathModel(nn.Module):
    def __init__(self, encoder: EncoderConfig = EncoderConfig(), num_classes: int = 2,
                 tasks: Sequence[TaskSpec] = (), grl_lambda: float = 1.0, z_dim: int = 100):
        super().__init__()
        self.encoder_config = encoder
        self.num_classes = num_classes
        self.grl_lambda = grl_lambda
        self.z_dim = z_dim
        self.encoder = build_encoder(encoder)
        width = encoder.feature_width
        n_up = int(math.log2(self.encoder.stride))
        self.head_configs = {"main": HeadConfig("classifier", num_classes)}
        heads = {"main": ClassifierHead(width, num_classes)}
        self.generator = None
        for t in tasks:
            if t.name == "generative":
                heads[t.name] = DiscriminatorHead(width)
                self.head_configs[t.name] = HeadConfig("discriminator", 1)
                self.generator = Generator(z_dim, encoder.input_size)
            elif t.name == "domain":
                heads[t.name] = DomainHead(width, grl_lambda, n_domains=t.num_classes)
                self.head_configs[t.name] = HeadConfig("domain", t.num_classes, grl_lambda)
            elif t.kind == CLASSIFICATION:
                heads[t.name] = ClassifierHead(width, t.num_classes, grid=2)
                self.head_configs[t.name] = HeadConfig("classifier", t.num_classes)
            elif t.kind == PIXELWISE:
                heads[t.name] = DecoderHead(width, t.target_shape[0], n_up)
                self.head_configs[t.name] = HeadConfig("decoder", t.target_shape[0])
            else:
                raise ConfigError(f"no head for task {t.name!r} of kind {t.kind!r}")
        self.heads = nn.ModuleDict(heads)

    @property
    def feature_width(self) -> int:
        return self.encoder_config.feature_width

    def _check(self, x):
        s = self.encoder_config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ParameterError(f"expected a (batch, 3, {s}, {s}) tensor, got {tuple(x.shape)}")

    def forward_shared(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.encoder(x)

    def head(self, name: str, features: torch.Tensor) -> torch.Tensor:
        try:
            h = self.heads[name]
        except KeyError:
            raise ConfigError(f"model has no head for task {name!r}") from None
        return h(features)

    def forward(self, x):
        return self.heads["main"](self.forward_shared(x))

    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(x), dim=1)

    def discriminate(self, features: torch.Tensor) -> torch.Tensor:
        """Probability that each sample is generated."""
        return torch.sigmoid(self.head("generative", features))

    def generate(self, z: torch.Tensor) -> torch.Tensor:
        if self.generator is None:
            raise ConfigError("model was built without a generator")
        return self.generator(z)

    def pretext_parameters(self, name: str):
        return list(self.heads[name].parameters())


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------

def discriminator_loss(logit_real: torch.Tensor, logit_fake: torch.Tensor,
                       as_printed: bool = True) -> torch.Tensor:
    """Real/fake loss from discriminator logits.

    ``as_printed`` scores real samples under ``log(1 - D)`` and generated
    ones under ``log D`` (D is the probability of "fake"); False swaps the
    two terms.
    """
    if as_printed:
        return -F.logsigmoid(-logit_real).mean() - F.logsigmoid(logit_fake).mean()
    return -F.logsigmoid(logit_real).mean() - F.logsigmoid(-logit_fake).mean()


def feature_matching_loss(feat_real: torch.Tensor, feat_fake: torch.Tensor) -> torch.Tensor:
    """L1 distance between batch means of absolute features."""
    return (feat_real.abs().mean(0) - feat_fake.abs().mean(0)).abs().sum()


# ---------------------------------------------------------------------------
# conversion and checkpoints
# ---------------------------------------------------------------------------

def to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) array -> (N, 3, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def save_checkpoint(model: SelfPathModel, path, tasks: Sequence[TaskSpec] = (), extra: Optional[dict] = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder": asdict(model.encoder_config),
        "num_classes": model.num_classes,
        "grl_lambda": model.grl_lambda,
        "z_dim": model.z_dim,
        "tasks": [asdict(t) for t in tasks],
        "heads": {k: asdict(v) for k, v in model.head_configs.items()},
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path) -> SelfPathModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('format_version')}")
    tasks = []
    for d in payload["tasks"]:
        if d.get("target_shape") is not None:
            d["target_shape"] = tuple(d["target_shape"])
        tasks.append(TaskSpec(**d))
    model = SelfPathModel(EncoderConfig(**payload["encoder"]), payload["num_classes"], tasks,
                          payload["grl_lambda"], payload["z_dim"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
