"""Pixel-level feature extraction.

A multi-scale conv backbone feeds per-level 1x1 lateral projections to a
shared dimension; all levels are bilinearly upsampled to 1/4 input scale,
summed elementwise, and L2-normalized per pixel.  The only head parameters
on top of the backbone are the 1x1 projections.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from picie.errors import ConfigError, NumericalError

NORM_EPS = 1e-12


@dataclasses.dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "tiny"  # "tiny" | "resnet18"
    dim: int = 128
    stride: int = 4  # fusion scale; output spatial dims are input / stride
    weights: str | None = None  # optional backbone state-dict path (resnet18)

    def validate(self):
        if self.backbone not in ("tiny", "resnet18"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.dim <= 0:
            raise ConfigError(f"feature dim must be positive, got {self.dim}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


@dataclasses.dataclass
class FeatureMap:
    """Unit-norm per-pixel embeddings at 1/stride input resolution."""

    values: torch.Tensor  # D,H',W'
    image_id: str = ""
    view: int = 1


class TinyBackbone(nn.Module):
    """Four stride-2 conv-norm-relu stages; enough capacity for desk-scale
    runs. The norm layers keep pseudo-label training from collapsing the
    feature distribution; GroupNorm is stateless, so clustering, training,
    and evaluation all see the same function."""

    out_channels = (16, 32, 64, 64)

    def __init__(self):
        super().__init__()
        chans = (3,) + self.out_channels
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(8, chans[i + 1]),
                nn.ReLU(inplace=True),
            )
            for i in range(4)
        )

    def forward(self, x):
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels


class ResNet18Backbone(nn.Module):
    """torchvision ResNet-18 trunk returning the four residual stages."""

    out_channels = (64, 128, 256, 512)

    def __init__(self, weights: str | None = None):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if weights:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            net.load_state_dict(state, strict=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        levels = []
        for layer in self.layers:
            x = layer(x)
            levels.append(x)
        return levels


def l2_normalize(t: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Per-pixel unit norm; the epsilon keeps degenerate zero vectors finite."""
    return t / torch.sqrt((t * t).sum(dim=dim, keepdim=True) + NORM_EPS)


class PixelFeatureExtractor(nn.Module):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        config.validate()
        self.config = config
        if config.backbone == "tiny":
            self.backbone = TinyBackbone()
        else:
            self.backbone = ResNet18Backbone(config.weights)
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, config.dim, 1) for c in self.backbone.out_channels
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """B,3,H,W -> B,D,H/stride,W/stride with unit per-pixel norm."""
        stride = self.config.stride
        h, w = x.shape[-2], x.shape[-1]
        if h % stride or w % stride:
            raise ConfigError(
                f"input side ({h}x{w}) must be divisible by the output stride {stride}"
            )
        target = (h // stride, w // stride)
        levels = self.backbone(x)
        fused = None
        for lateral, level in zip(self.laterals, levels):
            proj = lateral(level)
            if proj.shape[-2:] != target:
                proj = F.interpolate(proj, size=target, mode="bilinear", align_corners=False)
            fused = proj if fused is None else fused + proj
        return l2_normalize(fused, dim=1)


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H,W,3 numpy in [0,1] -> 3,H,W tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


def extract(
    extractor: PixelFeatureExtractor, image: np.ndarray, image_id: str = "", view: int = 1
) -> FeatureMap:
    """Feature map of one image; differentiable w.r.t. the extractor
    parameters (wrap in torch.no_grad() when gradients are not needed)."""
    dtype = next(extractor.parameters()).dtype
    batch = image_to_tensor(image, dtype)[None]
    values = extractor(batch)[0]
    return FeatureMap(values=values, image_id=image_id, view=view)


def gradient_of_loss(
    extractor: PixelFeatureExtractor,
    loss_fn,
    image_ids: tuple[str, ...] = (),
) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss closure w.r.t. every extractor parameter.

    The closure receives the extractor and must build the loss from its
    outputs. Non-finite losses raise NumericalError carrying the image ids.
    """
    for p in extractor.parameters():
        p.grad = None
    loss = loss_fn(extractor)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {float(loss)}", image_ids)
    loss.backward()
    grads = {}
    for name, p in extractor.named_parameters():
        grads[name] = (
            p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        )
    return grads
