"""Depthwise block attention (DCAM + DSAM) and the mixed-attention residual block.

Both attention halves return the pre-sigmoid logits alongside the gated
feature map; those logits are what the distillation loss compares between
teacher and student.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, ValidationError

__all__ = [
    "AttentionMaps",
    "DepthwiseSeparableConv",
    "DepthwiseRefine",
    "DCAM",
    "DSAM",
    "DBAM",
    "MAB",
    "effective_reduction",
    "init_weights",
]


class AttentionMaps(NamedTuple):
    """Pre-sigmoid attention logits of one block: (B, C, 1, 1) and (B, 1, H, W)."""

    channel: Tensor
    spatial: Tensor


def effective_reduction(channels: int, reduction: int) -> int:
    """Clamp the MLP reduction ratio to the channel count and check it divides it."""
    if reduction < 1:
        raise ConfigurationError(f"reduction ratio must be >= 1, got {reduction}")
    r = min(reduction, channels)
    if channels % r:
        raise ConfigurationError(
            f"reduction ratio {r} does not divide channel count {channels}"
        )
    return r


def init_weights(module: nn.Module) -> None:
    """Kaiming fan-out for convolutions, zero biases, unit/zero batch norm."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _check_input(x: Tensor, channels: int, name: str) -> None:
    if x.dim() != 4:
        raise ValidationError(f"{name}: expected (B, C, H, W) input, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ConfigurationError(
            f"{name}: input has {x.shape[1]} channels, block was built for {channels}"
        )
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name}: input contains NaN or Inf")


class DepthwiseSeparableConv(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1, spatial size preserved."""

    def __init__(self, in_channels: int, out_channels: Optional[int] = None, kernel_size: int = 3):
        super().__init__()
        out_channels = out_channels or in_channels
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, kernel_size,
            padding=kernel_size // 2, groups=in_channels,
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class DepthwiseRefine(nn.Module):
    """Two depthwise-separable stacks with a 2x down/up-sample between them.

    The pooling pair is skipped when either spatial side is below 2. The
    output is resized back to the input's exact (H, W), so odd sizes work.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.stack1 = DepthwiseSeparableConv(channels)
        self.stack2 = DepthwiseSeparableConv(channels)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        y = self.stack1(x)
        if h >= 2 and w >= 2:
            y = F.avg_pool2d(y, 2)
            y = self.stack2(y)
            y = F.interpolate(y, size=(h, w), mode="nearest")
        else:
            y = self.stack2(y)
        return y


class DCAM(nn.Module):
    """Depthwise channel attention.

    ``refine=False`` drops the depthwise stacks, which turns the module
    into plain CBAM channel attention (used by the ablation variant).
    """

    def __init__(self, channels: int, reduction: int = 16, refine: bool = True):
        super().__init__()
        self.channels = channels
        hidden = channels // effective_reduction(channels, reduction)
        self.refine = DepthwiseRefine(channels) if refine else nn.Identity()
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=False),
            nn.Linear(hidden, channels),
        )

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _check_input(x, self.channels, "DCAM")
        fm = self.refine(x)
        avg = fm.mean(dim=(2, 3))
        mx = fm.amax(dim=(2, 3))
        logits = (self.mlp(avg) + self.mlp(mx))[:, :, None, None]
        return torch.sigmoid(logits) * x, logits


class DSAM(nn.Module):
    """Depthwise spatial attention: channel-wise avg/max pooling, 3x3 conv 2 -> 1."""

    def __init__(self, channels: int, refine: bool = True, kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        self.refine = DepthwiseRefine(channels) if refine else nn.Identity()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        _check_input(x, self.channels, "DSAM")
        fm = self.refine(x)
        pooled = torch.cat([fm.mean(dim=1, keepdim=True), fm.amax(dim=1, keepdim=True)], dim=1)
        logits = self.conv(pooled)
        return torch.sigmoid(logits) * x, logits


class DBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels: int, reduction: int = 16, refine: bool = True):
        super().__init__()
        self.dcam = DCAM(channels, reduction, refine=refine)
        self.dsam = DSAM(channels, refine=refine)

    def forward(self, x: Tensor) -> tuple[Tensor, AttentionMaps]:
        x, mc = self.dcam(x)
        x, ms = self.dsam(x)
        return x, AttentionMaps(mc, ms)


class MAB(nn.Module):
    """Mixed-attention block: basic residual block with DBAM before the skip add.

    ``attention`` is ``"dbam"``, ``"cbam"`` (DBAM without depthwise stacks)
    or ``None`` (plain basic block, no maps). With ``stride != 1`` or a
    width change the shortcut becomes a 1x1 projection.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: Optional[int] = None,
        stride: int = 1,
        reduction: int = 16,
        norm: bool = True,
        attention: Optional[str] = "dbam",
        activate_output: bool = True,
    ):
        super().__init__()
        out_channels = out_channels or in_channels
        if attention not in ("dbam", "cbam", None):
            raise ConfigurationError(f"unknown attention variant {attention!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.activate_output = activate_output

        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels) if norm else nn.Identity()
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels) if norm else nn.Identity()
        if attention is None:
            self.attention = None
        else:
            self.attention = DBAM(out_channels, reduction, refine=attention == "dbam")

        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride),
                nn.BatchNorm2d(out_channels) if norm else nn.Identity(),
            )
        else:
            self.shortcut = nn.Identity()
        init_weights(self)

    @property
    def has_attention(self) -> bool:
        return self.attention is not None

    def forward(self, x: Tensor) -> tuple[Tensor, Optional[AttentionMaps]]:
        _check_input(x, self.in_channels, "MAB")
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        maps = None
        if self.attention is not None:
            y, maps = self.attention(y)
        out = y + self.shortcut(x)
        if self.activate_output:
            out = F.relu(out)
        return out, maps
