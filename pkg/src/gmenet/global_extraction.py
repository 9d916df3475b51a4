"""Mixed-channel feature extraction block (MCB).

Two quasi-symmetric branches over the entry-conv feature map ``F``:

* replicate: 1x1-reduce ``F`` to C/4 channels and feed four copies through
  a cascade of depthwise-separable stacks;
* split: cut ``F`` into four contiguous channel quarters and feed them
  through the same kind of cascade.

The cascade is ``f_1 = g_1(x_1)``, ``f_i = g_i(f_{i-1}) + x_i`` and its four
outputs are concatenated back to C channels.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import DepthwiseSeparableConv, _check_input, init_weights
from .errors import ConfigurationError

__all__ = ["MCB", "cascade"]

SCALES = 4


class _Stage(nn.Module):
    def __init__(self, channels: int, norm: bool):
        super().__init__()
        self.conv = DepthwiseSeparableConv(channels)
        self.bn = nn.BatchNorm2d(channels) if norm else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


def cascade(pieces: Sequence[Tensor], stages: Sequence[nn.Module]) -> Tensor:
    outs = [stages[0](pieces[0])]
    for piece, stage in zip(pieces[1:], stages[1:]):
        outs.append(stage(outs[-1]) + piece)
    return torch.cat(outs, dim=1)


class MCB(nn.Module):
    """Shape-preserving multi-scale block; ``channels`` must be divisible by 4.

    ``residual="entry"`` adds the entry-conv output back, ``"input"`` adds
    the raw block input instead.
    """

    def __init__(
        self,
        channels: int,
        norm: bool = True,
        residual: str = "entry",
        activate_output: bool = True,
    ):
        super().__init__()
        if channels % SCALES:
            raise ConfigurationError(f"MCB channel count {channels} is not divisible by {SCALES}")
        if residual not in ("entry", "input"):
            raise ConfigurationError(f"unknown residual mode {residual!r}")
        self.channels = channels
        self.residual = residual
        self.activate_output = activate_output
        quarter = channels // SCALES

        self.entry_conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.entry_bn = nn.BatchNorm2d(channels) if norm else nn.Identity()
        self.reduce_conv = nn.Conv2d(channels, quarter, 1)
        self.branch1 = nn.ModuleList(_Stage(quarter, norm) for _ in range(SCALES))
        self.branch2 = nn.ModuleList(_Stage(quarter, norm) for _ in range(SCALES))
        init_weights(self)

    def entry(self, x: Tensor) -> Tensor:
        return F.relu(self.entry_bn(self.entry_conv(x)))

    def branch_replicate(self, f: Tensor) -> Tensor:
        _check_input(f, self.channels, "MCB")
        reduced = self.reduce_conv(f)
        return cascade([reduced] * SCALES, self.branch1)

    def branch_split(self, f: Tensor) -> Tensor:
        _check_input(f, self.channels, "MCB")
        return cascade(torch.chunk(f, SCALES, dim=1), self.branch2)

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.channels, "MCB")
        f = self.entry(x)
        skip = f if self.residual == "entry" else x
        out = self.branch_replicate(f) + self.branch_split(f) + skip
        if self.activate_output:
            out = F.relu(out)
        return out
