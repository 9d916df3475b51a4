"""GME-Net assembly: stem, per-stage MAB and MCB stacks fused by addition, head.

The same class serves as HR teacher and LR student; both are built from one
:class:`NetworkConfig`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import MAB, AttentionMaps, effective_reduction, init_weights
from .errors import ConfigurationError, ValidationError
from .global_extraction import MCB

__all__ = [
    "AblationConfig",
    "NetworkConfig",
    "ForwardOutput",
    "GMENet",
    "build_network",
    "count_parameters",
    "count_multiply_accumulates",
    "save_checkpoint",
    "load_checkpoint",
    "network_from_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass
class AblationConfig:
    use_dbam: bool = True
    use_cbam: bool = False
    use_global_branch: bool = True

    @property
    def attention(self) -> Optional[str]:
        if self.use_dbam:
            return "dbam"
        if self.use_cbam:
            return "cbam"
        return None


@dataclass
class NetworkConfig:
    initial_channels: int = 32
    stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    blocks_per_stage: tuple[int, ...] = (3, 4, 6, 3)
    num_classes: int = 7
    reduction_ratio: int = 16
    input_size: tuple[int, int] = (112, 112)
    norm: bool = True
    # stride of each stage's entry block; ``None`` means 2 everywhere
    stage_strides: Optional[tuple[int, ...]] = None
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.stage_strides is not None:
            self.stage_strides = tuple(int(s) for s in self.stage_strides)
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)

    @property
    def strides(self) -> tuple[int, ...]:
        if self.stage_strides is None:
            return (2,) * len(self.stage_widths)
        return self.stage_strides

    def validate(self) -> None:
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigurationError(
                f"stage_widths has {len(self.stage_widths)} entries but "
                f"blocks_per_stage has {len(self.blocks_per_stage)}"
            )
        if len(self.strides) != len(self.stage_widths):
            raise ConfigurationError("stage_strides must have one entry per stage")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.initial_channels < 1 or len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigurationError("initial_channels and input_size must be positive")
        if self.ablation.use_dbam and self.ablation.use_cbam:
            raise ConfigurationError("use_dbam and use_cbam are mutually exclusive")
        for i, (width, blocks) in enumerate(zip(self.stage_widths, self.blocks_per_stage)):
            if blocks < 1:
                raise ConfigurationError(f"stage {i}: blocks_per_stage must be >= 1, got {blocks}")
            if self.ablation.use_global_branch and width % 4:
                raise ConfigurationError(f"stage {i}: width {width} is not divisible by 4")
            if self.ablation.attention is not None:
                try:
                    effective_reduction(width, self.reduction_ratio)
                except ConfigurationError as exc:
                    raise ConfigurationError(f"stage {i}: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for key in ("stage_widths", "blocks_per_stage", "input_size", "stage_strides"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        d = dict(d)
        d["ablation"] = AblationConfig(**d.get("ablation", {}))
        return cls(**d)


class ForwardOutput(NamedTuple):
    logits: Tensor
    attention_maps: list[AttentionMaps]


class Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, blocks: int, stride: int, config: NetworkConfig):
        super().__init__()
        attention = config.ablation.attention
        self.mabs = nn.ModuleList(
            MAB(
                in_ch if i == 0 else out_ch, out_ch,
                stride=stride if i == 0 else 1,
                reduction=config.reduction_ratio,
                norm=config.norm,
                attention=attention,
            )
            for i in range(blocks)
        )
        self.mcbs: Optional[nn.ModuleList] = None
        self.projection: Optional[nn.Module] = None
        if config.ablation.use_global_branch:
            if stride != 1 or in_ch != out_ch:
                self.projection = nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 1, stride=stride),
                    nn.BatchNorm2d(out_ch) if config.norm else nn.Identity(),
                )
                init_weights(self.projection)
            else:
                self.projection = nn.Identity()
            self.mcbs = nn.ModuleList(MCB(out_ch, norm=config.norm) for _ in range(blocks))
        self.fuse_reversed = False

    def forward(self, x: Tensor, maps: list[AttentionMaps]) -> Tensor:
        local = x
        for mab in self.mabs:
            local, m = mab(local)
            if m is not None:
                maps.append(m)
        if self.mcbs is None:
            return local
        glob = self.projection(x)
        for mcb in self.mcbs:
            glob = mcb(glob)
        return glob + local if self.fuse_reversed else local + glob


class GMENet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        c0 = config.initial_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1),
            nn.BatchNorm2d(c0) if config.norm else nn.Identity(),
            nn.ReLU(),
        )
        stages = []
        in_ch = c0
        for width, blocks, stride in zip(config.stage_widths, config.blocks_per_stage, config.strides):
            stages.append(Stage(in_ch, width, blocks, stride, config))
            in_ch = width
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(in_ch, config.num_classes)
        init_weights(self.stem)
        nn.init.normal_(self.fc.weight, std=0.01)
        nn.init.zeros_(self.fc.bias)

    @property
    def num_attention_blocks(self) -> int:
        return sum(1 for m in self.modules() if isinstance(m, MAB) and m.has_attention)

    def features(self, images: Tensor) -> tuple[Tensor, list[AttentionMaps]]:
        expected = (3, *self.config.input_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValidationError(
                f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(images.shape)}"
            )
        maps: list[AttentionMaps] = []
        x = self.stem(images)
        for stage in self.stages:
            x = stage(x, maps)
        return x, maps

    def forward(self, images: Tensor) -> ForwardOutput:
        x, maps = self.features(images)
        logits = self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))
        return ForwardOutput(logits, maps)


def build_network(config: NetworkConfig, seed: int = 0) -> GMENet:
    """Construct a network with parameters drawn from a private seeded RNG."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GMENet(config)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def count_multiply_accumulates(
    net: nn.Module, input_size: tuple[int, int], in_channels: int = 3
) -> int:
    """Per-image MACs of every Conv2d and Linear layer, from their output shapes.

    conv: C_out * H_out * W_out * C_in * k_h * k_w / groups; linear: in * out.
    Normalization, pooling, activations and elementwise ops are not counted.
    """
    total = 0

    def conv_hook(mod: nn.Conv2d, _inp, out):
        nonlocal total
        kh, kw = mod.kernel_size
        total += (
            out.shape[1] * out.shape[2] * out.shape[3]
            * (mod.in_channels // mod.groups) * kh * kw
        )

    def linear_hook(mod: nn.Linear, _inp, _out):
        nonlocal total
        total += mod.in_features * mod.out_features

    handles = []
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = net.training
    net.eval()
    try:
        param = next(net.parameters(), None)
        dtype = param.dtype if param is not None else torch.get_default_dtype()
        with torch.no_grad():
            net(torch.zeros(1, in_channels, *input_size, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        net.train(was_training)
    return int(total)


def save_checkpoint(
    path: Union[str, Path],
    net: GMENet,
    *,
    seed: int,
    epoch: int,
    metrics: Optional[dict[str, Any]] = None,
    provenance: Optional[dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "metrics": metrics or {},
        "provenance": provenance or {},
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> dict[str, Any]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"{path}: unsupported checkpoint format version {version!r} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    return payload


def network_from_checkpoint(payload: dict[str, Any], dtype: Optional[torch.dtype] = None) -> GMENet:
    net = GMENet(NetworkConfig.from_dict(payload["config"]))
    if dtype is not None:
        net.to(dtype)
    net.load_state_dict(payload["state_dict"])
    return net
