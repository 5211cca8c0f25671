"""Dual-stream per-modality feature extractors and channel max/mean refinement.

Each modality gets a self-attention ("global") stream and a convolutional
("local") stream; both emit 4 feature maps at strides 2/4/8/16 with channels
32/64/160/256 so that per-scale refined maps line up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHANNELS = (32, 64, 160, 256)
STRIDES = (2, 4, 8, 16)
HEADS = (1, 2, 5, 8)
SR_RATIOS = (8, 4, 2, 1)
DEPTH = 2
DOWNSAMPLE_FACTOR = 16  # input H, W must divide this

STREAMS = ("global", "local")
MODALITIES = ("ir", "vi")


@dataclass
class FeatureMap:
    values: torch.Tensor  # (B, C, H, W)
    stream: str
    scale: int  # 1..4
    modality: str

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ValueError(f"feature map must be 4-D, got {tuple(self.values.shape)}")
        if self.stream not in STREAMS or self.modality not in MODALITIES:
            raise ValueError(f"bad provenance ({self.modality}, {self.stream})")
        if not 1 <= self.scale <= 4:
            raise ValueError(f"scale index must be 1..4, got {self.scale}")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]


@dataclass
class FeaturePyramid:
    maps: list[FeatureMap]  # scales 1..4 for one (modality, stream)

    def __post_init__(self):
        if len(self.maps) != 4 or [m.scale for m in self.maps] != [1, 2, 3, 4]:
            raise ValueError("pyramid must hold scales 1..4 in order")
        for a, b in zip(self.maps, self.maps[1:]):
            ha, wa = a.spatial
            hb, wb = b.spatial
            if (hb, wb) != (ha // 2, wa // 2):
                raise ValueError(f"pyramid spatial sizes must halve: {a.spatial} -> {b.spatial}")


@dataclass
class RefinedMap:
    values: torch.Tensor  # (B, 2, H, W): channel 0 = max plane, channel 1 = mean plane
    stream: str
    scale: int
    modality: str

    def __post_init__(self):
        if self.values.dim() != 4 or self.values.shape[1] != 2:
            raise ValueError(f"refined map must be (B,2,H,W), got {tuple(self.values.shape)}")


def refine(fm: FeatureMap) -> RefinedMap:
    """Collapse channels to a (max, mean) pair of planes."""
    mx = fm.values.amax(dim=1, keepdim=True)
    mean = fm.values.mean(dim=1, keepdim=True)
    return RefinedMap(
        values=torch.cat([mx, mean], dim=1),
        stream=fm.stream,
        scale=fm.scale,
        modality=fm.modality,
    )


def _check_input(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (B,1,H,W) input, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite values in encoder input")
    h, w = x.shape[-2:]
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ValueError(
            f"input {h}x{w} not divisible by {DOWNSAMPLE_FACTOR}; pad the image first"
        )


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch: int, dim: int, kernel: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)
        return self.norm(x), h, w


class EfficientSelfAttention(nn.Module):
    """Multi-head attention with spatially reduced keys/values."""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        assert dim % heads == 0
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).permute(0, 2, 1, 3)
        if self.sr_ratio > 1:
            red = x.permute(0, 2, 1).reshape(b, c, h, w)
            red = self.sr(red).reshape(b, c, -1).permute(0, 2, 1)
            red = self.sr_norm(red)
        else:
            red = x
        kv = self.kv(red).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = x.transpose(1, 2).reshape(b, c, h, w)
        x = self.dwconv(x)
        x = x.flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFeedForward(dim)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.ffn(self.norm2(x), h, w)
        return x


class GlobalStream(nn.Module):
    """Four-stage self-attention stream (overlapping patch embed + attention + feed-forward)."""

    def __init__(self, modality: str, in_ch: int = 1):
        super().__init__()
        self.modality = modality
        dims = (in_ch,) + CHANNELS
        self.embeds = nn.ModuleList(
            [
                OverlapPatchEmbed(dims[i], CHANNELS[i], kernel=7 if i == 0 else 3, stride=2)
                for i in range(4)
            ]
        )
        self.stages = nn.ModuleList(
            [
                nn.ModuleList(
                    [TransformerLayer(CHANNELS[i], HEADS[i], SR_RATIOS[i]) for _ in range(DEPTH)]
                )
                for i in range(4)
            ]
        )
        self.norms = nn.ModuleList([nn.LayerNorm(c) for c in CHANNELS])
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        _check_input(x)
        maps = []
        for i in range(4):
            x, h, w = self.embeds[i](x)
            for layer in self.stages[i]:
                x = layer(x, h, w)
            x = self.norms[i](x)
            x = x.transpose(1, 2).reshape(x.shape[0], CHANNELS[i], h, w)
            maps.append(FeatureMap(values=x, stream="global", scale=i + 1, modality=self.modality))
        return FeaturePyramid(maps=maps)


class ConvBlock(nn.Module):
    """(conv3x3 + BN + ReLU) x2, then 2x max-pool."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, padding_mode="replicate")
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, padding_mode="replicate")
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        return self.pool(x)


class LocalStream(nn.Module):
    """Four-block convolutional stream matching the global stream's shape schedule."""

    def __init__(self, modality: str, in_ch: int = 1):
        super().__init__()
        self.modality = modality
        dims = (in_ch,) + CHANNELS
        self.blocks = nn.ModuleList([ConvBlock(dims[i], CHANNELS[i]) for i in range(4)])

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        _check_input(x)
        maps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            maps.append(FeatureMap(values=x, stream="local", scale=i + 1, modality=self.modality))
        return FeaturePyramid(maps=maps)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)
