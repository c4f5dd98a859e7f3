"""Reusable architecture blocks: CBAM, attention gates, recurrent residual
convolutions, and pyramid input construction.

Tensors follow the torch NCHW convention. Attention modules expose a
``force_identity`` flag that replaces their gate coefficients with ones,
used by tests to verify the multiplicative-gating contract and by
weight-sharing comparisons between gated and ungated model variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadKernel, BadReduction, IncompatibleShape, InvalidConfig

DEFAULT_REDUCTION = 16
DEFAULT_SPATIAL_KERNEL = 7
DEFAULT_RECURRENCE = 2


class ChannelAttention(nn.Module):
    """Channel gate: x * sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))).

    One MLP (1x1 convs, hidden width C/reduction) is shared by the average
    and max pooled descriptors.
    """

    def __init__(self, channels: int, reduction: int = DEFAULT_REDUCTION):
        super().__init__()
        if reduction <= 0 or channels % reduction != 0:
            raise BadReduction(
                f"channels={channels} not divisible by reduction={reduction}")
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, kernel_size=1),
        )
        self.force_identity = False

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.force_identity:
            return x
        return x * self.attention(x)


class SpatialAttention(nn.Module):
    """Spatial gate: x * sigmoid(conv([mean_c(x); max_c(x)]))."""

    def __init__(self, kernel: int = DEFAULT_SPATIAL_KERNEL):
        super().__init__()
        if kernel <= 0 or kernel % 2 == 0:
            raise BadKernel(f"spatial kernel must be odd and positive, got {kernel}")
        self.conv = nn.Conv2d(2, 1, kernel_size=kernel, padding=kernel // 2,
                              bias=False)
        self.force_identity = False

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True),
                            x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.force_identity:
            return x
        return x * self.attention(x)


class CBAM(nn.Module):
    """Sequential channel-then-spatial attention refinement."""

    def __init__(self, channels: int, reduction: int = DEFAULT_REDUCTION,
                 kernel: int = DEFAULT_SPATIAL_KERNEL):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel)

    @property
    def force_identity(self) -> bool:
        return self.channel.force_identity and self.spatial.force_identity

    @force_identity.setter
    def force_identity(self, value: bool):
        self.channel.force_identity = value
        self.spatial.force_identity = value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial(self.channel(x))


class AttentionGate(nn.Module):
    """Additive attention gate over a skip connection.

    alpha = sigmoid(psi(relu(Ws*skip + Wg*resample(gate)))); returns
    skip * alpha. The coarser gate signal is bilinearly resampled to the
    skip's resolution before the addition.
    """

    def __init__(self, skip_channels: int, gate_channels: int,
                 inter_channels: int | None = None):
        super().__init__()
        if inter_channels is None:
            inter_channels = max(skip_channels // 2, 1)
        self.skip_channels = skip_channels
        self.gate_channels = gate_channels
        self.w_skip = nn.Sequential(
            nn.Conv2d(skip_channels, inter_channels, kernel_size=1),
            nn.BatchNorm2d(inter_channels))
        self.w_gate = nn.Sequential(
            nn.Conv2d(gate_channels, inter_channels, kernel_size=1),
            nn.BatchNorm2d(inter_channels))
        self.psi = nn.Sequential(
            nn.Conv2d(inter_channels, 1, kernel_size=1),
            nn.BatchNorm2d(1),
            nn.Sigmoid())
        self.force_identity = False

    def attention(self, skip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        if skip.shape[1] != self.skip_channels:
            raise IncompatibleShape(
                f"skip has {skip.shape[1]} channels, gate expects "
                f"{self.skip_channels}")
        if gate.shape[1] != self.gate_channels:
            raise IncompatibleShape(
                f"gate has {gate.shape[1]} channels, expected "
                f"{self.gate_channels}")
        if gate.shape[-2:] != skip.shape[-2:]:
            gate = F.interpolate(gate, size=skip.shape[-2:], mode="bilinear",
                                 align_corners=False)
        return self.psi(F.relu(self.w_skip(skip) + self.w_gate(gate)))

    def forward(self, skip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        if self.force_identity:
            return skip
        return skip * self.attention(skip, gate)


class CBAMAttentionGate(nn.Module):
    """CBAM refinement of the skip features followed by the attention gate."""

    def __init__(self, skip_channels: int, gate_channels: int,
                 reduction: int = DEFAULT_REDUCTION,
                 kernel: int = DEFAULT_SPATIAL_KERNEL):
        super().__init__()
        self.cbam = CBAM(skip_channels, reduction, kernel)
        self.gate = AttentionGate(skip_channels, gate_channels)

    @property
    def force_identity(self) -> bool:
        return self.cbam.force_identity and self.gate.force_identity

    @force_identity.setter
    def force_identity(self, value: bool):
        self.cbam.force_identity = value
        self.gate.force_identity = value

    def forward(self, skip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        return self.gate(self.cbam(skip), gate)


class RecurrentLayer(nn.Module):
    """One recurrent convolution: y = conv(x), then t refinements
    y = conv(x + y) reusing the same weights."""

    def __init__(self, channels: int, t: int = DEFAULT_RECURRENCE):
        super().__init__()
        if t < 0:
            raise InvalidConfig(f"recurrence steps must be >= 0, got {t}")
        self.t = t
        self.conv = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        for _ in range(self.t):
            y = self.conv(x + y)
        return y


class RecurrentResidualBlock(nn.Module):
    """Two stacked recurrent layers around a residual 1x1 projection:
    out = x' + RCL(RCL(x')), x' = proj(x). Parameter count does not
    depend on t because recurrence reuses each layer's weights."""

    def __init__(self, in_channels: int, filters: int,
                 t: int = DEFAULT_RECURRENCE):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, filters, kernel_size=1)
        self.body = nn.Sequential(RecurrentLayer(filters, t),
                                  RecurrentLayer(filters, t))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        projected = self.proj(x)
        return projected + self.body(projected)


def pyramid_inputs(image: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Average-pooled copies of the input at factors 2^1 .. 2^levels."""
    if levels < 1:
        raise InvalidConfig(f"levels must be >= 1, got {levels}")
    return [F.avg_pool2d(image, kernel_size=2 ** k) for k in range(1, levels + 1)]


_REQUIRED_HYPERPARAMS = {
    "cbam": ("reduction", "kernel"),
    "attention_gate": (),
    "cbam_gate": ("reduction", "kernel"),
    "rr_block": ("t",),
    "residual": (),
    "pyramid_input": ("levels",),
}


@dataclass
class BlockSpec:
    """Declarative block description used by model configuration."""

    kind: str
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _REQUIRED_HYPERPARAMS:
            raise InvalidConfig(f"unknown block kind {self.kind!r}")
        missing = [k for k in _REQUIRED_HYPERPARAMS[self.kind]
                   if k not in self.hyperparams]
        if missing:
            raise InvalidConfig(
                f"block {self.kind!r} missing hyperparams: {missing}")
