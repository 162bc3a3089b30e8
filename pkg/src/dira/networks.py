"""Model components: U-Net style encoder/decoder, projection heads, patch
adversary, and twin (momentum / weight-sharing) coupling.

Conv paths use GroupNorm so behaviour is batch-size independent and fully
deterministic in both train and eval mode; BatchNorm appears only inside the
MLP heads where the contrastive recipes expect it.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 1
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (2, 2, 2)
    feature_dim: int = 128          # d_y, pooled global feature
    groupnorm_groups: int = 8

    def validate(self) -> None:
        if len(self.stage_channels) != len(self.stage_strides):
            raise ValueError("stage_channels and stage_strides must have equal length")
        if not self.stage_channels:
            raise ValueError("at least one stage is required")
        if self.feature_dim < 8:
            raise ValueError(f"feature_dim must be >= 8, got {self.feature_dim}")
        total = math.prod(self.stage_strides)
        if self.input_size % total:
            raise ValueError(f"stage strides {self.stage_strides} must divide input_size {self.input_size}")
        if self.input_size // total < 2:
            raise ValueError(
                f"final map of input_size {self.input_size} after strides {self.stage_strides} "
                "is smaller than 2x2")


class EncoderFeatures(NamedTuple):
    y: torch.Tensor                  # [B, d_y]
    skips: list[torch.Tensor]        # per-stage maps before downsampling
    final_map: torch.Tensor          # [B, C_last, h, w] before pooling


def _num_groups(channels: int, preferred: int) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


def _conv_block(in_ch: int, out_ch: int, groups: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.GroupNorm(_num_groups(out_ch, groups), out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.GroupNorm(_num_groups(out_ch, groups), out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Three-stage (by default) conv encoder.  ``forward`` keeps each stage's
    pre-downsample map as a skip for the decoder and pools the final map into
    the global feature y."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        blocks, downs = [], []
        in_ch = spec.in_channels
        for ch, stride in zip(spec.stage_channels, spec.stage_strides):
            blocks.append(_conv_block(in_ch, ch, spec.groupnorm_groups))
            downs.append(nn.Sequential(
                nn.Conv2d(ch, ch, 3, stride=stride, padding=1),
                nn.GroupNorm(_num_groups(ch, spec.groupnorm_groups), ch),
                nn.ReLU(inplace=True),
            ))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.downs = nn.ModuleList(downs)
        self.fc = nn.Linear(in_ch, spec.feature_dim)

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        skips = []
        h = x
        for block, down in zip(self.blocks, self.downs):
            h = block(h)
            skips.append(h)
            h = down(h)
        y = self.fc(h.mean(dim=(2, 3)))
        return EncoderFeatures(y=y, skips=skips, final_map=h)


class Decoder(nn.Module):
    """Mirror of the encoder with skip concatenation.  ``trunk`` returns the
    last feature map at input resolution; ``forward`` adds a 1x1 conv plus
    sigmoid so restored images live in [0, 1]."""

    def __init__(self, spec: EncoderSpec, out_channels: int | None = None):
        super().__init__()
        spec.validate()
        self.spec = spec
        chs = list(spec.stage_channels)
        strides = list(spec.stage_strides)
        ups, convs = [], []
        in_ch = chs[-1]
        for i in reversed(range(len(chs))):
            ups.append(nn.ConvTranspose2d(in_ch, chs[i], kernel_size=strides[i], stride=strides[i]))
            convs.append(_conv_block(2 * chs[i], chs[i], spec.groupnorm_groups))
            in_ch = chs[i]
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(chs[0], out_channels or spec.in_channels, 1)

    def trunk(self, final_map: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        n = len(self.ups)
        if len(skips) != n:
            raise ValueError(f"expected {n} skip tensors, got {len(skips)}")
        h = final_map
        for step, i in enumerate(reversed(range(n))):
            h = self.ups[step](h)
            if h.shape[-2:] != skips[i].shape[-2:]:
                raise ValueError(
                    f"skip {i} resolution {tuple(skips[i].shape[-2:])} does not match "
                    f"upsampled map {tuple(h.shape[-2:])}")
            h = self.convs[step](torch.cat([h, skips[i]], dim=1))
        return h

    def forward(self, final_map: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.sigmoid(self.head(self.trunk(final_map, skips)))


class MLPHead(nn.Module):
    """Stack of Linear layers; hidden layers get BatchNorm1d + ReLU when
    ``batchnorm`` is set.  No norm or activation on the output."""

    def __init__(self, in_dim: int, widths: Sequence[int], batchnorm: bool = True):
        super().__init__()
        if not widths:
            raise ValueError("widths must name at least the output dim")
        layers: list[nn.Module] = []
        prev = in_dim
        for w in widths[:-1]:
            layers.append(nn.Linear(prev, w))
            if batchnorm:
                layers.append(nn.BatchNorm1d(w))
            layers.append(nn.ReLU(inplace=True))
            prev = w
        layers.append(nn.Linear(prev, widths[-1]))
        self.net = nn.Sequential(*layers)
        self.out_dim = int(widths[-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def batch_stats_forward(mlp: MLPHead, x: torch.Tensor) -> torch.Tensor:
    """Forward through an MLP head with its BatchNorm layers normalizing by
    the statistics of ``x`` itself, without touching their running buffers.

    Collapse monitoring needs this: with running statistics a freshly
    initialized head maps a near-constant feature batch to a near-constant
    embedding batch, which reads as collapse regardless of training health.
    """
    if x.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    out = x
    for mod in mlp.net:
        if isinstance(mod, nn.BatchNorm1d):
            out = F.batch_norm(out, None, None, mod.weight, mod.bias,
                               training=True, momentum=0.0, eps=mod.eps)
        else:
            out = mod(out)
    return out


class Adversary(nn.Module):
    """Patch-level real/fake critic: exactly four stride-2 3x3 convs, then a
    global average over the final response map to one logit per image."""

    def __init__(self, in_channels: int = 1, channels: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        if len(channels) != 3:
            raise ValueError("adversary takes exactly three hidden channel sizes")
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c3, 1, 3, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(1, 2, 3))


@dataclass
class TwinCoupling:
    """How the second branch f_xi relates to the online branch f_theta."""

    mode: str = "momentum"        # "momentum" | "shared" | "none"
    momentum: float = 0.999

    def validate(self) -> None:
        if self.mode not in ("momentum", "shared", "none"):
            raise ValueError(f"coupling mode must be momentum|shared|none, got {self.mode!r}")
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")


def twin_update(coupling: TwinCoupling,
                online: Iterable[torch.Tensor] | nn.Module,
                target: Iterable[torch.Tensor] | nn.Module) -> None:
    """EMA update of the target branch: xi <- m*xi + (1-m)*theta, elementwise
    and in place.  m=1 leaves xi untouched, m=0 copies theta.  Shared or
    absent twins are a no-op (they alias theta by construction)."""
    coupling.validate()
    if coupling.mode != "momentum":
        return
    theta = online.parameters() if isinstance(online, nn.Module) else online
    xi = target.parameters() if isinstance(target, nn.Module) else target
    m = coupling.momentum
    with torch.no_grad():
        for p_theta, p_xi in zip(theta, xi, strict=True):
            if p_theta.shape != p_xi.shape:
                raise ValueError(f"parameter shape mismatch: {tuple(p_theta.shape)} vs {tuple(p_xi.shape)}")
            p_xi.copy_(p_xi * m + p_theta * (1.0 - m))


def make_momentum_copy(module: nn.Module) -> nn.Module:
    """Frozen deep copy used as the momentum branch; excluded from
    optimizers and gradient flow."""
    twin = copy.deepcopy(module)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def l2_normalize(z: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise unit normalization."""
    return F.normalize(z, dim=1, eps=eps)
