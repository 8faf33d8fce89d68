"""Branch-specific spiking encoders for the CSP (spatial) and DE-map (frequency) inputs."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..diffcore import same_padding
from ..neurons import LIF
from .layers import bn1d, bn2d


class PaddedConv1d(nn.Conv1d):
    """Stride-1 conv1d with explicit "same" padding (left-biased for even kernels).

    Explicit padding keeps the fast backend on even kernels.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__(in_ch, out_ch, kernel)
        self.pad = same_padding(kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(F.pad(x, self.pad))


class ElectrodeConv(nn.Conv2d):
    """Full-extent (C x 1) conv across electrodes, applied to electrode-major maps.

    Takes ``(B', C, F, T)`` (electrode before feature), which is how the temporal
    stage lays its output out, and contracts ``C * F`` in one matmul instead of
    transposing to ``(B', F, C, T)`` first. Parameters keep the Conv2d shape.
    """

    def __init__(self, in_ch: int, out_ch: int, electrodes: int):
        super().__init__(in_ch, out_ch, (electrodes, 1))
        self.electrodes = electrodes

    def folded_weight(self) -> torch.Tensor:
        """Weight as (out, C * F) matching the electrode-major input layout."""
        return self.weight.permute(0, 2, 1, 3).reshape(self.out_channels, -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, f, t = x.shape
        if c * f != self.weight[0].numel():
            raise ValueError(f"expected {self.electrodes} electrodes x {self.in_channels} maps, got {c} x {f}")
        y = torch.matmul(self.folded_weight(), x.reshape(n, c * f, t)) + self.bias[:, None]
        return y.unsqueeze(2)


class SpatialEncoder(nn.Module):
    """Two temporal conv stages then a dual-path full-electrode spatial conv.

    Input ``(T_S, B, C, T)``; output ``(T_S, B, T, D)`` tokens, the sum of the
    two spatial paths' spike maps (values in {0, 1, 2}).
    """

    def __init__(self, channels: int = 64, dim: int = 8, kernel: int = 8):
        super().__init__()
        self.channels = channels
        self.dim = dim
        self.kernel = kernel
        # temporal convs run as conv1d with electrodes folded into the batch;
        # identical to a (1 x k) conv2d, same parameter count
        self.tconv1 = PaddedConv1d(1, 2 * dim, kernel)
        self.tbn1 = bn1d(2 * dim)
        self.tlif1 = LIF()
        self.tconv2 = PaddedConv1d(2 * dim, 4 * dim, 2 * kernel)
        self.tbn2 = bn1d(4 * dim)
        self.tlif2 = LIF()
        self.sconv_a = ElectrodeConv(4 * dim, dim, channels)
        self.sbn_a = bn2d(dim)
        self.slif_a = LIF()
        self.sconv_b = ElectrodeConv(4 * dim, dim, channels)
        self.sbn_b = bn2d(dim)
        self.slif_b = LIF()

    @property
    def min_samples(self) -> int:
        return 2 * self.kernel

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[2] != self.channels:
            raise ValueError(f"expected (T_S, B, {self.channels}, T) input, got {tuple(x.shape)}")
        ts, b, c, t = x.shape
        if t < self.min_samples:
            raise ValueError(f"window of {t} samples is shorter than the minimum {self.min_samples} (2k)")
        y = self.tbn1(self.tconv1(x.reshape(ts * b * c, 1, t)))
        y = self.tlif1(y.reshape(ts, b * c, 2 * self.dim, t))
        y = self.tbn2(self.tconv2(y.reshape(ts * b * c, 2 * self.dim, t)))
        y = self.tlif2(y.reshape(ts, b * c, 4 * self.dim, t))
        y = y.reshape(ts * b, c, 4 * self.dim, t)
        pa = self.slif_a(self.sbn_a(self.sconv_a(y)).reshape(ts, b, self.dim, t))
        pb = self.slif_b(self.sbn_b(self.sconv_b(y)).reshape(ts, b, self.dim, t))
        return (pa + pb).transpose(2, 3)


class FrequencyEncoder(nn.Module):
    """Three dilated 3x3 spiking conv blocks, 2x2 max-pool, 1x1 spiking conv with residual.

    Input ``(T_S, B, 5, H, W)``; output ``(T_S, B, H*W/4, D)`` tokens.
    """

    def __init__(self, in_maps: int = 5, dim: int = 8, size: int = 32):
        super().__init__()
        self.in_maps = in_maps
        self.dim = dim
        self.size = size
        widths = [in_maps, 4 * dim, 2 * dim, dim]
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, 3, padding=2, dilation=2) for a, b in zip(widths, widths[1:]))
        self.bns = nn.ModuleList(bn2d(b) for b in widths[1:])
        self.lifs = nn.ModuleList(LIF() for _ in widths[1:])
        self.pool = nn.MaxPool2d(2, 2)
        self.rconv = nn.Conv2d(dim, dim, 1)
        self.rbn = bn2d(dim)
        self.rlif = LIF()

    @property
    def tokens(self) -> int:
        return (self.size // 2) ** 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or tuple(x.shape[2:]) != (self.in_maps, self.size, self.size):
            raise ValueError(f"expected (T_S, B, {self.in_maps}, {self.size}, {self.size}) input, "
                             f"got {tuple(x.shape)}")
        ts, b = x.shape[:2]
        y = x.reshape(ts * b, *x.shape[2:])
        for conv, bn, lif in zip(self.convs, self.bns, self.lifs):
            y = bn(conv(y))
            y = lif(y.reshape(ts, b, *y.shape[1:])).reshape(ts * b, *y.shape[1:])
        pooled = self.pool(y)
        r = self.rbn(self.rconv(pooled))
        r = self.rlif(r.reshape(ts, b, *r.shape[1:])).reshape(ts * b, *r.shape[1:])
        out = pooled + r
        return out.reshape(ts, b, self.dim, -1).transpose(2, 3)
