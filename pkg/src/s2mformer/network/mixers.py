"""Spike-driven mixers of the S2M block: SCSA, SMSC, SGCM and MPTM.

All modules take and return token tensors ``(T_S, B, N, D)``. Inputs are
membrane-potential-valued (real) tensors and every module starts with a
CPLIF head neuron; outputs are potentials again so residual shortcuts add
real values.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from ..neurons import CPLIF, LIF
from .layers import TokenConv, channel_shuffle, depthwise


class SCSA(nn.Module):
    """Spiking channel-wise self-attention with a D x D score per time step."""

    def __init__(self, dim: int, scale: float | None = None, kernel: int = 3):
        super().__init__()
        self.dim = dim
        self.scale = 1.0 / math.sqrt(dim) if scale is None else scale
        self.head = CPLIF(dim)
        self.w_in = depthwise(dim, kernel)
        self.lif_in = LIF()
        self.w_q, self.w_k, self.w_v = (depthwise(dim, kernel) for _ in range(3))
        self.lif_q, self.lif_k, self.lif_v = LIF(), LIF(), LIF()
        self.lif_attn = LIF()
        self.w_out = depthwise(dim, kernel)
        self.lif_out = LIF()
        self.record = False
        self.last: dict[str, torch.Tensor] = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xs = self.lif_in(self.w_in(self.head(x)))
        q = self.lif_q(self.w_q(xs))
        k = self.lif_k(self.w_k(xs))
        v = self.lif_v(self.w_v(xs))
        # K^T V is (D x D) per time step and sample; Q (N x D) is right-multiplied by it
        scores = k.transpose(-1, -2) @ v
        u = self.lif_attn((q @ scores) * self.scale)
        if self.record:
            self.last = {"q": q.detach(), "k": k.detach(), "v": v.detach(), "scores": scores.detach()}
        return self.lif_out(self.w_out(u))


class SMSC(nn.Module):
    """Spiking multi-scale separable conv: PW expand to 3D, three DW paths (k=1,3,5), sum, shuffle."""

    def __init__(self, dim: int, kernels: tuple[int, ...] = (1, 3, 5), shuffle_groups: int = 2):
        super().__init__()
        if dim % shuffle_groups:
            raise ValueError(f"dim {dim} is not divisible by {shuffle_groups} shuffle groups")
        self.dim = dim
        self.kernels = kernels
        self.shuffle_groups = shuffle_groups
        self.head = CPLIF(dim)
        self.pw = TokenConv(dim, len(kernels) * dim, 1)
        self.lifs = nn.ModuleList(LIF() for _ in kernels)
        self.paths = nn.ModuleList(depthwise(dim, k) for k in kernels)

    def mix(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-shuffle sum of the depthwise paths."""
        parts = torch.split(self.pw(self.head(x)), self.dim, dim=-1)
        return sum(path(lif(p)) for p, lif, path in zip(parts, self.lifs, self.paths))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return channel_shuffle(self.mix(x), self.shuffle_groups)


class SGCM(nn.Module):
    """Spiking gated channel mixer over the concatenated branch tokens."""

    def __init__(self, dim: int, stem_kernel: int = 1, dw_kernel: int = 3):
        super().__init__()
        self.dim = dim
        self.head = CPLIF(dim)
        self.fc_in = nn.Linear(dim, 2 * dim)
        self.lif_in = LIF()
        self.stem = TokenConv(2 * dim, 2 * dim, stem_kernel)
        self.lif_q1, self.lif_k1 = LIF(), LIF()
        self.dw_q, self.dw_k = depthwise(dim, dw_kernel), depthwise(dim, dw_kernel)
        self.lif_q2, self.lif_k2 = LIF(), LIF()
        self.lif_gate = LIF()
        self.out_conv = TokenConv(dim, dim, stem_kernel)
        self.lif_out = LIF()
        self.fc_out = nn.Linear(dim, dim)
        self.record = False
        self.last: dict[str, torch.Tensor] = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"SGCM expects {self.dim} channels, got {x.shape[-1]}")
        h = self.stem(self.lif_in(self.fc_in(self.head(x))))
        xq, xk = torch.split(h, self.dim, dim=-1)
        xq = self.lif_q2(self.dw_q(self.lif_q1(xq)))
        xk = self.lif_k2(self.dw_k(self.lif_k1(xk)))
        gate = self.lif_gate(xq.sum(dim=-1, keepdim=True))  # (T_S, B, N, 1)
        gated = gate * xk
        if self.record:
            self.last = {"gate": gate.detach(), "x_q": xq.detach()}
        return self.fc_out(self.lif_out(self.out_conv(gated)))


class MPTM(nn.Module):
    """Membrane-potential-aware token mixer: N tokens in, 3N/2 out."""

    def __init__(self, dim: int, alpha: float = 0.5, pool_kernel: int = 3, pool_stride: int = 2):
        super().__init__()
        self.dim = dim
        self.alpha = alpha
        self.lif = LIF()
        self.fusion_head = CPLIF(dim)
        self.pool = nn.MaxPool1d(pool_kernel, pool_stride, padding=pool_kernel // 2)
        self.record = False
        self.last: dict[str, torch.Tensor] = {}

    def guidance(self, g_summary: torch.Tensor, f_summary: torch.Tensor, n: int) -> torch.Tensor:
        n_g = math.floor(self.alpha * n)
        return torch.cat([g_summary.expand(-1, -1, n_g, -1), f_summary.expand(-1, -1, n - n_g, -1)], dim=2)

    def forward(self, x_g: torch.Tensor, x_fusion: torch.Tensor) -> torch.Tensor:
        ts, b, n, d = x_g.shape
        if n % 2:
            raise ValueError(f"MPTM needs an even token count, got {n}")
        s_g = self.lif(x_g)
        g_summary = s_g.mean(dim=2, keepdim=True)
        f_summary = self.fusion_head(x_fusion).mean(dim=2, keepdim=True)
        r = self.guidance(g_summary, f_summary, n)
        fused = s_g * r + x_g
        pooled = self.pool(x_g.reshape(ts * b, n, d).transpose(1, 2)).transpose(1, 2).reshape(ts, b, -1, d)
        if self.record:
            self.last = {"guidance": r.detach()}
        return torch.cat([fused, pooled], dim=2)
