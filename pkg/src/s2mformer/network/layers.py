"""Token-layout building blocks.

Token tensors are ``(T_S, B, N, D)``: time step, batch, token, channel.
Convolutions over the token axis fold ``T_S * B`` into the batch, so batch
norm statistics are taken jointly over time steps and samples.
"""
from __future__ import annotations

import torch
from torch import nn

from ..diffcore import BN_EPS, BN_MOMENTUM


def bn1d(channels: int) -> nn.BatchNorm1d:
    return nn.BatchNorm1d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def bn2d(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


class TokenConv(nn.Module):
    """Conv1d over tokens (odd kernel, same padding) with optional BN."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 1, groups: int = 1,
                 bias: bool = True, bn: bool = True):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("token convolutions need an odd kernel")
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, padding=kernel // 2, groups=groups, bias=bias)
        self.bn = bn1d(out_ch) if bn else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ts, b, n, d = x.shape
        y = self.conv(x.reshape(ts * b, n, d).transpose(1, 2))
        if self.bn is not None:
            y = self.bn(y)
        return y.transpose(1, 2).reshape(ts, b, n, -1)


def depthwise(channels: int, kernel: int, bn: bool = True) -> TokenConv:
    return TokenConv(channels, channels, kernel, groups=channels, bn=bn)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Parameter-free shuffle of the last (channel) axis."""
    d = x.shape[-1]
    if d % groups:
        raise ValueError(f"{d} channels not divisible into {groups} shuffle groups")
    return x.reshape(*x.shape[:-1], groups, d // groups).transpose(-1, -2).reshape(x.shape)


def channel_unshuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    d = x.shape[-1]
    return channel_shuffle(x, d // groups)
