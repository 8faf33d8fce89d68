"""Single-pass LIF recurrence kernels over a (T_S, M) slab."""
from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True)
def lif_forward(x, tau, v_threshold, v_reset, spikes, hs):
    steps, m = x.shape
    decay = 1.0 - 1.0 / tau
    rest = v_reset / tau
    v = np.full(m, v_reset, dtype=x.dtype)
    for t in range(steps):
        for j in range(m):
            h = v[j] * decay + rest + x[t, j]
            hs[t, j] = h
            s = 1.0 if h >= v_threshold else 0.0
            spikes[t, j] = s
            v[j] = h + (v_reset - h) * s


@numba.njit(cache=True)
def lif_backward(grad_s, hs, tau, v_threshold, v_reset, alpha, grad_x):
    steps, m = hs.shape
    decay = 1.0 - 1.0 / tau
    k = math.pi / 2.0 * alpha
    gv = np.zeros(m, dtype=hs.dtype)
    for t in range(steps - 1, -1, -1):
        for j in range(m):
            h = hs[t, j]
            u = h - v_threshold
            sg = alpha / (2.0 * (1.0 + (k * u) * (k * u)))
            keep = 0.0 if u >= 0 else 1.0
            g = grad_s[t, j] * sg + gv[j] * (keep + (v_reset - h) * sg)
            grad_x[t, j] = g
            gv[j] = g * decay


def forward(x: np.ndarray, tau, v_threshold, v_reset):
    spikes = np.empty_like(x)
    hs = np.empty_like(x)
    lif_forward(x, tau, v_threshold, v_reset, spikes, hs)
    return spikes, hs


def backward(grad_s: np.ndarray, hs: np.ndarray, tau, v_threshold, v_reset, alpha):
    grad_x = np.empty_like(hs)
    lif_backward(grad_s, hs, tau, v_threshold, v_reset, alpha, grad_x)
    return grad_x
