"""LIF and channel-wise parametric LIF (CPLIF) neurons with an arctangent surrogate.

Multi-step modules take inputs with the time-step axis first, ``(T_S, ...)``,
and run the discrete dynamics over it from a fresh membrane state. CPLIF's
channel axis is the last axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from . import _lif_kernels

DEFAULT_TAU = 2.0
DEFAULT_V_THRESHOLD = 1.0
DEFAULT_V_RESET = 0.0
DEFAULT_ALPHA = 5.0


def heaviside(v: torch.Tensor) -> torch.Tensor:
    # fires at exactly zero
    return (v >= 0).to(v.dtype)


def atan_surrogate_grad(v: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    return alpha / (2.0 * (1.0 + (math.pi / 2.0 * alpha * v) ** 2))


class AtanSpikeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, v: torch.Tensor, alpha: float) -> torch.Tensor:
        ctx.save_for_backward(v)
        ctx.alpha = alpha
        return heaviside(v)

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (v,) = ctx.saved_tensors
        return grad_out * atan_surrogate_grad(v, ctx.alpha), None


def spike(v: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    return AtanSpikeFunction.apply(v, alpha)


def surrogate_atan(v: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward spikes and the surrogate derivative evaluated at ``v``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return heaviside(v), atan_surrogate_grad(v, alpha)


@dataclass(frozen=True)
class LifParams:
    tau: float = DEFAULT_TAU
    v_threshold: float = DEFAULT_V_THRESHOLD
    v_reset: float = DEFAULT_V_RESET

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")


@dataclass
class CplifParams:
    raw_weights: torch.Tensor
    beta: torch.Tensor
    v_threshold: float = DEFAULT_V_THRESHOLD
    v_reset: float = DEFAULT_V_RESET

    @classmethod
    def uniform(cls, channels: int, **kw) -> "CplifParams":
        return cls(torch.zeros(channels, dtype=torch.float64), torch.zeros(channels, dtype=torch.float64), **kw)

    @property
    def tau(self) -> torch.Tensor:
        """Channel time constants tau_l = softmax(raw_weights), each in (0, 1)."""
        return torch.softmax(self.raw_weights, dim=0)


@dataclass
class NeuronState:
    v: torch.Tensor

    @classmethod
    def fresh(cls, like: torch.Tensor, v_reset: float = DEFAULT_V_RESET) -> "NeuronState":
        return cls(torch.full_like(like, v_reset))


def _fire_and_reset(h: torch.Tensor, v_threshold: float, v_reset: float, alpha: float):
    s = spike(h - v_threshold, alpha)
    v = h * (1.0 - s) + v_reset * s
    return s, v


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError("non-finite neuron input")


def lif_charge(v: torch.Tensor, x: torch.Tensor, tau: float, v_reset: float) -> torch.Tensor:
    return v - (v - v_reset) / tau + x


def cplif_charge(v: torch.Tensor, x: torch.Tensor, tau_l: torch.Tensor, beta: torch.Tensor,
                 v_reset: float) -> torch.Tensor:
    # input is scaled by 1/tau_l here, unlike LIF where it enters unscaled
    return v + (x - (v - v_reset)) / tau_l + beta


def lif_step(params: LifParams, state: NeuronState, x: torch.Tensor,
             alpha: float = DEFAULT_ALPHA) -> tuple[torch.Tensor, NeuronState]:
    if x.shape != state.v.shape:
        raise ValueError(f"input shape {tuple(x.shape)} != state shape {tuple(state.v.shape)}")
    _check_finite(x)
    h = lif_charge(state.v, x, params.tau, params.v_reset)
    s, v = _fire_and_reset(h, params.v_threshold, params.v_reset, alpha)
    return s, NeuronState(v)


def cplif_step(params: CplifParams, state: NeuronState, x: torch.Tensor,
               alpha: float = DEFAULT_ALPHA) -> tuple[torch.Tensor, NeuronState]:
    c = params.raw_weights.shape[0]
    if x.shape[-1] != c:
        raise ValueError(f"channel extent {x.shape[-1]} != CPLIF channels {c}")
    if x.shape != state.v.shape:
        raise ValueError(f"input shape {tuple(x.shape)} != state shape {tuple(state.v.shape)}")
    _check_finite(x)
    h = cplif_charge(state.v, x, params.tau.to(x.dtype), params.beta.to(x.dtype), params.v_reset)
    s, v = _fire_and_reset(h, params.v_threshold, params.v_reset, alpha)
    return s, NeuronState(v)


class _MultiStep(nn.Module):
    """Shared T_S loop. Subclasses provide ``charge``."""

    def __init__(self, v_threshold: float, v_reset: float, alpha: float):
        super().__init__()
        self.v_threshold = v_threshold
        self.v_reset = v_reset
        self.alpha = alpha
        # last pre-reset potentials, kept only when record_potential is set
        self.record_potential = False
        self.last_potential: torch.Tensor | None = None

    def charge(self, v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] == 0:
            raise ValueError("empty time-step sequence")
        v = torch.full_like(x[0], self.v_reset)
        spikes = []
        hs = []
        for t in range(x.shape[0]):
            h = self.charge(v, x[t])
            s, v = _fire_and_reset(h, self.v_threshold, self.v_reset, self.alpha)
            spikes.append(s)
            if self.record_potential:
                hs.append(h.detach())
        if self.record_potential:
            self.last_potential = torch.stack(hs)
        return torch.stack(spikes)


class FusedLifFunction(torch.autograd.Function):
    """Whole T_S LIF recurrence in one node; saves only the pre-spike potentials.

    Backward is hand-written BPTT with the same surrogate and the same
    (non-detached) reset path as the step-by-step graph.
    """

    @staticmethod
    def forward(ctx, x, tau, v_threshold, v_reset, alpha):
        flat = x.detach().contiguous().reshape(x.shape[0], -1)
        spikes, hs = _lif_kernels.forward(flat.numpy(), tau, v_threshold, v_reset)
        spikes = torch.from_numpy(spikes).reshape(x.shape)
        hs = torch.from_numpy(hs).reshape(x.shape)
        ctx.save_for_backward(hs)
        ctx.consts = (tau, v_threshold, v_reset, alpha)
        ctx.mark_non_differentiable(hs)
        ctx.set_materialize_grads(False)
        return spikes, hs

    @staticmethod
    def backward(ctx, grad_s, _grad_h):
        (hs,) = ctx.saved_tensors
        tau, v_threshold, v_reset, alpha = ctx.consts
        if grad_s is None:
            return None, None, None, None, None
        g = grad_s.contiguous().reshape(hs.shape[0], -1)
        grad_x = _lif_kernels.backward(g.numpy(), hs.reshape(hs.shape[0], -1).numpy(),
                                       tau, v_threshold, v_reset, alpha)
        return torch.from_numpy(grad_x).reshape(hs.shape), None, None, None, None


class LIF(_MultiStep):
    def __init__(self, tau: float = DEFAULT_TAU, v_threshold: float = DEFAULT_V_THRESHOLD,
                 v_reset: float = DEFAULT_V_RESET, alpha: float = DEFAULT_ALPHA, fused: bool = True):
        super().__init__(v_threshold, v_reset, alpha)
        LifParams(tau, v_threshold, v_reset)
        self.tau = tau
        self.fused = fused

    def charge(self, v, x):
        return lif_charge(v, x, self.tau, self.v_reset)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.fused:
            return super().forward(x)
        if x.shape[0] == 0:
            raise ValueError("empty time-step sequence")
        _check_finite(x)
        spikes, hs = FusedLifFunction.apply(x, self.tau, self.v_threshold, self.v_reset, self.alpha)
        if self.record_potential:
            self.last_potential = hs.detach()
        return spikes

    def extra_repr(self) -> str:
        return f"tau={self.tau}, v_threshold={self.v_threshold}, v_reset={self.v_reset}"


class CPLIF(_MultiStep):
    """Channel-wise parametric LIF; channels live on the last axis."""

    def __init__(self, channels: int, v_threshold: float = DEFAULT_V_THRESHOLD,
                 v_reset: float = DEFAULT_V_RESET, alpha: float = DEFAULT_ALPHA):
        super().__init__(v_threshold, v_reset, alpha)
        self.channels = channels
        # equal logits: tau_l uniform at 1/C
        self.raw_weights = nn.Parameter(torch.zeros(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    @property
    def tau_l(self) -> torch.Tensor:
        return torch.softmax(self.raw_weights, dim=0)

    def charge(self, v, x):
        return cplif_charge(v, x, self.tau_l, self.beta, self.v_reset)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"channel extent {x.shape[-1]} != CPLIF channels {self.channels}")
        return super().forward(x)

    def params(self) -> CplifParams:
        return CplifParams(self.raw_weights.detach(), self.beta.detach(), self.v_threshold, self.v_reset)

    def extra_repr(self) -> str:
        return f"channels={self.channels}, v_threshold={self.v_threshold}"


def run_sequence(neuron, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Run a neuron over ``T_S`` inputs from a fresh state and stack the spikes.

    ``neuron`` is a ``LifParams``/``CplifParams`` (functional path) or a
    multi-step module.
    """
    if len(inputs) == 0:
        raise ValueError("empty input sequence")
    if isinstance(neuron, nn.Module):
        return neuron(torch.stack(list(inputs)))
    step = lif_step if isinstance(neuron, LifParams) else cplif_step
    state = NeuronState.fresh(inputs[0], neuron.v_reset)
    out = []
    for x in inputs:
        s, state = step(neuron, state, x)
        out.append(s)
    return torch.stack(out)
