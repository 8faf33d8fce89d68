"""Theoretical inference cost: per-layer MACs, firing rates, SOPs and energy.

Counts follow the usual conventions: a conv costs ``out_elems * kernel_elems *
in_channels / groups`` MACs, a linear ``out * in`` per row, and batch norm is
assumed folded into the preceding layer. All counts are per sample and include
the T_S unrolled steps. Layers fed with real-valued input are priced at E_MAC;
spike-fed layers are priced at E_AC times their SOPs (``fr_in * flops``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import torch
from torch import nn

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


def _pj_to_mj(ops: float, pj: float) -> float:
    return ops * pj * 1e-9


def energy_ann(flops: float | Iterable[float], e_mac_pj: float = E_MAC_PJ) -> float:
    """E_MAC * total MACs, in mJ."""
    total = flops if isinstance(flops, (int, float)) else sum(flops)
    return _pj_to_mj(total, e_mac_pj)


def energy_snn(first_layer_flops: float | Iterable[float], sops: float | Iterable[float],
               e_ac_pj: float = E_AC_PJ, e_mac_pj: float = E_MAC_PJ) -> float:
    """MAC-priced real-input layers plus AC-priced synaptic operations, in mJ."""
    if e_ac_pj <= 0:
        raise ValueError("e_ac_pj must be positive")
    macs = first_layer_flops if isinstance(first_layer_flops, (int, float)) else sum(first_layer_flops)
    acs = sops if isinstance(sops, (int, float)) else sum(sops)
    return _pj_to_mj(macs, e_mac_pj) + _pj_to_mj(acs, e_ac_pj)


def is_binary(x: torch.Tensor) -> bool:
    return bool(((x == 0) | (x == 1)).all())


def firing_rate(spikes: torch.Tensor) -> float:
    """Mean spike count over time steps and neurons."""
    if spikes.numel() == 0:
        raise ValueError("empty spike tensor")
    if not is_binary(spikes):
        raise ValueError("firing_rate needs a binary spike tensor")
    return float(spikes.double().mean())


def sops(flops: float, fr: float) -> float:
    if not 0.0 <= fr <= 1.0:
        raise ValueError(f"firing rate {fr} outside [0, 1]")
    return fr * flops


def back_solve_e_ac(rows: Iterable[tuple[float, float, float]], e_mac_pj: float = E_MAC_PJ) -> float:
    """Least-squares E_AC from (mac_G, sop_G, energy_mJ) triples."""
    num = den = 0.0
    for mac, sop, energy in rows:
        num += sop * (energy - e_mac_pj * mac)
        den += sop * sop
    if den == 0:
        raise ValueError("need at least one row with nonzero SOPs")
    return num / den


def conv_flops(module: nn.Module, out: torch.Tensor) -> int:
    """MACs for one conv call, summed over the leading (batch) axis."""
    kernel = math.prod(module.kernel_size)
    return out.numel() * kernel * module.in_channels // module.groups


def linear_flops(module: nn.Linear, out: torch.Tensor) -> int:
    return out.numel() * module.in_features


@dataclass
class LayerCost:
    name: str
    flops: float
    firing_rate_in: float | None
    sops: float
    is_first_encoder_layer: bool = False

    @property
    def mac_priced(self) -> bool:
        return self.firing_rate_in is None


@dataclass
class NeuronRecord:
    name: str
    neurons: int  # units per time step and sample
    firing_rate: float


@dataclass
class EnergyReport:
    layers: list[LayerCost]
    neurons: list[NeuronRecord] = field(default_factory=list)
    e_mac_pj: float = E_MAC_PJ
    e_ac_pj: float = E_AC_PJ

    @property
    def mac_flops(self) -> float:
        return sum(l.flops for l in self.layers if l.mac_priced)

    @property
    def total_flops(self) -> float:
        return sum(l.flops for l in self.layers)

    @property
    def total_sops(self) -> float:
        return sum(l.sops for l in self.layers if not l.mac_priced)

    @property
    def total_flops_g(self) -> float:
        return self.total_flops / 1e9

    @property
    def total_sops_g(self) -> float:
        return self.total_sops / 1e9

    @property
    def energy_mj(self) -> float:
        return energy_snn(self.mac_flops, self.total_sops, self.e_ac_pj, self.e_mac_pj)

    @property
    def aggregate_firing_rate(self) -> float:
        n = sum(r.neurons for r in self.neurons)
        return sum(r.firing_rate * r.neurons for r in self.neurons) / n if n else 0.0

    def to_text(self) -> str:
        lines = []
        for l in self.layers:
            fr = "none" if l.firing_rate_in is None else repr(l.firing_rate_in)
            lines.append(f"layer name={l.name} flops={l.flops!r} fr_in={fr} sops={l.sops!r} "
                         f"first={int(l.is_first_encoder_layer)}")
        for r in self.neurons:
            lines.append(f"neuron name={r.name} units={r.neurons} fr={r.firing_rate!r}")
        lines.append(f"total flops_G={self.total_flops_g!r} mac_flops_G={self.mac_flops / 1e9!r} "
                     f"sops_G={self.total_sops_g!r} fr={self.aggregate_firing_rate!r} "
                     f"e_mac_pJ={self.e_mac_pj!r} e_ac_pJ={self.e_ac_pj!r} energy_mJ={self.energy_mj!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EnergyReport":
        layers, neurons, consts = [], [], {}
        for line in text.splitlines():
            if not line.strip():
                continue
            kind, *pairs = line.split()
            kv = dict(p.split("=", 1) for p in pairs)
            if kind == "layer":
                fr = None if kv["fr_in"] == "none" else float(kv["fr_in"])
                layers.append(LayerCost(kv["name"], float(kv["flops"]), fr, float(kv["sops"]),
                                        kv["first"] == "1"))
            elif kind == "neuron":
                neurons.append(NeuronRecord(kv["name"], int(kv["units"]), float(kv["fr"])))
            elif kind == "total":
                consts = {"e_mac_pj": float(kv["e_mac_pJ"]), "e_ac_pj": float(kv["e_ac_pJ"])}
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        return cls(layers, neurons, **consts)


SYNAPTIC = (nn.Conv1d, nn.Conv2d, nn.Linear)


class _Recorder:
    def __init__(self, first_layers: set[str]):
        self.first_layers = first_layers
        self.layers: list[LayerCost] = []
        self.neurons: list[NeuronRecord] = []
        self.batch = 1

    def add_layer(self, name: str, flops: int, inp: torch.Tensor | None) -> None:
        per_sample = flops / self.batch
        if inp is not None and is_binary(inp):
            # exact integer arithmetic for spikes * flops / slots
            count = int(inp.sum().item())
            fr = count / inp.numel()
            layer_sops = count * flops / (inp.numel() * self.batch)
            self.layers.append(LayerCost(name, per_sample, fr, layer_sops, name in self.first_layers))
        else:
            self.layers.append(LayerCost(name, per_sample, None, 0.0, name in self.first_layers))

    def synapse_hook(self, name: str):
        def hook(module, args, out):
            x = args[0]
            flops = linear_flops(module, out) if isinstance(module, nn.Linear) else conv_flops(module, out)
            self.add_layer(name, flops, x)
        return hook

    def neuron_hook(self, name: str):
        def hook(module, args, out):
            self.neurons.append(NeuronRecord(name, out[0].numel() // self.batch, firing_rate(out)))
        return hook

    def attention_hook(self, name: str):
        def hook(module, args, out):
            rec = module.last
            q, k = rec["q"], rec["k"]
            ts, b, n, d = q.shape
            flops = ts * b * n * d * d
            # K^T V is driven by K's spikes; Q (KV) by Q's
            self.add_layer(f"{name}.kv", flops, k)
            self.add_layer(f"{name}.qkv", flops, q)
        return hook


def profile(model: nn.Module, batch: tuple, e_ac_pj: float = E_AC_PJ,
            first_layers: Iterable[str] | None = None) -> EnergyReport:
    """Run one inference pass on ``batch`` and return its per-sample cost report.

    ``first_layers`` names the layers counted as the MAC-priced encoder
    entries; for the full model these are the first spatial temporal conv and
    the first frequency conv.
    """
    from .neurons import _MultiStep
    from .network.mixers import SCSA

    if first_layers is None:
        first_layers = getattr(model, "first_layers", lambda: [])()
    rec = _Recorder(set(first_layers))
    sizes = [x.shape[0] for x in batch if isinstance(x, torch.Tensor)]
    if not sizes:
        raise ValueError("profile needs at least one input tensor")
    rec.batch = sizes[0]
    handles = []
    recording = {}
    for name, m in model.named_modules():
        if isinstance(m, SYNAPTIC):
            handles.append(m.register_forward_hook(rec.synapse_hook(name)))
        elif isinstance(m, _MultiStep):
            handles.append(m.register_forward_hook(rec.neuron_hook(name)))
        elif isinstance(m, SCSA):
            recording[m] = m.record
            m.record = True
            handles.append(m.register_forward_hook(rec.attention_hook(name)))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(*batch)
    finally:
        for h in handles:
            h.remove()
        for m, flag in recording.items():
            m.record = flag
        model.train(was_training)
    return EnergyReport(rec.layers, rec.neurons, e_ac_pj=e_ac_pj)
