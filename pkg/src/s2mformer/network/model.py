"""Full dual-branch model: encoders, S2M block and classification head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import nn

from ..diffcore import DEFAULT_DTYPE, Rng, init_parameters
from ..neurons import CPLIF, _MultiStep
from .encoders import FrequencyEncoder, SpatialEncoder
from .mixers import MPTM, SCSA, SGCM, SMSC

BRANCHES = ("both", "spatial", "frequency")


@dataclass
class ModelConfig:
    dim: int = 8
    time_steps: int = 4
    window: int = 256
    channels: int = 64
    kernel: int = 8
    map_size: int = 32
    bands: int = 5
    scsa_scale: float | None = None  # None -> 1/sqrt(dim)
    mptm_alpha: float = 0.5
    shuffle_groups: int = 2
    sgcm_stem_kernel: int = 1
    branches: str = "both"
    fusion: bool = True  # False drops both SGCM+MPTM pairs
    classes: int = 2

    def __post_init__(self):
        if self.branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if self.dim % self.shuffle_groups:
            raise ValueError(f"dim {self.dim} not divisible by shuffle_groups {self.shuffle_groups}")
        if self.window < 2 * self.kernel:
            raise ValueError(f"window of {self.window} samples shorter than 2k = {2 * self.kernel}")

    @property
    def spatial_tokens(self) -> int:
        return self.window

    @property
    def frequency_tokens(self) -> int:
        return (self.map_size // 2) ** 2

    def token_trace(self) -> dict[str, list[int]]:
        """Expected per-branch token counts through the block."""
        out = {}
        for name, n in (("spatial", self.spatial_tokens), ("frequency", self.frequency_tokens)):
            if self.branches in ("both", name):
                out[name] = [n, n * 3 // 2, n * 9 // 4] if self.uses_fusion else [n]
        return out

    @property
    def uses_fusion(self) -> bool:
        return self.fusion and self.branches == "both"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class S2MBlock(nn.Module):
    """SCSA -> SGCM -> MPTM -> SMSC -> SGCM -> MPTM per branch, mirrored."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        names = [b for b in ("spatial", "frequency") if cfg.branches in ("both", b)]
        self.names = names
        self.scsa = nn.ModuleDict({n: SCSA(cfg.dim, cfg.scsa_scale) for n in names})
        self.smsc = nn.ModuleDict({n: SMSC(cfg.dim, shuffle_groups=cfg.shuffle_groups) for n in names})
        self.fusion = cfg.uses_fusion
        if self.fusion:
            self.sgcm1 = SGCM(cfg.dim, cfg.sgcm_stem_kernel)
            self.sgcm2 = SGCM(cfg.dim, cfg.sgcm_stem_kernel)
            self.mptm1 = nn.ModuleDict({n: MPTM(cfg.dim, cfg.mptm_alpha) for n in names})
            self.mptm2 = nn.ModuleDict({n: MPTM(cfg.dim, cfg.mptm_alpha) for n in names})
        self.trace: dict[str, list[int]] | None = None

    def _note(self, xs: dict[str, torch.Tensor]) -> None:
        if self.trace is not None:
            for n, x in xs.items():
                self.trace.setdefault(n, []).append(x.shape[2])

    def _mix(self, xs: dict[str, torch.Tensor], sgcm: SGCM, mptm: nn.ModuleDict) -> dict[str, torch.Tensor]:
        fused = sgcm(torch.cat([xs[n] for n in self.names], dim=2))
        return {n: mptm[n](xs[n], fused) for n in self.names}

    def forward(self, xs: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        if self.trace is not None:
            self.trace.clear()
        self._note(xs)
        xs = {n: self.scsa[n](x) + x for n, x in xs.items()}
        if self.fusion:
            xs = self._mix(xs, self.sgcm1, self.mptm1)
            self._note(xs)
        xs = {n: self.smsc[n](x) + x for n, x in xs.items()}
        if self.fusion:
            xs = self._mix(xs, self.sgcm2, self.mptm2)
            self._note(xs)
        return xs


class S2MFormer(nn.Module):
    """Dual-branch spiking classifier.

    ``forward(e_s, e_f)`` takes static embeddings ``e_s`` (B, C, T) and
    ``e_f`` (B, 5, H, W); both are replicated over ``time_steps`` before
    encoding. Either may be ``None`` for a single-branch config.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        if cfg.branches in ("both", "spatial"):
            self.spatial = SpatialEncoder(cfg.channels, cfg.dim, cfg.kernel)
        if cfg.branches in ("both", "frequency"):
            self.frequency = FrequencyEncoder(cfg.bands, cfg.dim, cfg.map_size)
        self.block = S2MBlock(cfg)
        self.head = nn.Linear(cfg.dim, cfg.classes)

    def encode(self, e_s: torch.Tensor | None, e_f: torch.Tensor | None) -> dict[str, torch.Tensor]:
        ts = self.cfg.time_steps
        xs = {}
        if "spatial" in self.block.names:
            if e_s is None:
                raise ValueError("spatial branch needs e_s")
            xs["spatial"] = self.spatial(e_s.unsqueeze(0).expand(ts, *e_s.shape))
        if "frequency" in self.block.names:
            if e_f is None:
                raise ValueError("frequency branch needs e_f")
            xs["frequency"] = self.frequency(e_f.unsqueeze(0).expand(ts, *e_f.shape))
        return xs

    def readout(self, xs: dict[str, torch.Tensor]) -> torch.Tensor:
        tokens = torch.cat([xs[n] for n in self.block.names], dim=2)
        return self.head(tokens.mean(dim=(0, 2)))

    def forward(self, e_s: torch.Tensor | None, e_f: torch.Tensor | None = None) -> torch.Tensor:
        return self.readout(self.block(self.encode(e_s, e_f)))

    def first_layers(self) -> list[str]:
        """Encoder entry layers that see real-valued input."""
        out = []
        if "spatial" in self.block.names:
            out.append("spatial.tconv1")
        if "frequency" in self.block.names:
            out.append("frequency.convs.0")
        return out

    def neurons(self) -> dict[str, _MultiStep]:
        return {n: m for n, m in self.named_modules() if isinstance(m, _MultiStep)}

    def cplif_neurons(self) -> dict[str, CPLIF]:
        return {n: m for n, m in self.named_modules() if isinstance(m, CPLIF)}

    def set_recording(self, on: bool) -> None:
        for m in self.modules():
            if hasattr(m, "record") and isinstance(getattr(m, "record"), bool):
                m.record = on
        self.block.trace = {} if on else None


def build_model(cfg: ModelConfig | None = None, seed: int = 200, dtype=DEFAULT_DTYPE) -> S2MFormer:
    model = S2MFormer(cfg)
    init_parameters(model, Rng(seed))
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_branch_parameters(cfg: ModelConfig | None = None) -> dict[str, int]:
    """Trainable parameters for the full model and each single-branch variant."""
    cfg = cfg or ModelConfig()
    out = {}
    for b in BRANCHES:
        out[b] = count_parameters(S2MFormer(dataclasses.replace(cfg, branches=b)))
    return out
