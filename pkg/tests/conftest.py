import pytest
import torch

from s2mformer.network import ModelConfig, build_model

torch.set_default_dtype(torch.float64)

TINY = dict(dim=8, window=32, channels=8, kernel=4, map_size=8)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg)


def tiny_inputs(cfg, batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    e_s = torch.randn(batch, cfg.channels, cfg.window, generator=g, dtype=torch.float64)
    e_f = torch.randn(batch, cfg.bands, cfg.map_size, cfg.map_size, generator=g, dtype=torch.float64)
    return e_s, e_f
