from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoders import FrequencyEncoder, SpatialEncoder
from .layers import channel_shuffle, channel_unshuffle
from .mixers import MPTM, SCSA, SGCM, SMSC
from .model import ModelConfig, S2MBlock, S2MFormer, build_model, count_branch_parameters, count_parameters

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "FrequencyEncoder", "SpatialEncoder", "channel_shuffle", "channel_unshuffle",
    "MPTM", "SCSA", "SGCM", "SMSC",
    "ModelConfig", "S2MBlock", "S2MFormer", "build_model", "count_branch_parameters", "count_parameters",
]
