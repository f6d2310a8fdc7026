"""Conditional normalizing flow for time-domain speech enhancement."""

from .audio import AudioBuffer, mix_at_snr, mu_compress, mu_expand, read_wav, write_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .flow import FlowConfig, FlowModel, enhance, nll_loss
from .metrics import global_snr, segmental_snr
from .training import TrainConfig, train

__all__ = [
    "AudioBuffer", "FlowConfig", "FlowModel", "TrainConfig",
    "enhance", "global_snr", "load_checkpoint", "mix_at_snr", "mu_compress", "mu_expand",
    "nll_loss", "read_wav", "save_checkpoint", "segmental_snr", "train", "write_wav",
]
__version__ = "0.1.0"
