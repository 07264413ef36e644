"""RL fine-tuning of mask-based speech enhancement against a MOS reward."""
__version__ = "0.1.0"

from .objective import HyperParams
from .policy import Policy, ToyMaskNet, enhance, load_policy, make_policy
from .tfsignal import FrameSpec, Waveform, istft, stft
from .trainer import TrainConfig, finetune, pretrain_sft, run_ablation

__all__ = [
    "FrameSpec", "HyperParams", "Policy", "ToyMaskNet", "TrainConfig", "Waveform",
    "enhance", "finetune", "istft", "load_policy", "make_policy", "pretrain_sft",
    "run_ablation", "stft",
]
