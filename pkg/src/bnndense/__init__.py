"""Binary neural network toolkit for dense prediction."""
from .complexity import LayerCostSpec, attention_speedup, model_report, upsample_speedup
from .estimator import BinarySegmenter
from .network import ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .tensorcore import BitPlane, binary_conv2d, pack_signs, unpack, xnor_popcount_dot
from .train import TrainConfig, evaluate, train

__all__ = [
    "BitPlane", "BinarySegmenter", "LayerCostSpec", "ModelConfig", "TrainConfig",
    "attention_speedup", "binary_conv2d", "build_model", "evaluate", "forward", "load_checkpoint",
    "model_report", "pack_signs", "save_checkpoint", "train", "unpack", "upsample_speedup",
    "xnor_popcount_dot",
]
