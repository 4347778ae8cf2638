"""1-bit neural network engine.

Learnable additive shifts steer the sign distribution of activations and
weights before binarization (replacing multiplicative channel scales),
training runs through straight-through estimators on a from-scratch
reverse-mode tape, and inference runs exact bit-packed XNOR+popcount
convolution.
"""

from .autograd import Parameter, SteKind, Tape, Var
from .binarize import (AsdFactor, AsdForm, DasdHead, ScalingFactors, SignStats,
                       WsdFactor, asd_apply, dasd_apply, scale_binarize_baseline,
                       sign_stats, wsd_apply)
from .bitkernel import BitTensor, PackedConvPlan, bitconv2d, make_plan, pack, unpack, xnor_popcount_dot
from .models import BinPolicy, Model, ModelSpec, PRESETS, build, forward
from .tensor import ConvGeometry, Tensor, conv2d_ref
from .trainer import OptimConfig, evaluate, export_packed, load_checkpoint, load_packed, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AsdFactor", "AsdForm", "BinPolicy", "BitTensor", "ConvGeometry", "DasdHead",
    "Model", "ModelSpec", "OptimConfig", "PRESETS", "PackedConvPlan", "Parameter",
    "ScalingFactors", "SignStats", "SteKind", "Tape", "Tensor", "Var", "WsdFactor",
    "asd_apply", "bitconv2d", "build", "conv2d_ref", "dasd_apply", "evaluate",
    "export_packed", "forward", "load_checkpoint", "load_packed", "make_plan",
    "pack", "save_checkpoint", "scale_binarize_baseline", "sign_stats", "train",
    "unpack", "wsd_apply", "xnor_popcount_dot",
]
