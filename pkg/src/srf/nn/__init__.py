"""Differentiable layer set, encoders, and the SRBF/SPERF/PBRF models."""

from . import autograd
from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import fourier_encode, sh_encode
from .model import (InferResult, Model, ModelConfig, encode_distance,
                    encode_spectrum, infer_field)

__all__ = [
    "autograd", "Tensor", "no_grad", "fourier_encode", "sh_encode",
    "Model", "ModelConfig", "InferResult", "infer_field",
    "encode_spectrum", "encode_distance", "save_checkpoint", "load_checkpoint",
]
