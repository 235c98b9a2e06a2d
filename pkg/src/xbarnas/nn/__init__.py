from .model import Weights, apply_network, fold_batchnorm, forward, init_weights
from .netspec import (
    BlockItem,
    ConvItem,
    LayerSpec,
    LinearItem,
    NetworkSpec,
    format_network,
    load_network,
    parse_network,
    resnet_spec,
)
from .optim import Adam, sgd_step
from .quant import FixedPointFormat, dequantize, quantize
from .tensor import Tape, Tensor, backward

__all__ = [
    "Adam",
    "BlockItem",
    "ConvItem",
    "FixedPointFormat",
    "LayerSpec",
    "LinearItem",
    "NetworkSpec",
    "Tape",
    "Tensor",
    "Weights",
    "apply_network",
    "backward",
    "dequantize",
    "fold_batchnorm",
    "format_network",
    "forward",
    "init_weights",
    "load_network",
    "parse_network",
    "quantize",
    "resnet_spec",
    "sgd_step",
]
