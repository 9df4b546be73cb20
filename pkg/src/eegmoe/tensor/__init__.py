from .core import Tensor, as_tensor, backward, no_grad
from .linalg import fft, ifft, rfft, rfft_magnitude, svd_topk
from .nn import LayerNorm, Linear, MLP, Module, Parameter
from .ops import DimensionError, matmul, softmax
from .rng import RngStream

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad",
    "fft", "ifft", "rfft", "rfft_magnitude", "svd_topk",
    "LayerNorm", "Linear", "MLP", "Module", "Parameter",
    "DimensionError", "matmul", "softmax", "RngStream",
]
