from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import (
    GRU,
    BiGRU,
    Embedding,
    GATLayer,
    LayerNorm,
    Linear,
    MLP,
    MultiHeadAttention,
    ParamStore,
    TransformerBlock,
    TransformerStack,
    sinusoidal_positions,
)
from .optim import AdamW, AdamWState, adamw_step
from .tensor import Tape, Tensor, as_tensor, no_grad

__all__ = [
    "ops", "Tape", "no_grad", "Tensor", "as_tensor", "ParamStore", "Linear", "Embedding", "LayerNorm",
    "MLP", "MultiHeadAttention", "TransformerBlock", "TransformerStack", "GRU", "BiGRU",
    "GATLayer", "sinusoidal_positions", "AdamW", "AdamWState", "adamw_step", "grad_check",
    "save_checkpoint", "load_checkpoint",
]
