"""Minimal numpy transformer kernel with hand-written backward passes."""
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .functional import (
    embedding_backward,
    embedding_lookup,
    gelu,
    layer_norm,
    multi_head_attention,
    patchify,
    self_attention,
    softmax,
)
from .gradcheck import grad_check, relative_error
from .layers import (
    Attention,
    Embedding,
    Encoder,
    LayerNorm,
    Linear,
    Module,
    ParamSpec,
    TransformerLayer,
    ViT,
    init_array,
)
from .optim import OptimizerState, adam_step, lr_at

__all__ = [
    "Attention", "Embedding", "Encoder", "LayerNorm", "Linear", "Module", "OptimizerState",
    "ParamSpec", "TransformerLayer", "ViT", "adam_step", "embedding_backward",
    "embedding_lookup", "gelu", "grad_check", "init_array", "layer_norm", "load_checkpoint",
    "lr_at", "multi_head_attention", "patchify", "read_header", "relative_error",
    "save_checkpoint", "self_attention", "softmax",
]
