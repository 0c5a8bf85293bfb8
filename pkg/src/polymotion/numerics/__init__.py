from .checkpoint import config_hash, load_checkpoint, params_hash, save_checkpoint
from .nn import (
    Conv1d,
    ConvTranspose1d,
    DecoderLayer,
    Embedding,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    ResBlock1d,
)
from .ops import (
    attention,
    causal_mask,
    conv1d,
    conv_transpose1d,
    cosine_similarity,
    cross_entropy,
    embedding,
    key_padding_mask,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    mse,
    softmax,
    upsample_repeat,
)
from .optim import Adam, clip_grad_norm
from .tensor import (
    Tensor,
    concat,
    exp,
    gelu,
    log,
    matmul,
    no_grad,
    relu,
    reshape,
    sqrt,
    square,
    stack,
    stop_gradient,
    straight_through,
    tanh,
    transpose,
)
