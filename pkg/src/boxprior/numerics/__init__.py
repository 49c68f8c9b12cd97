"""Dense matrix kernels, a reverse-mode tape, layers and gradient checking."""

from boxprior.numerics.gradcheck import GradReport, grad_check
from boxprior.numerics.layers import (
    AttentionHead,
    AttentionParams,
    MlpLayer,
    MlpParams,
    init_attention,
    init_mlp,
    mlp_forward,
    multihead_attention,
)
from boxprior.numerics.ops import (
    cosine_similarity,
    cross_entropy,
    kl_divergence,
    lovasz_softmax,
    sigmoid,
    softmax_rows,
)
from boxprior.numerics.tensor import Tensor, parameter

__all__ = [
    "AttentionHead",
    "AttentionParams",
    "GradReport",
    "MlpLayer",
    "MlpParams",
    "Tensor",
    "cosine_similarity",
    "cross_entropy",
    "grad_check",
    "init_attention",
    "init_mlp",
    "kl_divergence",
    "lovasz_softmax",
    "mlp_forward",
    "multihead_attention",
    "parameter",
    "sigmoid",
    "softmax_rows",
]
