"""Minimal float64 tensor substrate with exact reverse-mode gradients."""

from .checkpoint import CheckpointError, checksum
from .gradcheck import grad_check
from .optim import Adam, adam_step
from .tensor import (
    MASK_VALUE,
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat_rows,
    cosine_similarity,
    embedding_lookup,
    exp,
    getitem,
    info_nce,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mean_all,
    mean_rows,
    mul,
    relu,
    reshape,
    row_softmax,
    scale,
    scaled_dot_attention,
    sub,
    sum_all,
    transpose,
)


def uniform_init(rng, shape, fan, gain: float = 1.0):
    """Seeded uniform(-gain/sqrt(fan), gain/sqrt(fan)) initialisation."""
    bound = gain / fan ** 0.5
    return rng.uniform(-bound, bound, size=shape)
