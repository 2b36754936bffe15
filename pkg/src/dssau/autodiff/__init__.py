from .ops import (
    IndexTensor,
    adaptive_avg_pool,
    avg_pool_region,
    conv2d,
    gather,
    gelu,
    layer_norm,
    matmul,
    relu,
    resize_bilinear,
    softmax,
    topk,
    topk_indices,
    upsample_bilinear,
)
from .optim import Adam
from .tensor import (
    Function,
    Tensor,
    as_tensor,
    clip,
    concat,
    default_dtype,
    exp,
    is_grad_enabled,
    log,
    no_grad,
    set_default_dtype,
)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    loss.backward()
