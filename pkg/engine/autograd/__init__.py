# Tensor core: float64 arrays with a define-by-run autodiff tape
from engine.autograd.conv import conv2d, max_pool2d, upsample2d
from engine.autograd.tensor import (
    Graph,
    Tensor,
    add,
    backward,
    concat,
    div,
    elementwise,
    exp,
    expand,
    log,
    log_softmax,
    logsumexp,
    masked_fill,
    matmul,
    max_,
    mean,
    mul,
    negate,
    pairwise_sqdist,
    reduce,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    sum_,
    transpose,
)
