"""Pure numpy implementations of the hot kernels.

This is the fallback backend and the reference the compiled extension is
checked against. All kernels take float32 C-contiguous arrays and return
float32 arrays; adam_update mutates its buffers in place.
"""

import numpy as np

NAME = "python"


def matmul(a, b, ta=False, tb=False):
    """2-D matrix product with optional transposes, out = op(a) @ op(b)."""
    lhs = a.T if ta else a
    rhs = b.T if tb else b
    return np.matmul(lhs, rhs)


def linear_forward(x, w, b):
    """Dense layer forward, out = x @ w.T + b with w shaped [out, in]."""
    return np.matmul(x, w.T) + b


def leaky_relu(x, slope):
    return np.where(x > 0, x, x * np.float32(slope))


def leaky_relu_grad(g, x, slope):
    """Elementwise g * (x > 0 ? 1 : slope); x decides the branch."""
    return np.where(x > 0, g, g * np.float32(slope))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, t):
    """Bias-corrected Adam step with classic L2-coupled weight decay.

    Mutates p, m, v in place. Returns 0 on success and 1 if the gradient
    (including the decay term) contains a non-finite entry, in which case
    nothing is modified.
    """
    gd = g + np.float32(weight_decay) * p if weight_decay else g
    if not np.all(np.isfinite(gd)):
        return 1
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    m *= b1
    m += (np.float32(1.0) - b1) * gd
    v *= b2
    v += (np.float32(1.0) - b2) * gd * gd
    mhat = m / np.float32(1.0 - beta1**t)
    vhat = v / np.float32(1.0 - beta2**t)
    p -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))
    return 0
