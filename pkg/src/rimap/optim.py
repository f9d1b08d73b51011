import numpy as np

from .errors import ShapeError


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place.

    ``t`` is the step count *after* this update (1 on the first step). It may be
    a scalar or an array broadcastable against ``param`` so that sparse voxel
    state can carry one step counter per voxel.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {m.shape}, v {v.shape}"
        )
    dtype = param.dtype
    m *= dtype.type(beta1)
    m += dtype.type(1.0 - beta1) * grad
    v *= dtype.type(beta2)
    v += dtype.type(1.0 - beta2) * grad * grad
    t = np.asarray(t)
    bc1 = (1.0 - beta1 ** t).astype(dtype)
    bc2 = (1.0 - beta2 ** t).astype(dtype)
    param -= dtype.type(lr) * (m / bc1) / (np.sqrt(v / bc2) + dtype.type(eps))
