"""Adam restricted to a parameter mask."""

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, mask, state, lr, *, beta1=BETA1, beta2=BETA2, eps=EPS):
    """Update ``params[name]`` in place for every ``name`` in ``mask``.

    ``params`` maps names to live arrays. Parameters outside the mask are
    never touched, whatever their gradient.
    """
    mask = list(mask)
    missing = [n for n in mask if n not in params]
    if missing:
        raise KeyError(f"mask names unknown parameters: {missing}")
    no_grad = [n for n in mask if n not in grads]
    if no_grad:
        raise KeyError(f"no gradient for masked parameters: {no_grad}")
    for n in mask:
        if grads[n].shape != params[n].shape:
            raise ValueError(f"gradient shape {grads[n].shape} != parameter shape {params[n].shape} for {n}")
        if n in state.m and state.m[n].shape != params[n].shape:
            raise ValueError(f"optimizer state for {n} does not match the parameter shape")

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for n in mask:
        g = grads[n].astype(np.float64)
        if n not in state.m:
            state.m[n] = np.zeros(g.shape)
            state.v[n] = np.zeros(g.shape)
        m = state.m[n]
        v = state.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p = params[n]
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
    return state
