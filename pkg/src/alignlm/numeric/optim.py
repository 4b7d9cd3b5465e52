"""AdamW with decoupled weight decay."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params, **hyper):
        state = cls(**hyper)
        for name in params.trainable_names():
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        return state


def adamw_step(params, grads, state):
    """One AdamW update, in place; returns ``(params, state)`` for chaining.

    The decay is applied first as ``p *= 1 - lr * weight_decay`` and is not
    routed through the moment estimates.
    """
    trainable = params.trainable_names()
    if set(grads) != set(trainable):
        missing = sorted(set(trainable) - set(grads))
        extra = sorted(set(grads) - set(trainable))
        raise ValueError(f"gradients must cover the trainable set; missing={missing} extra={extra}")
    for name in trainable:
        if name not in state.m:
            raise ValueError(f"optimizer state not initialised for {name!r}")
        if grads[name].shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} != {params[name].shape}")
        if state.m[name].shape != params[name].shape:
            raise ShapeError(f"{name}: moment shape {state.m[name].shape} != {params[name].shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    decay = 1.0 - state.lr * state.weight_decay
    for name in trainable:
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        params[name] = params[name] * decay - state.lr * update
    return params, state
