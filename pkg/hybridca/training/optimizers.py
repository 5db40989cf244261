""" SGD with momentum and AdamW, both with decoupled weight decay.

Steps are pure: they return new weight and state dicts and leave their inputs untouched.
"""
from dataclasses import dataclass, field

import numpy as np

from hybridca.core.errors import DimensionError, ParameterError

Weights = dict[str, np.ndarray]


@dataclass
class SGDState:
    velocity: Weights = field(default_factory=dict)


@dataclass
class AdamWState:
    m: Weights = field(default_factory=dict)
    v: Weights = field(default_factory=dict)
    step: int = 0


def _check_aligned(weights: Weights, grads: Weights):
    if weights.keys() != grads.keys():
        raise DimensionError(
            f"Gradients do not cover the weights: {sorted(weights.keys() ^ grads.keys())}"
        )
    for name, w in weights.items():
        if grads[name].shape != w.shape:
            raise DimensionError(
                f"Gradient for '{name}' has shape {grads[name].shape}, weight has {w.shape}"
            )


def sgd_step(
    weights: Weights,
    grads: Weights,
    state: SGDState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[Weights, SGDState]:
    """w <- w - lr*wd*w; v <- momentum*v + g; w <- w - lr*v"""
    if lr < 0 or weight_decay < 0 or not 0 <= momentum < 1:
        raise ParameterError(f"Invalid sgd settings lr={lr} momentum={momentum} wd={weight_decay}")
    _check_aligned(weights, grads)
    new_weights, velocity = dict(), dict()
    for name, w in weights.items():
        v = momentum * state.velocity.get(name, np.zeros_like(w)) + grads[name]
        decayed = w - lr * weight_decay * w
        new_weights[name] = decayed - lr * v
        velocity[name] = v
    return new_weights, SGDState(velocity=velocity)


def adamw_step(
    weights: Weights,
    grads: Weights,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[Weights, AdamWState]:
    b1, b2 = betas
    if lr < 0 or weight_decay < 0 or not (0 <= b1 < 1 and 0 <= b2 < 1) or not eps > 0:
        raise ParameterError(f"Invalid adamw settings lr={lr} betas={betas} eps={eps} wd={weight_decay}")
    _check_aligned(weights, grads)
    step = state.step + 1
    new_weights, m_new, v_new = dict(), dict(), dict()
    for name, w in weights.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1 - b2) * g**2
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        decayed = w - lr * weight_decay * w
        new_weights[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_weights, AdamWState(m=m_new, v=v_new, step=step)
