""" Continuous modern Hopfield network and the Hopfield attention block.

Stored patterns are the columns of ``X`` (shape ``[d, n]``); a state pattern ``p``
has shape ``[d]``. With inverse temperature ``beta`` the energy is

    E(p) = -lse(beta, X^T p) + 1/2 p^T p + beta^-1 log n + 1/2 M^2

where M is the largest pattern norm. The update ``p <- X softmax(beta X^T p)``
never increases E.
"""
from dataclasses import dataclass
import math
from typing import Optional

import numpy as np
from loguru import logger as log

from hybridca.core.autodiff import (
    Tensor,
    as_tensor,
    concat,
    dropout,
    lse,
    matmul,
    reshape,
    softmax,
    transpose,
)
from hybridca.core.errors import DimensionError, InvariantViolation, ParameterError
from hybridca.nn.attention import AttentionHeadWeights, Mixer, MultiHeadWeights

ENERGY_SLACK = 1e-9


@dataclass(frozen=True)
class HopfieldLayerWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    beta: float
    n_steps: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if self.n_steps < 1:
            raise ParameterError(f"n_steps must be at least 1, got {self.n_steps}")
        if self.W_Q.shape[1] != self.W_K.shape[1]:
            raise DimensionError(
                f"Query width {self.W_Q.shape[1]} must equal key width {self.W_K.shape[1]}"
            )

    @classmethod
    def from_head(
        cls, head: AttentionHeadWeights, beta: Optional[float] = None, n_steps: int = 1
    ) -> "HopfieldLayerWeights":
        """Reuse attention head projections; beta defaults to 1/sqrt(d_q)."""
        if beta is None:
            beta = 1.0 / math.sqrt(head.d_q)
        return cls(W_Q=head.W_Q, W_K=head.W_K, W_V=head.W_V, beta=beta, n_steps=n_steps)


def _check_patterns(x: Tensor, p: Tensor, beta: float):
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"Pattern matrix must be [d, n] with n >= 1, got {x.shape}")
    if p.shape != (x.shape[0],):
        raise DimensionError(f"State pattern {p.shape} must be ({x.shape[0]},)")


def energy(x, p, beta: float) -> float:
    x, p = as_tensor(x), as_tensor(p)
    _check_patterns(x, p, beta)
    d, n = x.shape
    scores = reshape(matmul(transpose(x), reshape(p, (d, 1))), (n,))
    largest_norm = float(np.linalg.norm(x.data, axis=0).max())
    return (
        -lse(beta, scores).item()
        + 0.5 * float(p.data @ p.data)
        + math.log(n) / beta
        + 0.5 * largest_norm**2
    )


def update(x, p, beta: float) -> Tensor:
    """One retrieval step: X softmax(beta X^T p)."""
    x, p = as_tensor(x), as_tensor(p)
    _check_patterns(x, p, beta)
    d, n = x.shape
    scores = reshape(matmul(transpose(x), reshape(p, (d, 1))), (1, n))
    weights = softmax(scores, 1.0 / beta)
    return reshape(matmul(x, transpose(weights)), (d,))


def retrieve(
    x, p0, beta: float, max_iter: int = 50, tol: float = 1e-6
) -> tuple[Tensor, int]:
    """Iterate ``update`` until the state moves less than ``tol`` (max-norm).

    Returns the final state and the number of updates that moved it; the update
    that confirms convergence is not counted. Raises ``InvariantViolation`` if an
    update increases the energy by more than ``ENERGY_SLACK``.
    """
    if max_iter < 1:
        raise ParameterError(f"max_iter must be at least 1, got {max_iter}")
    if not tol > 0:
        raise ParameterError(f"tol must be positive, got {tol}")
    x, p = as_tensor(x), as_tensor(p0)
    e = energy(x, p, beta)
    for iteration in range(max_iter):
        p_next = update(x, p, beta)
        e_next = energy(x, p_next, beta)
        if e_next > e + ENERGY_SLACK:
            raise InvariantViolation(
                f"Energy increased from {e} to {e_next} at iteration {iteration}"
            )
        if np.max(np.abs(p_next.data - p.data)) < tol:
            log.debug(f"Hopfield retrieval converged after {iteration} updates")
            return p_next, iteration
        p, e = p_next, e_next
    log.debug(f"Hopfield retrieval stopped at max_iter={max_iter}")
    return p, max_iter


def hopfield_layer_forward(
    queries_src: Tensor,
    memory: Tensor,
    w: HopfieldLayerWeights,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Hopfield attention: n_steps - 1 query refinements in key space, then a readout.

    Each refinement is ``Q <- softmax(beta Q K^T) K``; the output is
    ``softmax(beta Q K^T) V``. With n_steps = 1 and beta = 1/sqrt(d_q) this is
    exactly scaled dot-product attention. Inverted dropout on the readout applies
    only when both ``rng`` and a positive ``dropout_rate`` are given.
    """
    p = w.W_Q.shape[0]
    if queries_src.shape[-1] != p or memory.shape[-1] != p:
        raise DimensionError(
            f"Entity dims {queries_src.shape[-1]}/{memory.shape[-1]} must equal projection input {p}"
        )
    temperature = 1.0 / w.beta
    Q = matmul(queries_src, w.W_Q)
    K = matmul(memory, w.W_K)
    V = matmul(memory, w.W_V)
    K_T = transpose(K)
    for _ in range(w.n_steps - 1):
        Q = matmul(softmax(matmul(Q, K_T), temperature), K)
    return dropout(matmul(softmax(matmul(Q, K_T), temperature), V), dropout_rate, rng)


def hopfield_multi_head(
    queries_src: Tensor,
    memory: Tensor,
    w: MultiHeadWeights,
    beta: Optional[float] = None,
    n_steps: int = 1,
) -> Tensor:
    Z = [
        hopfield_layer_forward(
            queries_src, memory, HopfieldLayerWeights.from_head(head, beta, n_steps)
        )
        for head in w.heads
    ]
    return matmul(concat(Z, axis=-1), w.W_O)


def hopfield_mixer(beta: Optional[float] = None, n_steps: int = 1) -> Mixer:
    """A layer attention block that runs Hopfield heads in place of attention heads."""

    def mix(queries_src: Tensor, memory: Tensor, w: MultiHeadWeights) -> Tensor:
        return hopfield_multi_head(queries_src, memory, w, beta, n_steps)

    return mix
