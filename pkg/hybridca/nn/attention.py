""" Scaled dot-product attention, multi-head attention and Transformer layers.

Entity sets are tensors shaped ``[..., n, p]``: n entities of dimension p, with
optional leading batch axes. Layers are post-norm: every sub-block output passes
dropout, is added to its input and then layer-normalised.
"""
from dataclasses import dataclass, field
import math
from typing import Callable, Mapping, Optional

import numpy as np
from loguru import logger as log

from hybridca.core.autodiff import (
    Tensor,
    add,
    concat,
    dropout,
    expand,
    layer_norm,
    matmul,
    relu,
    softmax,
    transpose,
)
from hybridca.core.errors import DimensionError, ParameterError

EntitySet = Tensor
""" Tensor[..., n, p]; rows are the entities """

Mixer = Callable[[Tensor, Tensor, "MultiHeadWeights"], Tensor]
""" The attention block of a layer: (queries_src, memory, weights) -> Tensor[..., n_q, d] """


@dataclass(frozen=True)
class AttentionHeadWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor

    def __post_init__(self):
        if self.W_Q.shape[1] != self.W_K.shape[1]:
            raise DimensionError(
                f"Query width {self.W_Q.shape[1]} must equal key width {self.W_K.shape[1]}"
            )
        if not self.W_Q.shape[0] == self.W_K.shape[0] == self.W_V.shape[0]:
            raise DimensionError("W_Q, W_K and W_V must share the entity dimension")

    @property
    def d_q(self) -> int:
        return self.W_Q.shape[1]


@dataclass(frozen=True)
class MultiHeadWeights:
    heads: tuple[AttentionHeadWeights, ...]
    W_O: Tensor

    def __post_init__(self):
        if not self.heads:
            raise ParameterError("Multi-head attention needs at least one head")
        first = self.heads[0]
        for head in self.heads[1:]:
            if (head.W_Q.shape, head.W_K.shape, head.W_V.shape) != (
                first.W_Q.shape,
                first.W_K.shape,
                first.W_V.shape,
            ):
                raise DimensionError("All heads must share (p, d_q, d_k, d_v)")
        if self.W_O.shape[0] != len(self.heads) * first.W_V.shape[1]:
            raise DimensionError(
                f"W_O rows {self.W_O.shape[0]} must equal B*d_v = {len(self.heads) * first.W_V.shape[1]}"
            )

    @property
    def d_q(self) -> int:
        return self.heads[0].d_q

    @classmethod
    def from_params(
        cls, params: Mapping[str, Tensor], prefix: str, n_heads: int
    ) -> "MultiHeadWeights":
        heads = tuple(
            AttentionHeadWeights(
                W_Q=params[f"{prefix}.head{h}.W_Q"],
                W_K=params[f"{prefix}.head{h}.W_K"],
                W_V=params[f"{prefix}.head{h}.W_V"],
            )
            for h in range(n_heads)
        )
        return cls(heads=heads, W_O=params[f"{prefix}.W_O"])


@dataclass(frozen=True)
class FeedForward:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(relu(add(matmul(x, self.W1), self.b1)), self.W2), self.b2)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "FeedForward":
        return cls(*(params[f"{prefix}.{name}"] for name in ("W1", "b1", "W2", "b2")))


@dataclass(frozen=True)
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "LayerNormParams":
        return cls(gain=params[f"{prefix}.gain"], bias=params[f"{prefix}.bias"])


@dataclass(frozen=True)
class PositionalEncoding:
    table: Tensor
    """ Tensor[n_max, d], fixed """

    @property
    def n_max(self) -> int:
        return self.table.shape[0]

    @property
    def d(self) -> int:
        return self.table.shape[1]


def default_temperature(w: MultiHeadWeights) -> float:
    """Logits are divided by sqrt(d_q)."""
    return math.sqrt(w.d_q)


def transformer_mixer(queries_src: Tensor, memory: Tensor, w: MultiHeadWeights) -> Tensor:
    return multi_head(queries_src, memory, w, default_temperature(w))


@dataclass(frozen=True)
class EncoderLayer:
    self_attention: MultiHeadWeights
    ffn: FeedForward
    norm1: LayerNormParams
    norm2: LayerNormParams
    dropout_rate: float = 0.0
    mixer: Mixer = field(default=transformer_mixer, repr=False)


@dataclass(frozen=True)
class DecoderLayer:
    self_attention: MultiHeadWeights
    cross_attention: MultiHeadWeights
    ffn: FeedForward
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams
    dropout_rate: float = 0.0
    mixer: Mixer = field(default=transformer_mixer, repr=False)


#########################################################################
# OPERATIONS
#########################################################################


def _check_entity_dims(queries_src: Tensor, memory: Tensor, p: int):
    if queries_src.ndim < 2 or memory.ndim < 2:
        raise DimensionError(
            f"Entity sets must be [..., n, p], got {queries_src.shape} and {memory.shape}"
        )
    if queries_src.shape[-1] != p or memory.shape[-1] != p:
        raise DimensionError(
            f"Entity dims {queries_src.shape[-1]}/{memory.shape[-1]} must equal projection input {p}"
        )


def attention_weights(
    queries_src: EntitySet, memory: EntitySet, w: AttentionHeadWeights, temperature: float
) -> Tensor:
    """softmax(Q K^T / temperature); each row sums to 1."""
    _check_entity_dims(queries_src, memory, w.W_Q.shape[0])
    Q = matmul(queries_src, w.W_Q)
    K = matmul(memory, w.W_K)
    return softmax(matmul(Q, transpose(K)), temperature)


def attend(
    queries_src: EntitySet, memory: EntitySet, w: AttentionHeadWeights, temperature: float
) -> Tensor:
    """Z = softmax(Q K^T / temperature) V, one convex combination of V rows per query."""
    A = attention_weights(queries_src, memory, w, temperature)
    return matmul(A, matmul(memory, w.W_V))


def multi_head(
    queries_src: EntitySet, memory: EntitySet, w: MultiHeadWeights, temperature: float
) -> Tensor:
    Z = [attend(queries_src, memory, head, temperature) for head in w.heads]
    return matmul(concat(Z, axis=-1), w.W_O)


def positional_encoding(n: int, d: int) -> PositionalEncoding:
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if d % 2 != 0 or d < 2:
        raise ParameterError(f"Positional encoding width must be even, got {d}")
    if n < 1:
        raise ParameterError(f"Positional encoding needs at least one position, got {n}")
    positions = np.arange(n, dtype=np.float64)[:, None]
    frequencies = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    angles = positions / frequencies
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return PositionalEncoding(table=Tensor(table))


def encoder_forward(
    entities: EntitySet,
    layers: list[EncoderLayer],
    pe: PositionalEncoding,
    rng: Optional[np.random.Generator] = None,
) -> EntitySet:
    n, d = entities.shape[-2:]
    if d != pe.d:
        raise DimensionError(f"Entity dim {d} must equal encoding width {pe.d}")
    if n > pe.n_max:
        raise DimensionError(f"{n} entities exceed positional table size {pe.n_max}")
    x = add(entities, Tensor(pe.table.data[:n]))
    for layer in layers:
        attended = layer.mixer(x, x, layer.self_attention)
        x = layer.norm1(add(x, dropout(attended, layer.dropout_rate, rng)))
        x = layer.norm2(add(x, dropout(layer.ffn(x), layer.dropout_rate, rng)))
    log.trace(f"encoder output {x.shape}")
    return x


def decoder_forward(
    irq: Tensor,
    memory: EntitySet,
    layers: list[DecoderLayer],
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Refine the learnable queries against the memory; no positional encoding here."""
    if irq.ndim != 2:
        raise DimensionError(f"Image representation queries must be [m, d], got {irq.shape}")
    if irq.shape[-1] != memory.shape[-1]:
        raise DimensionError(
            f"Query dim {irq.shape[-1]} must equal memory dim {memory.shape[-1]}"
        )
    q = expand(irq, memory.shape[:-2]) if memory.ndim > 2 else irq
    for layer in layers:
        q = layer.norm1(
            add(q, dropout(layer.mixer(q, q, layer.self_attention), layer.dropout_rate, rng))
        )
        q = layer.norm2(
            add(
                q,
                dropout(
                    layer.mixer(q, memory, layer.cross_attention), layer.dropout_rate, rng
                ),
            )
        )
        q = layer.norm3(add(q, dropout(layer.ffn(q), layer.dropout_rate, rng)))
    return q
