""" Check functions for the gradient verification protocol.

Every check builds a scalar function of one tensor, compares its reverse-mode
gradient against central differences with ``grad_check`` and returns a flag
entry. Vector outputs are reduced to a scalar through a fixed random weighting so
every output entry contributes to the checked gradient.
"""
from dataclasses import replace
import math
from typing import Callable

import numpy as np
from loguru import logger as log

from hybridca.core import autodiff as ad
from hybridca.core.autodiff import Tensor, grad_check
from hybridca.core.check_model import FlagCode, FlagEntry
from hybridca.core.errors import InvariantViolation
from hybridca.nn.attention import (
    AttentionHeadWeights,
    DecoderLayer,
    EncoderLayer,
    FeedForward,
    LayerNormParams,
    MultiHeadWeights,
    attend,
    decoder_forward,
    encoder_forward,
    multi_head,
    positional_encoding,
    transformer_mixer,
)
from hybridca.nn.backbone import BackboneSpec, ConvLayer, StageSpec, backbone_forward, conv2d, vectorize_entities
from hybridca.nn.hopfield import (
    HopfieldLayerWeights,
    hopfield_layer_forward,
    hopfield_mixer,
    hopfield_multi_head,
    retrieve,
    update,
)
from hybridca.nn.model import ModelSpec, forward_with, init
from hybridca.training.losses import bce_multilabel, smooth_l1

ScalarFn = Callable[[Tensor], Tensor]
Case = Callable[[np.random.Generator], tuple[ScalarFn, np.ndarray]]


def _gradient_flag(error: float, tolerance: float, label: str) -> FlagEntry:
    if not math.isfinite(error):
        code = FlagCode.HALT
        message = f"{label}: non-finite relative error"
    elif error <= tolerance:
        code = FlagCode.GREEN
        message = f"{label}: max relative error {error:.3e} <= {tolerance:.1e}"
    else:
        code = FlagCode.RED
        message = f"{label}: max relative error {error:.3e} exceeds {tolerance:.1e}"
    log.debug(message)
    return {"code": code, "message": message}


def _weighted(fn: Callable[[Tensor], Tensor], weights: np.ndarray) -> ScalarFn:
    """sum(fn(x) * weights)"""
    p = Tensor(weights)
    return lambda x: ad.total(ad.mul(fn(x), p))


def _weighted_for(fn: Callable[[Tensor], Tensor], x: np.ndarray, rng: np.random.Generator) -> ScalarFn:
    shape = fn(Tensor(x)).shape
    return _weighted(fn, rng.standard_normal(shape))


def _normal(rng: np.random.Generator, *shape: int, sd: float = 1.0) -> Tensor:
    return Tensor(sd * rng.standard_normal(shape))


#########################################################################
# PRIMITIVES
#########################################################################


def _unary(op: Callable[[Tensor], Tensor], shape: tuple[int, ...]) -> Case:
    def build(rng):
        x = rng.standard_normal(shape)
        return _weighted_for(op, x, rng), x

    return build


def _with_fixed(op: Callable[[Tensor, Tensor], Tensor], x_shape, other_shape, other_first=False) -> Case:
    def build(rng):
        x = rng.standard_normal(x_shape)
        other = Tensor(rng.standard_normal(other_shape))
        fn = (lambda t: op(other, t)) if other_first else (lambda t: op(t, other))
        return _weighted_for(fn, x, rng), x

    return build


def _layer_norm_case(wrt: str) -> Case:
    def build(rng):
        x, gain, bias = rng.standard_normal((3, 6)), 1 + 0.1 * rng.standard_normal(6), rng.standard_normal(6)
        fns = {
            "x": lambda t: ad.layer_norm(t, Tensor(gain), Tensor(bias)),
            "gain": lambda t: ad.layer_norm(Tensor(x), t, Tensor(bias)),
            "bias": lambda t: ad.layer_norm(Tensor(x), Tensor(gain), t),
        }
        checked = {"x": x, "gain": gain, "bias": bias}[wrt]
        return _weighted_for(fns[wrt], checked, rng), checked

    return build


def _dropout_case(rng):
    x = rng.standard_normal((4, 5))
    # a fresh stream per call keeps the mask, and so the function, deterministic
    return _weighted_for(lambda t: ad.dropout(t, 0.3, np.random.default_rng(7)), x, rng), x


def _smooth_l1_case(rng):
    y = rng.standard_normal((4, 2))
    yhat = y + rng.choice([-1, 1], size=y.shape) * rng.uniform(0.1, 0.8, size=y.shape)
    yhat[0, 0] = y[0, 0] + 2.5
    return (lambda t: smooth_l1(Tensor(y), t, beta=1.0)), yhat


def _bce_case(rng):
    target = (rng.random((4, 15)) < 0.3).astype(float)
    probs = rng.uniform(0.05, 0.95, size=target.shape)
    return (lambda t: bce_multilabel(t, Tensor(target))), probs


PRIMITIVE_CASES: dict[str, Case] = {
    "add": _with_fixed(ad.add, (3, 4), (3, 4)),
    "add_bias": _with_fixed(ad.add, (4,), (2, 3, 4), other_first=True),
    "sub": _with_fixed(ad.sub, (3, 4), (4,), other_first=True),
    "mul": _with_fixed(ad.mul, (2, 3, 4), (4,)),
    "scale": _unary(lambda t: ad.scale(t, -1.7), (3, 4)),
    "matmul_left": _with_fixed(ad.matmul, (3, 4), (4, 5)),
    "matmul_right": _with_fixed(ad.matmul, (4, 5), (3, 4), other_first=True),
    "matmul_shared": _with_fixed(ad.matmul, (4, 5), (2, 3, 4), other_first=True),
    "matmul_batched": _with_fixed(ad.matmul, (2, 3, 4), (2, 4, 5)),
    "transpose": _unary(ad.transpose, (2, 3, 4)),
    "permute": _unary(lambda t: ad.permute(t, (2, 0, 1)), (2, 3, 4)),
    "reshape": _unary(lambda t: ad.reshape(t, (4, 6)), (2, 3, 4)),
    "expand": _unary(lambda t: ad.expand(t, (3,)), (2, 4)),
    "relu": _unary(ad.relu, (3, 5)),
    "sigmoid": _unary(ad.sigmoid, (3, 5)),
    "concat": _with_fixed(lambda a, b: ad.concat([a, b], axis=-1), (3, 2), (3, 4)),
    "mean": _unary(lambda t: ad.mean(t, axis=-2), (2, 3, 4)),
    "mean_all": _unary(ad.mean, (3, 4)),
    "sum": _unary(lambda t: ad.total(t, axis=0), (3, 4)),
    "softmax": _unary(lambda t: ad.softmax(t, 0.7), (3, 6)),
    "lse": _unary(lambda t: ad.lse(1.3, t), (3, 6)),
    "layer_norm": _layer_norm_case("x"),
    "layer_norm_gain": _layer_norm_case("gain"),
    "layer_norm_bias": _layer_norm_case("bias"),
    "dropout": _dropout_case,
    "smooth_l1": _smooth_l1_case,
    "bce": _bce_case,
}


def check_primitive_gradient(op: str, seed: int, tolerance: float, step: float) -> FlagEntry:
    f, x = PRIMITIVE_CASES[op](np.random.default_rng(seed))
    return _gradient_flag(grad_check(f, x, step), tolerance, op)


#########################################################################
# ATTENTION
#########################################################################

# small enough for a full central-difference sweep of every input entry
P, HEADS, D_HEAD, N_ENTITIES, N_QUERIES = 8, 2, 4, 5, 3


def random_multi_head(rng: np.random.Generator, p: int = P, heads: int = HEADS, d_head: int = D_HEAD) -> MultiHeadWeights:
    bound = 1.0 / math.sqrt(p)
    return MultiHeadWeights(
        heads=tuple(
            AttentionHeadWeights(*(Tensor(rng.uniform(-bound, bound, (p, d_head))) for _ in range(3)))
            for _ in range(heads)
        ),
        W_O=Tensor(rng.uniform(-bound, bound, (heads * d_head, p))),
    )


def _ffn(rng, p: int = P) -> FeedForward:
    return FeedForward(
        W1=_normal(rng, p, 4 * p, sd=0.3),
        b1=_normal(rng, 4 * p, sd=0.1),
        W2=_normal(rng, 4 * p, p, sd=0.3),
        b2=_normal(rng, p, sd=0.1),
    )


def _norm(rng, p: int = P) -> LayerNormParams:
    return LayerNormParams(gain=Tensor(1 + 0.1 * rng.standard_normal(p)), bias=_normal(rng, p, sd=0.1))


def _encoder_layers(rng, mixer) -> list[EncoderLayer]:
    return [
        EncoderLayer(random_multi_head(rng), _ffn(rng), _norm(rng), _norm(rng), mixer=mixer)
        for _ in range(2)
    ]


def _decoder_layers(rng, mixer) -> list[DecoderLayer]:
    return [
        DecoderLayer(
            random_multi_head(rng), random_multi_head(rng), _ffn(rng), _norm(rng), _norm(rng), _norm(rng), mixer=mixer
        )
        for _ in range(2)
    ]


def _attention_case(block: str, wrt: str, mixer=transformer_mixer) -> Case:
    def build(rng):
        queries = rng.standard_normal((N_QUERIES, P))
        memory = rng.standard_normal((N_ENTITIES, P))
        if block == "multi_head":
            w = random_multi_head(rng)
            fns = {
                "queries": lambda t: mixer(t, Tensor(memory), w),
                "memory": lambda t: mixer(Tensor(queries), t, w),
            }
        elif block == "encoder":
            layers, pe = _encoder_layers(rng, mixer), positional_encoding(16, P)
            fns = {"memory": lambda t: encoder_forward(t, layers, pe)}
        elif block == "decoder":
            layers = _decoder_layers(rng, mixer)
            fns = {
                "queries": lambda t: decoder_forward(t, Tensor(memory), layers),
                "memory": lambda t: decoder_forward(Tensor(queries), t, layers),
            }
        else:
            raise KeyError(block)
        x = queries if wrt == "queries" else memory
        return _weighted_for(fns[wrt], x, rng), x

    return build


def check_attention_gradient(block: str, wrt: str, seed: int, tolerance: float, step: float) -> FlagEntry:
    f, x = _attention_case(block, wrt)(np.random.default_rng(seed))
    return _gradient_flag(grad_check(f, x, step), tolerance, f"{block} wrt {wrt}")


#########################################################################
# HOPFIELD
#########################################################################


def check_hopfield_gradient(
    block: str, wrt: str, n_steps: int, seed: int, tolerance: float, step: float
) -> FlagEntry:
    rng = np.random.default_rng(seed)
    label = f"{block} (n_steps={n_steps}) wrt {wrt}"
    if block == "layer":
        queries, memory = rng.standard_normal((N_QUERIES, P)), rng.standard_normal((N_ENTITIES, P))
        w = HopfieldLayerWeights.from_head(random_multi_head(rng, heads=1).heads[0], n_steps=n_steps)
        fn = {
            "queries": lambda t: hopfield_layer_forward(t, Tensor(memory), w),
            "memory": lambda t: hopfield_layer_forward(Tensor(queries), t, w),
        }[wrt]
        x = queries if wrt == "queries" else memory
        f = _weighted_for(fn, x, rng)
    elif block == "update":
        patterns, state = rng.standard_normal((P, N_ENTITIES)), rng.standard_normal(P)
        f, x = _weighted_for(lambda t: update(Tensor(patterns), t, 0.5), state, rng), state
    else:
        f, x = _attention_case(block, wrt, mixer=hopfield_mixer(n_steps=n_steps))(rng)
    return _gradient_flag(grad_check(f, x, step), tolerance, label)


def check_hopfield_energy_descent(n_patterns: int, trials: int, seed: int) -> FlagEntry:
    """Retrieval from random states never raises the energy."""
    rng = np.random.default_rng(seed)
    iterations = list()
    for trial in range(trials):
        patterns = rng.standard_normal((P, n_patterns))
        beta = float(rng.uniform(0.1, 4.0))
        try:
            _, n_iter = retrieve(patterns, rng.standard_normal(P), beta)
        except InvariantViolation as e:
            return {"code": FlagCode.RED, "message": f"trial {trial} (beta={beta:.3f}): {e}"}
        iterations.append(n_iter)
    return {
        "code": FlagCode.GREEN,
        "message": f"{trials} retrievals over {n_patterns} patterns, energy non-increasing; "
        f"median {int(np.median(iterations))} updates",
    }


def check_hopfield_attention_equivalence(seed: int, tolerance: float) -> FlagEntry:
    """One Hopfield step at beta = 1/sqrt(d_q) reproduces scaled dot-product attention."""
    rng = np.random.default_rng(seed)
    w = random_multi_head(rng)
    queries, memory = _normal(rng, N_QUERIES, P), _normal(rng, N_ENTITIES, P)
    per_head = max(
        float(np.max(np.abs(
            hopfield_layer_forward(queries, memory, HopfieldLayerWeights.from_head(head)).data
            - attend(queries, memory, head, math.sqrt(head.d_q)).data
        )))
        for head in w.heads
    )
    combined = float(np.max(np.abs(
        hopfield_multi_head(queries, memory, w).data - multi_head(queries, memory, w, math.sqrt(w.d_q)).data
    )))
    error = max(per_head, combined)
    code = FlagCode.GREEN if error <= tolerance else FlagCode.RED
    return {"code": code, "message": f"max abs difference {error:.3e} (tolerance {tolerance:.1e})"}


#########################################################################
# BACKBONE
#########################################################################


def check_backbone_gradient(block: str, wrt: str, seed: int, tolerance: float, step: float) -> FlagEntry:
    rng = np.random.default_rng(seed)
    label = f"{block} wrt {wrt}"
    if block == "conv2d":
        image = rng.standard_normal((2, 3, 6, 6))
        kernel, bias = rng.standard_normal((4, 3, 3, 3)) / 3, rng.standard_normal(4)

        def conv(i, k, b):
            return conv2d(i, ConvLayer(kernel=k, bias=b, stride=2, padding=1))

        fn, x = {
            "image": (lambda t: conv(t, Tensor(kernel), Tensor(bias)), image),
            "kernel": (lambda t: conv(Tensor(image), t, Tensor(bias)), kernel),
            "bias": (lambda t: conv(Tensor(image), Tensor(kernel), t), bias),
        }[wrt]
    elif block == "vectorize":
        fm = rng.standard_normal((3, 4, 5))
        projection = ConvLayer(kernel=_normal(rng, 6, 3, 1, 1), bias=_normal(rng, 6))
        fn, x = (lambda t: vectorize_entities(t, projection)), fm
    elif block == "backbone":
        spec = BackboneSpec(
            stages=(StageSpec(channels=3), StageSpec(channels=4)), image_size=(8, 8), projection=6
        )
        params = {name: _normal(rng, *shape, sd=0.4) for name, shape in spec.parameter_shapes().items()}
        fn, x = (lambda t: backbone_forward(t, spec, params)), rng.standard_normal((1, 8, 8))
    else:
        raise KeyError(block)
    return _gradient_flag(grad_check(_weighted_for(fn, x, rng), x, step), tolerance, label)


#########################################################################
# FULL MODEL
#########################################################################


def _embed(window: Tensor, base: np.ndarray, flat_index: np.ndarray) -> Tensor:
    """``base`` with the entries at ``flat_index`` taken from ``window``, differentiable in ``window``."""
    selector = np.zeros((len(flat_index), base.size))
    selector[np.arange(len(flat_index)), flat_index] = 1.0
    rest = base.ravel().copy()
    rest[flat_index] = 0.0
    spread = ad.reshape(ad.matmul(ad.reshape(window, (1, len(flat_index))), Tensor(selector)), base.shape)
    return ad.add(spread, Tensor(rest.reshape(base.shape)))


def check_model_gradient(
    spec: ModelSpec, wrt: str, seed: int, tolerance: float, step: float, window: int = 16
) -> FlagEntry:
    """Full forward pass (no dropout) checked on the ``window`` entries of ``wrt`` with the largest gradient.

    ``wrt`` is ``image`` or a weight name of the model.
    """
    rng = np.random.default_rng(seed)
    spec = replace(spec, dropout=0.0)
    weights = init(spec, seed).weights
    image = rng.standard_normal((spec.backbone.in_channels, *spec.backbone.image_size))
    base = image if wrt == "image" else weights[wrt]
    projection = Tensor(rng.standard_normal(spec.n_outputs))

    def scalar(value: Tensor) -> Tensor:
        params = {name: Tensor(w) for name, w in weights.items()}
        if wrt == "image":
            x = value
        else:
            params[wrt], x = value, Tensor(image)
        return ad.total(ad.mul(forward_with(spec, params, x), projection))

    graph = ad.Graph()
    leaf = graph.leaf(base)
    full = ad.backward(scalar(leaf)).wrt(leaf)
    flat_index = np.sort(np.argsort(-np.abs(full.ravel()), kind="stable")[:window])
    error = grad_check(lambda t: scalar(_embed(t, base, flat_index)), base.ravel()[flat_index], step)
    return _gradient_flag(error, tolerance, f"{spec.attention_kind} model wrt {wrt}")
