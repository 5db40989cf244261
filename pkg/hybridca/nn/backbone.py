""" Convolutional backbone: image -> feature map -> entity set. """
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np
from loguru import logger as log
from numpy.lib.stride_tricks import sliding_window_view

from hybridca.core.autodiff import Tensor, apply, mean, relu, reshape, transpose
from hybridca.core.errors import DimensionError, ParameterError

FeatureMap = Tensor
""" Tensor[..., C, H, W] """


@dataclass(frozen=True)
class StageSpec:
    channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ParameterError(f"Invalid convolution stage {self}")

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[StageSpec, ...] = field(
        default_factory=lambda: (StageSpec(8), StageSpec(16), StageSpec(32))
    )
    in_channels: int = 1
    image_size: tuple[int, int] = (32, 32)
    projection: int = 64
    """ Entity dimension p after the 1x1 projection """
    activation: Literal["relu", "none"] = "relu"
    label: str = "toy-cnn"
    """ Free-form name used to group report rows """

    def __post_init__(self):
        if not self.stages:
            raise ParameterError("A backbone needs at least one convolution stage")
        if self.activation not in ("relu", "none"):
            raise ParameterError(f"Unknown activation '{self.activation}'")
        self.output_grid()

    def output_grid(self) -> tuple[int, int]:
        h, w = self.image_size
        for i, stage in enumerate(self.stages):
            h, w = stage.output_size(h), stage.output_size(w)
            if h < 1 or w < 1:
                raise DimensionError(
                    f"Stage {i} reduces a {self.image_size} image to an empty grid"
                )
        return h, w

    @property
    def n_entities(self) -> int:
        h, w = self.output_grid()
        return h * w

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = dict()
        c_in = self.in_channels
        for i, stage in enumerate(self.stages):
            shapes[f"backbone.stage{i}.kernel"] = (stage.channels, c_in, stage.kernel, stage.kernel)
            shapes[f"backbone.stage{i}.bias"] = (stage.channels,)
            c_in = stage.channels
        shapes["backbone.projection.kernel"] = (self.projection, c_in, 1, 1)
        shapes["backbone.projection.bias"] = (self.projection,)
        return shapes


@dataclass(frozen=True)
class ConvLayer:
    kernel: Tensor
    """ Tensor[c_out, c_in, k, k] """
    bias: Tensor
    """ Tensor[c_out] """
    stride: int = 1
    padding: int = 0


def conv2d(input: FeatureMap, layer: ConvLayer) -> FeatureMap:
    """Cross-correlation over [C, H, W] or [B, C, H, W] input with zero padding."""
    kernel, bias, s, pad = layer.kernel.data, layer.bias.data, layer.stride, layer.padding
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"Kernel must be [c_out, c_in, k, k], got {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"Bias {bias.shape} must be ({kernel.shape[0]},)")
    if input.ndim not in (3, 4):
        raise DimensionError(f"Feature map must be [C, H, W] or [B, C, H, W], got {input.shape}")
    batched = input.ndim == 4
    x = input.data if batched else input.data[None]
    _, C, H, W = x.shape
    k = kernel.shape[-1]
    if C != kernel.shape[1]:
        raise DimensionError(f"Input has {C} channels, kernel expects {kernel.shape[1]}")
    H_out = (H + 2 * pad - k) // s + 1
    W_out = (W + 2 * pad - k) // s + 1
    if H_out < 1 or W_out < 1:
        raise DimensionError(f"Kernel {k} with stride {s} does not fit a {H}x{W} input")

    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :H_out, :W_out]
    out = np.einsum("bchwij,ocij->bohw", windows, kernel, optimize=True) + bias[:, None, None]

    def vjp(g):
        g = g if batched else g[None]
        g_kernel = np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)
        g_bias = g.sum(axis=(0, 2, 3))
        g_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                g_padded[:, :, i : i + s * H_out : s, j : j + s * W_out : s] += np.einsum(
                    "bohw,oc->bchw", g, kernel[:, :, i, j], optimize=True
                )
        g_input = g_padded[:, :, pad : pad + H, pad : pad + W]
        return (g_input if batched else g_input[0]), g_kernel, g_bias

    return apply(
        "conv2d", out if batched else out[0], (input, layer.kernel, layer.bias), vjp
    )


def vectorize_entities(fm: FeatureMap, projection: ConvLayer) -> Tensor:
    """1x1 projection to p channels, then one entity per spatial location in row-major order."""
    if projection.kernel.shape[2:] != (1, 1):
        raise DimensionError(
            f"Projection kernel must be 1x1, got {projection.kernel.shape[2:]}"
        )
    projected = conv2d(fm, projection)
    *lead, p, h, w = projected.shape
    flat = reshape(projected, (*lead, p, h * w))
    return transpose(flat)


def backbone_forward(image: Tensor, spec: BackboneSpec, params: Mapping[str, Tensor]) -> Tensor:
    """Image [..., c, h, w] -> entities [..., n, p]."""
    if image.shape[-3:] != (spec.in_channels, *spec.image_size):
        raise DimensionError(
            f"Image shape {image.shape[-3:]} does not match backbone input "
            f"{(spec.in_channels, *spec.image_size)}"
        )
    x = image
    for i, stage in enumerate(spec.stages):
        layer = ConvLayer(
            kernel=params[f"backbone.stage{i}.kernel"],
            bias=params[f"backbone.stage{i}.bias"],
            stride=stage.stride,
            padding=stage.padding,
        )
        x = conv2d(x, layer)
        if spec.activation == "relu":
            x = relu(x)
        log.trace(f"backbone stage {i} -> {x.shape}")
    projection = ConvLayer(
        kernel=params["backbone.projection.kernel"], bias=params["backbone.projection.bias"]
    )
    return vectorize_entities(x, projection)


def global_average_pool(entities: Tensor) -> Tensor:
    """Mean over the entity axis: [..., n, p] -> [..., p]."""
    return mean(entities, axis=-2)
