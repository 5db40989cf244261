import numpy as np
import pytest

from hybridca.core.autodiff import Graph, Tensor, backward, total
from hybridca.core.check_model import FlagCode
from hybridca.core.errors import DimensionError, ParameterError
from hybridca.nn.backbone import (
    BackboneSpec,
    ConvLayer,
    StageSpec,
    backbone_forward,
    conv2d,
    global_average_pool,
    vectorize_entities,
)
from hybridca.verification.checks import check_backbone_gradient


def _conv_reference(x, kernel, bias, stride, padding):
    c_out, _, k, _ = kernel.shape
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h = (x.shape[1] + 2 * padding - k) // stride + 1
    w = (x.shape[2] + 2 * padding - k) // stride + 1
    out = np.empty((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                window = padded[:, i * stride : i * stride + k, j * stride : j * stride + k]
                out[o, i, j] = np.sum(window * kernel[o]) + bias[o]
    return out


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 6))
    out = conv2d(Tensor(x), ConvLayer(kernel=Tensor(np.ones((1, 1, 1, 1))), bias=Tensor(np.zeros(1))))
    assert np.array_equal(out.data, x)


def test_conv2d_averaging_kernel():
    x = np.full((1, 7, 7), 2.5)
    out = conv2d(Tensor(x), ConvLayer(kernel=Tensor(np.ones((1, 1, 3, 3)) / 9), bias=Tensor(np.zeros(1))))
    assert out.shape == (1, 5, 5)
    assert np.allclose(out.data, 2.5, atol=1e-14)


def test_conv2d_matches_loop_reference(rng):
    for _ in range(20):
        c_in, c_out = rng.integers(1, 4, size=2)
        k = int(rng.integers(1, 4))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = rng.integers(k, 9, size=2)
        x = rng.standard_normal((c_in, h, w))
        kernel, bias = rng.standard_normal((c_out, c_in, k, k)), rng.standard_normal(c_out)
        out = conv2d(Tensor(x), ConvLayer(Tensor(kernel), Tensor(bias), stride=stride, padding=padding)).data
        expected = _conv_reference(x, kernel, bias, stride, padding)
        assert out.shape == ((c_out, (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1))
        assert np.allclose(out, expected, atol=1e-12)


def test_conv2d_geometry_errors(rng):
    layer = ConvLayer(kernel=Tensor(np.ones((2, 3, 3, 3))), bias=Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((2, 5, 5))), layer)
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((3, 2, 2))), layer)


def test_vectorize_single_position(rng):
    fm = rng.standard_normal((3, 1, 1))
    kernel = rng.standard_normal((5, 3, 1, 1))
    entities = vectorize_entities(Tensor(fm), ConvLayer(kernel=Tensor(kernel), bias=Tensor(np.zeros(5)))).data
    assert entities.shape == (1, 5)
    assert np.allclose(entities[0], kernel[:, :, 0, 0] @ fm[:, 0, 0])


def test_vectorize_row_major_entities(rng):
    fm = rng.standard_normal((3, 4, 5))
    projection = ConvLayer(kernel=Tensor(rng.standard_normal((6, 3, 1, 1))), bias=Tensor(rng.standard_normal(6)))
    entities = vectorize_entities(Tensor(fm), projection).data
    assert entities.shape == (20, 6)
    shifted = vectorize_entities(Tensor(np.roll(fm, 1, axis=2)), projection).data
    for row in range(4):
        for col in range(5):
            assert np.allclose(shifted[row * 5 + (col + 1) % 5], entities[row * 5 + col])


def test_vectorize_rejects_wide_projection(rng):
    with pytest.raises(DimensionError):
        vectorize_entities(
            Tensor(np.ones((3, 4, 4))), ConvLayer(kernel=Tensor(np.ones((2, 3, 3, 3))), bias=Tensor(np.zeros(2)))
        )


def test_backbone_spec_geometry():
    spec = BackboneSpec()
    assert spec.output_grid() == (4, 4)
    assert spec.n_entities == 16
    with pytest.raises(DimensionError):
        BackboneSpec(stages=(StageSpec(channels=4, kernel=5, padding=0),), image_size=(3, 3))
    with pytest.raises(ParameterError):
        BackboneSpec(stages=())
    with pytest.raises(ParameterError):
        StageSpec(channels=0)


def _params(spec, rng, scale=0.3):
    return {name: Tensor(scale * rng.standard_normal(shape)) for name, shape in spec.parameter_shapes().items()}


def test_backbone_zero_image_zero_biases(small_backbone, rng):
    params = {
        name: Tensor(np.zeros(t.shape)) if name.endswith("bias") else t
        for name, t in _params(small_backbone, rng).items()
    }
    entities = backbone_forward(Tensor(np.zeros((1, 16, 16))), small_backbone, params).data
    assert entities.shape == (16, 8)
    assert np.array_equal(entities, np.zeros((16, 8)))


def test_backbone_is_linear_without_activation(rng):
    spec = BackboneSpec(stages=(StageSpec(channels=3),), image_size=(8, 8), projection=4, activation="none")
    params = {
        name: Tensor(np.zeros(t.shape)) if name.endswith("bias") else t for name, t in _params(spec, rng).items()
    }
    doubled = {name: Tensor(2 * t.data) if name == "backbone.stage0.kernel" else t for name, t in params.items()}
    image = Tensor(rng.standard_normal((1, 8, 8)))
    assert np.allclose(backbone_forward(image, spec, doubled).data, 2 * backbone_forward(image, spec, params).data)


def test_backbone_rejects_wrong_geometry(small_backbone, rng):
    with pytest.raises(DimensionError):
        backbone_forward(Tensor(np.zeros((1, 8, 8))), small_backbone, _params(small_backbone, rng))


def test_backbone_gradient_reaches_first_kernel(small_backbone, rng):
    graph = Graph()
    params = {name: graph.leaf(t.data) for name, t in _params(small_backbone, rng).items()}
    entities = backbone_forward(Tensor(rng.standard_normal((2, 1, 16, 16))), small_backbone, params)
    grads = backward(total(global_average_pool(entities)))
    assert np.abs(grads.wrt(params["backbone.stage0.kernel"])).max() > 0


@pytest.mark.parametrize(
    "block, wrt",
    [("conv2d", "image"), ("conv2d", "kernel"), ("conv2d", "bias"), ("vectorize", "feature_map"), ("backbone", "image")],
)
def test_backbone_gradients(block, wrt):
    flag = check_backbone_gradient(block, wrt, seed=2, tolerance=1e-4, step=1e-5)
    assert flag["code"] == FlagCode.GREEN, flag["message"]
