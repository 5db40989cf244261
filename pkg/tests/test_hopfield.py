import math

import numpy as np
import pytest

from hybridca.core import autodiff as ad
from hybridca.core.autodiff import Tensor, grad_check
from hybridca.core.check_model import FlagCode
from hybridca.core.errors import ParameterError
from hybridca.nn.attention import AttentionHeadWeights, attend, multi_head
from hybridca.nn.hopfield import (
    HopfieldLayerWeights,
    energy,
    hopfield_layer_forward,
    hopfield_multi_head,
    retrieve,
    update,
)
from hybridca.verification.checks import (
    check_hopfield_attention_equivalence,
    check_hopfield_energy_descent,
    check_hopfield_gradient,
    random_multi_head,
)


def test_energy_examples():
    x1 = np.array([[0.3], [-1.2], [0.5]])
    for beta in (0.1, 1.0, 7.0):
        assert abs(energy(x1, x1[:, 0], beta)) < 1e-12
    assert math.isclose(energy(np.array([[1.0], [0.0]]), np.zeros(2), 1.0), 0.5, abs_tol=1e-15)


def test_energy_is_non_negative(rng):
    for _ in range(1000):
        d, n = rng.integers(1, 9), rng.integers(1, 17)
        x, p = rng.standard_normal((d, n)), rng.standard_normal(d) * 2
        assert energy(x, p, float(rng.uniform(0.5, 20))) >= -1e-12


def test_energy_rejects_non_positive_beta():
    with pytest.raises(ParameterError):
        energy(np.ones((2, 1)), np.ones(2), 0.0)
    with pytest.raises(ParameterError):
        update(np.ones((2, 1)), np.ones(2), -1.0)


def test_update_examples(rng):
    x1 = rng.standard_normal((4, 1))
    assert np.array_equal(update(x1, rng.standard_normal(4), 2.0).data, x1[:, 0])
    same = np.repeat(x1, 3, axis=1)
    assert np.allclose(update(same, rng.standard_normal(4), 2.0).data, x1[:, 0], atol=1e-15)
    assert np.allclose(update(np.eye(2), np.zeros(2), 1.0).data, [0.5, 0.5], atol=1e-15)


def test_update_never_increases_energy(rng):
    for _ in range(100):
        d, n = rng.integers(1, 9), rng.integers(1, 17)
        beta = float(rng.uniform(0.5, 20))
        x, p = rng.standard_normal((d, n)), rng.standard_normal(d)
        assert energy(x, update(x, p, beta), beta) <= energy(x, p, beta) + 1e-9


def test_update_stays_in_pattern_hull(rng):
    for _ in range(100):
        x = rng.standard_normal((5, 7))
        p_new = update(x, rng.standard_normal(5) * 3, float(rng.uniform(0.5, 20))).data
        assert (p_new >= x.min(axis=1) - 1e-12).all()
        assert (p_new <= x.max(axis=1) + 1e-12).all()


def _separated_patterns(rng, d=16, n=4):
    """Near-orthogonal unit-scale patterns (pairwise angle well above 60 degrees)."""
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q * 3.0


def test_retrieve_separated_pattern(rng):
    for _ in range(50):
        x = _separated_patterns(rng)
        i = int(rng.integers(0, x.shape[1]))
        largest_norm = np.linalg.norm(x, axis=0).max()
        noise = rng.standard_normal(x.shape[0])
        noise *= 0.1 * largest_norm / np.linalg.norm(noise)
        p, iterations = retrieve(x, x[:, i] + noise, beta=20.0)
        assert np.max(np.abs(p.data - x[:, i])) < 1e-3
        assert iterations <= 3


def test_retrieve_single_pattern_in_one_update(rng):
    x = rng.standard_normal((3, 1))
    p, iterations = retrieve(x, rng.standard_normal(3), beta=1.0)
    assert np.array_equal(p.data, x[:, 0])
    assert iterations == 1


def test_retrieve_symmetric_metastable_state():
    x = np.array([[1.0, -1.0], [0.0, 0.0]])
    p, _ = retrieve(x, np.array([0.0, 0.7]), beta=1.0)
    assert np.allclose(p.data, x.mean(axis=1), atol=1e-12)


def test_retrieve_fixed_point_is_kept(rng):
    x = _separated_patterns(rng)
    fixed, _ = retrieve(x, x[:, 0], beta=20.0)
    again, iterations = retrieve(x, fixed.data, beta=20.0, tol=1e-6)
    assert iterations == 0
    assert np.max(np.abs(again.data - fixed.data)) < 1e-6


def test_retrieve_parameter_errors():
    with pytest.raises(ParameterError):
        retrieve(np.ones((2, 1)), np.ones(2), 1.0, max_iter=0)
    with pytest.raises(ParameterError):
        retrieve(np.ones((2, 1)), np.ones(2), 1.0, tol=0.0)


def test_hopfield_layer_with_identity_weights_equals_attention(rng):
    eye = Tensor(np.eye(4))
    head = AttentionHeadWeights(W_Q=eye, W_K=eye, W_V=eye)
    q, m = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((5, 4)))
    out = hopfield_layer_forward(q, m, HopfieldLayerWeights.from_head(head)).data
    assert np.allclose(out, attend(q, m, head, math.sqrt(4)).data, atol=1e-12, rtol=0)


def test_hopfield_attention_equivalence_over_random_weights(rng):
    for _ in range(100):
        w = random_multi_head(rng, p=6, heads=2, d_head=3)
        q, m = Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((5, 6)))
        for head in w.heads:
            out = hopfield_layer_forward(q, m, HopfieldLayerWeights.from_head(head)).data
            assert np.allclose(out, attend(q, m, head, math.sqrt(3)).data, atol=1e-12, rtol=0)
        assert np.allclose(
            hopfield_multi_head(q, m, w).data, multi_head(q, m, w, math.sqrt(3)).data, atol=1e-12, rtol=0
        )


def test_hopfield_layer_single_memory_entity(rng):
    head = random_multi_head(rng, heads=1).heads[0]
    memory = rng.standard_normal((1, 8))
    w = HopfieldLayerWeights.from_head(head, beta=3.0, n_steps=4)
    out = hopfield_layer_forward(Tensor(rng.standard_normal((3, 8))), Tensor(memory), w).data
    assert np.allclose(out, np.repeat(memory @ head.W_V.data, 3, axis=0), atol=1e-14)


def test_hopfield_layer_rejects_invalid_weights(rng):
    head = random_multi_head(rng, heads=1).heads[0]
    with pytest.raises(ParameterError):
        HopfieldLayerWeights.from_head(head, beta=0.0)
    with pytest.raises(ParameterError):
        HopfieldLayerWeights.from_head(head, n_steps=0)


@pytest.mark.parametrize(
    "block, wrt, n_steps",
    [("update", "state", 1), ("layer", "queries", 1), ("layer", "memory", 3), ("decoder", "memory", 2)],
)
def test_hopfield_gradients(block, wrt, n_steps):
    flag = check_hopfield_gradient(block, wrt, n_steps, seed=5, tolerance=1e-4, step=1e-5)
    assert flag["code"] == FlagCode.GREEN, flag["message"]


def test_protocol_checks_pass():
    assert check_hopfield_energy_descent(n_patterns=10, trials=20, seed=0)["code"] == FlagCode.GREEN
    assert check_hopfield_attention_equivalence(seed=0, tolerance=1e-12)["code"] == FlagCode.GREEN


def test_hopfield_layer_gradient_directly(rng):
    head = random_multi_head(rng, heads=1).heads[0]
    w = HopfieldLayerWeights.from_head(head, n_steps=2)
    memory = Tensor(rng.standard_normal((5, 8)))
    x = rng.standard_normal((3, 8))
    weighting = Tensor(rng.standard_normal(hopfield_layer_forward(Tensor(x), memory, w).shape))

    def f(t):
        return ad.total(ad.mul(hopfield_layer_forward(t, memory, w), weighting))

    assert grad_check(f, x) < 1e-4


def test_hopfield_layer_readout_dropout(rng):
    w = HopfieldLayerWeights.from_head(random_multi_head(rng, heads=1).heads[0])
    q, m = Tensor(rng.standard_normal((3, 8))), Tensor(rng.standard_normal((5, 8)))
    plain = hopfield_layer_forward(q, m, w).data
    assert np.array_equal(hopfield_layer_forward(q, m, w, rng=np.random.default_rng(0)).data, plain)

    dropped = hopfield_layer_forward(q, m, w, rng=np.random.default_rng(0), dropout_rate=0.5).data
    again = hopfield_layer_forward(q, m, w, rng=np.random.default_rng(0), dropout_rate=0.5).data
    assert np.array_equal(dropped, again)
    kept = dropped != 0
    assert kept.any() and not kept.all()
    assert np.allclose(dropped[kept], 2.0 * plain[kept])
