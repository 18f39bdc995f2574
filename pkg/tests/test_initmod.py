import numpy as np
import pytest

from app.initmod.init_module import (
    GeneratorGrads,
    WeightGenerator,
    build_target_mask,
    generate_weights,
    init_query_protos,
    init_query_protos_backward,
    sigmoid,
    temp_query_mask,
    temp_query_protos,
    weight_generator_backward,
)
from app.numerics.kernels import GradPair
from tests.conftest import assert_grad_matches


def test_sigmoid_values():
    assert sigmoid(np.array(0.0)) == 0.5
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))
    np.testing.assert_allclose(sigmoid(np.array([2.0])) + sigmoid(np.array([-2.0])), 1.0, atol=1e-15)


def test_zero_generator_gives_half_weights(rng):
    gen = WeightGenerator.zeros(3)
    omega = generate_weights(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), gen)
    np.testing.assert_array_equal(omega, 0.5)


def test_generator_rejects_bad_shapes():
    with pytest.raises(ValueError, match="2C x C"):
        WeightGenerator(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ValueError, match="generator b"):
        WeightGenerator(np.zeros((4, 2)), np.zeros(3))
    with pytest.raises(ValueError, match="non-finite"):
        WeightGenerator(np.full((4, 2), np.nan), np.zeros(2))


def test_generator_rejects_channel_mismatch(rng):
    with pytest.raises(ValueError, match="channels"):
        generate_weights(rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), WeightGenerator.zeros(3))


def test_init_query_protos_example():
    P_s = np.array([[2.0, 0.0], [1.0, 1.0]])
    P_prime = np.array([[0.0, 2.0], [1.0, 1.0]])
    P0 = init_query_protos(P_s, P_prime, np.full((2, 2), 0.5))
    np.testing.assert_array_equal(P0, [[1.0, 1.0], [1.0, 1.0]])


def test_init_query_protos_extremes(rng):
    P_s, P_prime = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_array_equal(init_query_protos(P_s, P_prime, np.ones((2, 3))), P_s)
    np.testing.assert_array_equal(init_query_protos(P_s, P_prime, np.zeros((2, 3))), P_prime)


def test_init_query_protos_rejects_cancelling_rows():
    with pytest.raises(ValueError, match="norm"):
        init_query_protos(
            np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([[-1.0, 0.0], [1.0, 1.0]]), np.full((2, 2), 0.5)
        )


def test_temp_query_mask_follows_support_prototypes():
    Q = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    soft, hard = temp_query_mask(Q, np.array([[1.0, 0.0], [0.0, 1.0]]), 20.0)
    np.testing.assert_array_equal(hard, [[0, 1]])
    np.testing.assert_allclose(soft.sum(axis=-1), 1.0, atol=1e-15)


def test_temp_query_protos_falls_back_to_support_rows():
    Q = np.array([[[2.0, 0.0], [4.0, 0.0]]])
    fallback = np.array([[0.0, 1.0], [1.0, 1.0], [3.0, 3.0]])
    temp = temp_query_protos(Q, np.array([[1, 1]]), fallback)
    np.testing.assert_array_equal(temp.protos[1], [3.0, 0.0])
    np.testing.assert_array_equal(temp.protos[0], fallback[0])
    np.testing.assert_array_equal(temp.protos[2], fallback[2])
    assert temp.pool.empty_classes == [0, 2]


def test_build_target_mask_is_argmax_of_soft(rng):
    Q = rng.normal(size=(3, 3, 2))
    soft, hard = build_target_mask(Q, rng.normal(size=(2, 2)), 20.0)
    np.testing.assert_array_equal(hard, soft.argmax(axis=-1))


@pytest.mark.parametrize("seed", range(20))
def test_weight_generator_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    c = 3
    P_s, P_prime = rng.normal(size=(2, c)), rng.normal(size=(2, c))
    gen = WeightGenerator(rng.normal(0.0, 0.5, size=(2 * c, c)), rng.normal(0.0, 0.5, size=c))
    G = rng.normal(size=(2, c))
    grads, dPs, dPp = weight_generator_backward(P_s, P_prime, gen, G)

    assert_grad_matches(lambda w: float(np.sum(G * generate_weights(P_s, P_prime, WeightGenerator(w, gen.b)))),
                        GradPair(gen.W.copy(), grads.W), 1e-6)
    assert_grad_matches(lambda b: float(np.sum(G * generate_weights(P_s, P_prime, WeightGenerator(gen.W, b)))),
                        GradPair(gen.b.copy(), grads.b), 1e-6)
    assert_grad_matches(lambda v: float(np.sum(G * generate_weights(v, P_prime, gen))), GradPair(P_s, dPs), 1e-6)
    assert_grad_matches(lambda v: float(np.sum(G * generate_weights(P_s, v, gen))), GradPair(P_prime, dPp), 1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_init_query_protos_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    P_s, P_prime = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    omega = rng.uniform(0.1, 0.9, size=(2, 3))
    G = rng.normal(size=(2, 3))
    dPs, dPp, dW = init_query_protos_backward(P_s, P_prime, omega, G)

    def combo(ps, pp, w):
        return float(np.sum(G * (w * ps + (1.0 - w) * pp)))

    assert_grad_matches(lambda v: combo(v, P_prime, omega), GradPair(P_s, dPs), 1e-7)
    assert_grad_matches(lambda v: combo(P_s, v, omega), GradPair(P_prime, dPp), 1e-7)
    assert_grad_matches(lambda v: combo(P_s, P_prime, v), GradPair(omega, dW), 1e-7)


def test_generator_grads_accumulate():
    gen = WeightGenerator.zeros(2)
    acc = GeneratorGrads.zeros_like(gen)
    acc.add_(GeneratorGrads(np.ones((4, 2)), np.ones(2))).add_(GeneratorGrads(np.ones((4, 2)), np.ones(2)))
    half = acc.scaled(0.5)
    np.testing.assert_array_equal(half.W, 1.0)
    np.testing.assert_array_equal(half.b, 1.0)
