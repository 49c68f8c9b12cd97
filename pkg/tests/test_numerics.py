import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boxprior.errors import EvaluationError, LabelError, NormalizationError, ShapeError
from boxprior.numerics import ops
from boxprior.numerics import tensor as nt
from boxprior.numerics.gradcheck import grad_check
from boxprior.numerics.layers import (
    AttentionHead,
    AttentionParams,
    MlpLayer,
    MlpParams,
    attention_weights,
    init_attention,
    init_mlp,
    mlp_forward,
    multihead_attention,
)

import oracles

finite = st.floats(-50, 50, allow_nan=False)


# -- softmax / sigmoid --------------------------------------------------------


def test_softmax_symmetric_row():
    np.testing.assert_array_equal(ops.softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]])


def test_softmax_matches_naive_formula():
    m = np.random.default_rng(0).normal(size=(5, 7))
    expected = np.array([oracles.softmax_oracle(row) for row in m])
    np.testing.assert_allclose(ops.softmax_rows(m), expected, rtol=0, atol=1e-14)


@given(arrays(np.float64, (3, 6), elements=finite), st.floats(-1e3, 1e3))
def test_softmax_rows_stochastic_and_shift_invariant(m, c):
    y = ops.softmax_rows(m)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ops.softmax_rows(m + c), y, atol=1e-12)


def test_softmax_survives_large_entries():
    y = ops.softmax_rows([[1000.0, 0.0], [-1000.0, -1000.0]])
    np.testing.assert_allclose(y, [[1.0, 0.0], [0.5, 0.5]])


def test_sigmoid_basics():
    assert ops.sigmoid(np.array([0.0]))[0] == 0.5
    with np.errstate(over="raise"):
        assert ops.sigmoid(np.array([500.0, -500.0])).tolist() == [1.0, pytest.approx(0.0, abs=1e-200)]
    x = np.random.default_rng(1).normal(scale=5, size=100)
    np.testing.assert_allclose(ops.sigmoid(-x), 1.0 - ops.sigmoid(x), atol=1e-15)


# -- MLP ------------------------------------------------------------------------


def _plain_layers(params):
    return [(l.weight.data, l.bias.data, l.activation) for l in params.layers]


def test_mlp_identity_layer():
    params = MlpParams([MlpLayer(np.eye(3), np.zeros(3), "none")])
    x = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(mlp_forward(params, x).data, x)


def test_mlp_zero_input_gives_bias_path():
    rng = np.random.default_rng(3)
    params = init_mlp(rng, [3, 5, 2], ["relu", "none"])
    for layer in params.layers:
        layer.bias.data[:] = rng.normal(size=layer.bias.shape)
    b0, b1 = params.layers[0].bias.data, params.layers[1].bias.data
    expected = np.maximum(b0, 0) @ params.layers[1].weight.data + b1
    out = mlp_forward(params, np.zeros((2, 3))).data
    np.testing.assert_allclose(out, np.tile(expected, (2, 1)), atol=1e-15)


def test_mlp_matches_loop_oracle():
    rng = np.random.default_rng(4)
    params = init_mlp(rng, [4, 6, 3], ["relu", "sigmoid"])
    params.layers[0].bias.data[:] = rng.normal(size=6)
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(mlp_forward(params, x).data, oracles.mlp_oracle(_plain_layers(params), x), atol=1e-13)


def test_mlp_shape_errors():
    params = init_mlp(np.random.default_rng(0), [4, 2], ["none"])
    with pytest.raises(ShapeError):
        mlp_forward(params, np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        MlpParams([MlpLayer(np.zeros((2, 3)), np.zeros(3)), MlpLayer(np.zeros((4, 1)), np.zeros(1))])


# -- cosine ---------------------------------------------------------------------


def test_cosine_cases():
    a = np.array([[1.0, 2.0, 3.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    b = np.array([[1.0, 2.0, 3.0], [0.0, 5.0, 0.0], [4.0, 5.0, 6.0]])
    out = ops.cosine_similarity(a, b, 1e-8)
    assert out[0] == pytest.approx(1.0, abs=1e-15)
    assert out[1] == 0.0
    assert out[2] == 0.0


def test_cosine_matches_oracle_and_bounds():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
    out = ops.cosine_similarity(a, b)
    np.testing.assert_allclose(out, oracles.cosine_oracle(a, b, 1e-8), atol=1e-14)
    assert np.all(np.abs(out) <= 1.0)


# -- attention --------------------------------------------------------------------


def _plain_heads(params):
    return [(h.w_query.data, h.w_key.data, h.w_value.data) for h in params.heads]


def test_attention_single_key():
    rng = np.random.default_rng(6)
    params = init_attention(rng, 4, 2)
    q, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    out = multihead_attention(params, q, rng.normal(size=1), v).data
    expected = np.hstack([v @ h.w_value.data for h in params.heads])
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_attention_constant_keys_mean_pool():
    rng = np.random.default_rng(7)
    params = init_attention(rng, 6, 3)
    q, v = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    out = multihead_attention(params, q, np.full(5, 0.7), v).data
    expected = np.hstack([(v @ h.w_value.data).mean(axis=0, keepdims=True) for h in params.heads])
    np.testing.assert_allclose(out, np.tile(expected, (5, 1)), atol=1e-14)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(8)
    params = init_attention(rng, 8, 2)
    q, k, v = rng.normal(size=(6, 8)), rng.normal(size=6), rng.normal(size=(6, 8))
    out = multihead_attention(params, q, k, v).data
    np.testing.assert_allclose(out, oracles.attention_oracle(_plain_heads(params), q, k, v), atol=1e-12)


def test_attention_weights_row_stochastic():
    rng = np.random.default_rng(9)
    params = init_attention(rng, 8, 2)
    for w in attention_weights(params, rng.normal(size=(7, 8)), rng.normal(size=7)):
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


def test_attention_shape_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        init_attention(rng, 6, 4)
    params = init_attention(rng, 4, 2)
    with pytest.raises(ShapeError):
        multihead_attention(params, np.zeros((3, 4)), np.zeros(2), np.zeros((3, 4)))


# -- losses ---------------------------------------------------------------------------


def test_cross_entropy_cases():
    assert ops.cross_entropy([[0.0, 1000.0]], [1]) == 0.0
    for c in (2, 4, 17):
        assert ops.cross_entropy(np.zeros((3, c)), [0, 1, 1]) == pytest.approx(math.log(c), abs=1e-12)
    rng = np.random.default_rng(10)
    logits, labels = rng.normal(size=(8, 4)), rng.integers(0, 4, 8)
    assert ops.cross_entropy(logits, labels) == pytest.approx(oracles.cross_entropy_oracle(logits, labels), abs=1e-13)
    with pytest.raises(LabelError):
        ops.cross_entropy(logits, np.full(8, 4))


def test_kl_cases():
    p = ops.softmax_rows(np.random.default_rng(11).normal(size=(10, 5)))
    assert abs(ops.kl_divergence(p, p)) < 1e-12
    assert ops.kl_divergence([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2), abs=1e-15)
    # the clamped zero entry contributes exactly 0 * (log 1e-12 - log 0.5)
    assert oracles.kl_oracle([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(NormalizationError):
        ops.kl_divergence([[0.7, 0.7]], [[0.5, 0.5]])


@settings(max_examples=60)
@given(arrays(np.float64, (4, 3), elements=st.floats(-20, 20)), arrays(np.float64, (4, 3), elements=st.floats(-20, 20)))
def test_kl_nonnegative(a, b):
    p, q = ops.softmax_rows(a), ops.softmax_rows(b)
    assert ops.kl_divergence(p, q) >= 0.0
    assert ops.kl_divergence(p, q) == pytest.approx(oracles.kl_oracle(p, q), rel=1e-10, abs=1e-12)


def test_lovasz_perfect_prediction_is_zero():
    labels = np.array([0, 2, 1, 1])
    assert ops.lovasz_softmax(np.eye(3)[labels], labels) == 0.0


def test_lovasz_binary_one_wrong_point():
    probs = np.array([[1.0, 0.0], [1.0, 0.0]])
    labels = np.array([0, 1])
    expected = oracles.lovasz_softmax_oracle(probs, labels)
    # class 0: IoU 1/2 -> loss 0.5; class 1: IoU 0 -> loss 1
    assert expected == pytest.approx(0.75, abs=1e-15)
    assert ops.lovasz_softmax(probs, labels) == pytest.approx(expected, abs=1e-12)


def test_lovasz_oracles_agree():
    rng = np.random.default_rng(12)
    for _ in range(30):
        n = int(rng.integers(1, 6))
        probs = ops.softmax_rows(rng.normal(size=(n, 3)))
        labels = rng.integers(0, 3, n)
        a = oracles.lovasz_softmax_oracle(probs, labels)
        b = oracles.lovasz_softmax_oracle(probs, labels, oracles.lovasz_extension_integral)
        assert a == pytest.approx(b, abs=1e-12)
        assert ops.lovasz_softmax(probs, labels) == pytest.approx(a, abs=1e-12)


def test_lovasz_is_permutation_invariant():
    rng = np.random.default_rng(13)
    probs = ops.softmax_rows(rng.normal(size=(9, 4)))
    labels = rng.integers(0, 4, 9)
    perm = rng.permutation(9)
    assert ops.lovasz_softmax(probs[perm], labels[perm]) == pytest.approx(ops.lovasz_softmax(probs, labels), abs=1e-14)


# -- tape and gradient checking ---------------------------------------------------------


def test_gradcheck_linear_function():
    w = nt.parameter(np.random.default_rng(14).normal(size=(3, 2)))
    c = np.random.default_rng(15).normal(size=(3, 2))
    report = grad_check(lambda: nt.total(nt.mul(w, c)), {"w": w})
    assert report.max_error < 1e-10


def test_gradcheck_sigmoid_at_zero():
    x = nt.parameter(np.zeros((1, 1)))
    y = nt.sigmoid(x)
    y.backward()
    assert x.grad[0, 0] == 0.25
    numeric = (ops.sigmoid(np.array([1e-5]))[0] - ops.sigmoid(np.array([-1e-5]))[0]) / 2e-5
    assert abs(numeric - 0.25) < 1e-8
    assert grad_check(lambda: nt.total(nt.sigmoid(x)), {"x": x}).max_error < 1e-8


def test_gradcheck_rejects_nonfinite_loss():
    x = nt.parameter(np.array([[np.inf]]))
    with pytest.raises(EvaluationError):
        grad_check(lambda: nt.total(x), {"x": x})


def test_gradcheck_detects_wrong_gradient():
    x = nt.parameter(np.array([[1.0, 2.0]]))

    def broken():
        y = nt.mul(x, x)
        # Pretend the derivative of x^2 is x (half the truth).
        return nt.Tensor(y.data.sum(), True, (x,), lambda g: (g * x.data,))

    assert grad_check(broken, {"x": x}).max_error > 0.3


def _projected_loss(out, rng):
    weights = rng.normal(size=out.shape)
    return nt.total(nt.mul(out, weights))


@pytest.mark.parametrize("seed", range(10))
def test_gradients_of_parameterized_ops(seed):
    rng = np.random.default_rng(seed)
    mlp = init_mlp(rng, [5, 7, 4], ["sigmoid", "none"])
    att = init_attention(rng, 6, 2)
    x = nt.parameter(rng.normal(size=(4, 5)))
    q = nt.parameter(rng.normal(size=(4, 6)))
    k = nt.parameter(rng.normal(size=4))
    v = nt.parameter(rng.normal(size=(4, 6)))
    w_mlp = rng.normal(size=(4, 4))
    w_att = rng.normal(size=(4, 6))

    params = dict(mlp.named_tensors("mlp."))
    params.update(att.named_tensors("att."))
    params.update(x=x, q=q, k=k, v=v)

    def loss():
        a = nt.total(nt.mul(mlp_forward(mlp, x), w_mlp))
        b = nt.total(nt.mul(multihead_attention(att, q, k, v), w_att))
        return a + b

    report = grad_check(loss, params, step=1e-5)
    assert report.max_error < 1e-4, report.worst()


@pytest.mark.parametrize("seed", range(10))
def test_gradients_of_losses(seed):
    rng = np.random.default_rng(100 + seed)
    logits = nt.parameter(rng.normal(size=(6, 4)))
    a = nt.parameter(rng.normal(size=(6, 5)))
    b = nt.parameter(rng.normal(size=(6, 5)))
    labels = rng.integers(0, 4, 6)
    teacher = ops.softmax_rows(rng.normal(size=(6, 4)))
    cw = rng.normal(size=6)

    def loss():
        probs = nt.softmax_rows(logits)
        return (
            nt.cross_entropy(logits, labels)
            + nt.lovasz_softmax(probs, labels)
            + nt.kl_divergence(teacher, probs)
            + nt.total(nt.mul(nt.cosine_similarity(a, b), cw))
        )

    report = grad_check(loss, {"logits": logits, "a": a, "b": b})
    assert report.max_error < 1e-4, report.worst()


def test_take_rows_accumulates_repeats():
    x = nt.parameter(np.arange(6.0).reshape(3, 2))
    y = nt.take_rows(x, [0, 2, 0])
    nt.total(y).backward()
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_detached_teacher_gets_no_gradient():
    logits = nt.parameter(np.random.default_rng(0).normal(size=(3, 3)))
    student = nt.parameter(np.random.default_rng(1).normal(size=(3, 3)))
    teacher = nt.softmax_rows(logits)
    nt.kl_divergence(teacher, nt.softmax_rows(student)).backward()
    assert logits.grad is None
    assert np.abs(student.grad).max() > 0
