import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from dynts.numkernel import (
    MlpParams,
    ShapeError,
    finite_diff_check,
    gelu,
    gelu_grad,
    mlp_backward,
    mlp_forward,
    rotary_apply,
    rotary_heads,
    softmax_rows,
)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([0.0, 0.0, 0.0]), [1 / 3] * 3)
    np.testing.assert_allclose(softmax_rows([5.0]), [1.0])
    np.testing.assert_allclose(softmax_rows([0.0, math.log(2)]), [1 / 3, 2 / 3])


def test_softmax_is_stable_for_large_logits():
    out = softmax_rows(np.array([[1000.0, 1000.0], [-1e4, 0.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0], [0.5, 0.5])


def test_softmax_rejects_bad_input():
    with pytest.raises(ShapeError):
        softmax_rows(np.zeros((0,)))
    with pytest.raises(ValueError):
        softmax_rows([np.nan, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    p = softmax_rows(np.array([row, row[::-1]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_rotary_examples():
    v = np.array([0.3, -1.2, 4.0, 2.0])
    np.testing.assert_array_equal(rotary_apply(v, 0), v)
    for p in (1, 5, 17):
        # a 2-vector uses theta = base**0 = 1
        np.testing.assert_allclose(rotary_apply(np.array([1.0, 0.0]), p), [math.cos(p), math.sin(p)])
    r = rotary_apply(np.array([1.0, 2.0, 3.0, 4.0]), 7)
    assert np.linalg.norm(r) == pytest.approx(np.linalg.norm([1, 2, 3, 4]))


def test_rotary_rejects_odd_length():
    with pytest.raises(ShapeError):
        rotary_apply(np.ones(3), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 400), st.integers(0, 400))
def test_rotary_scores_depend_on_offset_only(p, q):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    s1 = rotary_apply(a, p) @ rotary_apply(b, q)
    s2 = rotary_apply(a, p + 11) @ rotary_apply(b, q + 11)
    assert s1 == pytest.approx(s2, abs=1e-9)


def test_rotary_heads_matches_rotary_apply():
    x = np.random.default_rng(2).normal(size=(3, 8))
    out = rotary_heads(x, 9, 8)
    for h in range(3):
        np.testing.assert_allclose(out[h], rotary_apply(x[h], 9))
    partial = rotary_heads(x, 9, 4)
    np.testing.assert_array_equal(partial[:, 4:], x[:, 4:])


def test_gelu_reference_values():
    x = np.array([-2.0, 0.0, 2.0])
    np.testing.assert_allclose(gelu(x), 0.5 * x * (1 + erf(x / math.sqrt(2))))
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)


def test_zero_params_score_zero():
    p = MlpParams.zeros(6)
    s, _ = mlp_forward(p, np.arange(6.0))
    assert s == 0.0


def test_unit_chain_is_gelu_of_gelu():
    p = MlpParams(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1))
    s, _ = mlp_forward(p, np.array([2.0]))
    g = lambda z: 0.5 * z * (1 + math.erf(z / math.sqrt(2)))
    assert float(s) == pytest.approx(g(g(2.0)), rel=1e-12)


def test_forward_matches_straight_line_evaluation(rng):
    p = MlpParams.init(8, rng)
    p.b1 += rng.normal(size=p.b1.shape)
    x = rng.normal(size=8)
    g = lambda z: [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in z]
    a1 = g([sum(p.w1[i, j] * x[j] for j in range(8)) + p.b1[i] for i in range(16)])
    a2 = g([sum(p.w2[i, j] * a1[j] for j in range(16)) + p.b2[i] for i in range(4)])
    ref = sum(p.w3[0, j] * a2[j] for j in range(4)) + p.b3[0]
    s, _ = mlp_forward(p, x)
    assert float(s) == pytest.approx(ref, rel=1e-12)
    sb, _ = mlp_forward(p, np.stack([x, x]))
    np.testing.assert_allclose(sb, [ref, ref], rtol=1e-12)


def test_backward_zero_upstream(rng):
    p = MlpParams.init(4, rng)
    _, acts = mlp_forward(p, rng.normal(size=4))
    g, gx = mlp_backward(p, acts, 0.0)
    assert all(not np.any(a) for _, a in g.items())
    assert not np.any(gx)


def test_backward_linear_output_layer(rng):
    # score = w3 . a2 + b3 is linear in the last layer: d/dw3 = a2, d/db3 = 1
    p = MlpParams.init(4, rng)
    _, acts = mlp_forward(p, rng.normal(size=4))
    g, _ = mlp_backward(p, acts, 1.0)
    np.testing.assert_allclose(g.w3[0], acts.a2)
    assert g.b3[0] == 1.0


def test_backward_matches_finite_differences(rng):
    p = MlpParams.init(6, rng)
    for _, a in p.items():
        a += 0.1 * rng.normal(size=a.shape)
    x = rng.normal(size=(4, 6))
    y = rng.normal(size=4)

    def loss(q):
        s, _ = mlp_forward(q, x)
        return 0.5 * float(np.sum((s - y) ** 2))

    s, acts = mlp_forward(p, x)
    g, _ = mlp_backward(p, acts, s - y)
    assert finite_diff_check(loss, p, g, eps=1e-3) < 1e-4
    assert finite_diff_check(loss, p, g, eps=1e-4, max_per_array=5) < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    p = MlpParams.init(4, rng)
    x = rng.normal(size=4)
    _, acts = mlp_forward(p, x)
    _, gx = mlp_backward(p, acts, 1.0)
    h = 1e-5
    fd = [(float(mlp_forward(p, x + h * e)[0]) - float(mlp_forward(p, x - h * e)[0])) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(gx, fd, atol=1e-8)


def test_checker_exact_on_quadratic():
    p = MlpParams.zeros(2)
    p.b3[0] = 0.7
    f = lambda q: 3.0 * q.b3[0] ** 2
    g = MlpParams.zeros(2)
    g.b3[0] = 6.0 * 0.7
    assert finite_diff_check(f, p, g) < 1e-8


def test_checker_detects_corrupted_gradient(rng):
    p = MlpParams.init(4, rng)
    x = rng.normal(size=4)
    f = lambda q: float(mlp_forward(q, x)[0])
    _, acts = mlp_forward(p, x)
    g, _ = mlp_backward(p, acts, 1.0)
    g.w2[0, 0] += 1.0
    assert finite_diff_check(f, p, g) > 0.1


def test_backward_rejects_foreign_activations(rng):
    p = MlpParams.init(4, rng)
    _, acts = mlp_forward(p, rng.normal(size=4))
    with pytest.raises(ShapeError):
        mlp_backward(p.copy(), acts, 1.0)


def test_mlp_shape_errors(rng):
    with pytest.raises(ShapeError):
        mlp_forward(MlpParams.init(4, rng), np.ones(5))
    with pytest.raises(ShapeError):
        MlpParams(np.ones((2, 3)), np.ones(2), np.ones((1, 3)), np.ones(1), np.ones((1, 1)), np.ones(1))
