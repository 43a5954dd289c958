"""Numerics: forward values against frozen high-precision oracles, reverse-mode
gradients against central finite differences, and distribution properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmix import autodiff as ad
from promptmix.errors import (
    DegenerateVectorError,
    DistributionError,
    HyperparameterError,
    InvalidInputError,
    ShapeError,
)

# Frozen from an arbitrary-precision (50-digit) evaluation of the same inputs.
SOFTMAX_TAU007 = [0.9999890840907312649961731, 1.088002145533982460227171e-05, 3.588781339517922459185387e-08]
KL_07_03_VS_04_06 = 0.1837868973868122875644523


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    p = ad.softmax(ad.constant([0.0, 0.0]), 1.0)
    np.testing.assert_allclose(p.data, [0.5, 0.5], atol=1e-15)


def test_softmax_analytic_two_thirds():
    p = ad.softmax(ad.constant([math.log(2.0), 0.0]), 1.0)
    np.testing.assert_allclose(p.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)


def test_softmax_low_temperature_matches_high_precision_oracle():
    p = ad.softmax(ad.constant([0.9, 0.1, -0.3]), 0.07)
    np.testing.assert_allclose(p.data, SOFTMAX_TAU007, rtol=1e-13)


def test_softmax_rejects_bad_inputs():
    with pytest.raises(HyperparameterError):
        ad.softmax(ad.constant([1.0, 2.0]), 0.0)
    with pytest.raises(HyperparameterError):
        ad.softmax(ad.constant([1.0, 2.0]), -0.5)
    with pytest.raises(InvalidInputError):
        ad.softmax(ad.constant(np.zeros(0)), 1.0)


def test_softmax_overflow_safe():
    p = ad.softmax(ad.constant([1000.0, 999.0, -1000.0]), 1.0)
    assert np.all(np.isfinite(p.data))
    assert abs(p.data.sum() - 1.0) < 1e-12


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-60, 60), min_size=1, max_size=8), st.floats(0.01, 10.0))
def test_softmax_normalization_property(logits, tau):
    p = ad.softmax(ad.constant(logits), tau)
    assert abs(p.data.sum() - 1.0) < 1e-12
    assert np.all(p.data > 0.0) and np.all(p.data <= 1.0 + 1e-15)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-60, 60), min_size=1, max_size=8), st.floats(-40, 40))
def test_softmax_shift_invariance_property(logits, shift):
    base = ad.softmax(ad.constant(logits), 1.0)
    shifted = ad.softmax(ad.constant([x + shift for x in logits]), 1.0)
    np.testing.assert_allclose(base.data, shifted.data, atol=1e-12)


# ---------------------------------------------------------------------------
# cosine


def test_cosine_identity_and_antipodal():
    rng = np.random.default_rng(0)
    v = rng.normal(size=6)
    assert ad.cosine_similarity(ad.constant(v), ad.constant(v)).item() == pytest.approx(1.0, abs=1e-12)
    assert ad.cosine_similarity(ad.constant(v), ad.constant(-v)).item() == pytest.approx(-1.0, abs=1e-12)


def test_cosine_orthogonal():
    assert ad.cosine_similarity(ad.constant([1.0, 0.0]), ad.constant([0.0, 1.0])).item() == 0.0


def test_cosine_scale_invariance_property():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.normal(size=5)
        b = rng.normal(size=5)
        alpha = float(rng.uniform(0.1, 100.0))
        c1 = ad.cosine_similarity(ad.constant(a), ad.constant(b)).item()
        c2 = ad.cosine_similarity(ad.constant(alpha * a), ad.constant(b)).item()
        assert c1 == pytest.approx(c2, abs=1e-12)


def test_cosine_clamped_and_errors():
    v = np.full(4, 0.5)
    assert -1.0 <= ad.cosine_similarity(ad.constant(v), ad.constant(2 * v)).item() <= 1.0
    with pytest.raises(DegenerateVectorError):
        ad.cosine_similarity(ad.constant(np.zeros(4)), ad.constant(v))
    with pytest.raises(ShapeError):
        ad.cosine_similarity(ad.constant([1.0, 2.0]), ad.constant([1.0, 2.0, 3.0]))


# ---------------------------------------------------------------------------
# KL divergence


def test_kl_identical_is_zero():
    p = [0.2, 0.5, 0.3]
    assert ad.kl_divergence(ad.constant(p), ad.constant(p)).item() == 0.0


def test_kl_onehot_vs_uniform_is_ln2():
    assert ad.kl_divergence(ad.constant([1.0, 0.0]), ad.constant([0.5, 0.5])).item() == pytest.approx(
        math.log(2.0), abs=1e-15
    )


def test_kl_matches_high_precision_oracle():
    value = ad.kl_divergence(ad.constant([0.7, 0.3]), ad.constant([0.4, 0.6])).item()
    assert value == pytest.approx(KL_07_03_VS_04_06, abs=1e-15)


def test_kl_validation():
    with pytest.raises(ShapeError):
        ad.kl_divergence(ad.constant([0.5, 0.5]), ad.constant([0.3, 0.3, 0.4]))
    with pytest.raises(DistributionError):
        ad.kl_divergence(ad.constant([0.5, 0.6]), ad.constant([0.5, 0.5]))
    with pytest.raises(DistributionError):
        ad.kl_divergence(ad.constant([0.5, 0.5]), ad.constant([1.0, 0.0]))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8), st.data())
def test_kl_nonnegative_property(weights, data):
    q_weights = data.draw(st.lists(st.floats(0.01, 10.0), min_size=len(weights), max_size=len(weights)))
    p = np.array(weights) / np.sum(weights)
    q = np.array(q_weights) / np.sum(q_weights)
    p = p / p.sum()
    q = q / q.sum()
    assert ad.kl_divergence(ad.constant(p), ad.constant(q)).item() >= 0.0


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_confident_and_uniform():
    eps = 1e-9
    p = ad.constant([1.0 - 2 * eps, eps, eps])
    assert ad.cross_entropy(p, 0).item() == pytest.approx(0.0, abs=1e-8)
    for c in (2, 5, 7):
        uniform = ad.constant(np.full(c, 1.0 / c))
        assert ad.cross_entropy(uniform, 1 % c).item() == pytest.approx(math.log(c), abs=1e-12)


def test_cross_entropy_quarter():
    assert ad.cross_entropy(ad.constant([0.25, 0.75]), 0).item() == pytest.approx(math.log(4.0), abs=1e-14)


def test_cross_entropy_index_error():
    with pytest.raises(IndexError):
        ad.cross_entropy(ad.constant([0.5, 0.5]), 2)


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_sum_gives_ones():
    p = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum_entries(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_frozen_graph_emits_nothing():
    u = ad.constant([1.0, 2.0, 3.0])
    w = ad.constant([0.5, -1.0, 2.0])
    loss = ad.cosine_similarity(u, w)
    ad.backward(loss)
    assert u.grad is None and w.grad is None


def test_backward_rejects_non_scalar():
    p = ad.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        ad.backward(ad.scale(p, 2.0))


def test_backward_accumulates_additively():
    p = ad.parameter([1.0, 2.0])
    ad.backward(ad.sum_entries(p))
    ad.backward(ad.sum_entries(p))
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])
    p.zero_grad()
    assert p.grad is None


# ---------------------------------------------------------------------------
# finite differences as the gradient oracle


def test_finite_difference_square():
    grad = ad.finite_difference_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert grad[0] == pytest.approx(6.0, abs=1e-8)


def test_softmax_cross_entropy_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=5)
    target = 2

    def f(z):
        e = np.exp(z - z.max())
        p = e / e.sum()
        return -math.log(p[target])

    numeric = ad.finite_difference_gradient(f, logits, 1e-5)
    x = ad.parameter(logits)
    ad.backward(ad.cross_entropy(ad.softmax(x, 1.0), target))
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    expected = p.copy()
    expected[target] -= 1.0
    np.testing.assert_allclose(x.grad, expected, atol=1e-12)
    np.testing.assert_allclose(numeric, expected, atol=1e-6)


def test_kl_first_argument_gradient_direction():
    p = np.array([0.3, 0.45, 0.25])
    q = np.array([0.5, 0.2, 0.3])

    def raw_kl(x):  # same formula, evaluable off the simplex
        return float(np.sum(x * (np.log(x) - np.log(q))))

    numeric = ad.finite_difference_gradient(raw_kl, p, 1e-6)
    pt = ad.parameter(p)
    ad.backward(ad.kl_divergence(pt, ad.constant(q)))
    expected = np.log(p / q) + 1.0
    np.testing.assert_allclose(pt.grad, expected, atol=1e-12)
    np.testing.assert_allclose(numeric, expected, atol=1e-6)


@pytest.mark.parametrize("shape", [(3,), (2, 4)])
def test_primitive_gradients_match_finite_differences(shape):
    rng = np.random.default_rng(11)
    ops = {
        "scale": lambda t: ad.scale(t, 1.7),
        "log": ad.log,
        "sum": ad.sum_entries,
        "mean": ad.mean_entries,
    }
    base = np.abs(rng.normal(size=shape)) + 0.5  # positive so log is valid
    for name, op in ops.items():
        x = ad.parameter(base)
        out = op(x)
        loss = ad.sum_entries(out) if out.data.ndim else out
        ad.backward(loss)

        def f(v, op=op):
            t = ad.constant(v)
            r = op(t)
            return float(np.sum(r.data))

        numeric = ad.finite_difference_gradient(f, base, 1e-6)
        np.testing.assert_allclose(x.grad, numeric, atol=1e-7, err_msg=name)


def test_matmul_and_normalize_gradients():
    rng = np.random.default_rng(13)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))

    at = ad.parameter(a)
    bt = ad.parameter(b)
    loss = ad.sum_entries(ad.normalize_rows(ad.matmul(at, bt)))
    ad.backward(loss)

    def f_a(x):
        m = x @ b
        return float(np.sum(m / np.linalg.norm(m, axis=1, keepdims=True)))

    def f_b(x):
        m = a @ x
        return float(np.sum(m / np.linalg.norm(m, axis=1, keepdims=True)))

    np.testing.assert_allclose(at.grad, ad.finite_difference_gradient(f_a, a, 1e-6), atol=1e-7)
    np.testing.assert_allclose(bt.grad, ad.finite_difference_gradient(f_b, b, 1e-6), atol=1e-7)


def test_weighted_sum_and_stack_gradients():
    rng = np.random.default_rng(17)
    mats = [rng.normal(size=(2, 3)) for _ in range(3)]
    w = np.array([0.5, 0.3, 0.2])

    tensors = [ad.parameter(m) for m in mats]
    wt = ad.parameter(w)
    out = ad.weighted_sum(tensors, wt)
    ad.backward(ad.sum_entries(out))
    for k, t in enumerate(tensors):
        np.testing.assert_allclose(t.grad, np.full((2, 3), w[k]), atol=1e-12)
    np.testing.assert_allclose(wt.grad, [m.sum() for m in mats], atol=1e-12)

    scalars = [ad.parameter(float(k)) for k in range(4)]
    vec = ad.stack_scalars(scalars)
    picked = ad.pick(vec, 2)
    ad.backward(picked)
    assert [float(s.grad) if s.grad is not None else 0.0 for s in scalars] == [0.0, 0.0, 1.0, 0.0]


def test_div_gradients_match_finite_differences():
    rng = np.random.default_rng(19)
    a = np.abs(rng.normal(size=4)) + 0.5

    at = ad.parameter(a)
    sel = ad.div(at, ad.sum_entries(at))
    ad.backward(ad.pick(sel, 1))

    def f(x):
        return float((x / x.sum())[1])

    np.testing.assert_allclose(at.grad, ad.finite_difference_gradient(f, a, 1e-6), atol=1e-7)


def test_relative_gradient_error_zero_for_zero_grads():
    assert ad.relative_gradient_error(np.zeros(3), np.zeros(3)) == 0.0
    assert ad.relative_gradient_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8


def test_tensor_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        ad.Tensor([np.nan, 1.0])
    with pytest.raises(InvalidInputError):
        ad.Tensor([np.inf, 1.0])
