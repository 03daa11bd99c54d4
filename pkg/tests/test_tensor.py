"""Tensor core: gradients against finite differences, numeric building blocks."""

import math

import numpy as np
import pytest

from mlkd.errors import (
    ContractError,
    DegenerateInputError,
    DistributionError,
    NumericError,
    ParameterError,
)
from mlkd.tensor import (
    GradTape,
    Tensor,
    add,
    clamp_min,
    concat_rows,
    cosine_similarity_matrix,
    div,
    exp,
    finite_diff_check,
    grad,
    kl_divergence_rows,
    l2_normalize_rows,
    log,
    log_softmax_rows,
    matmul,
    mul,
    neg,
    relu,
    softmax_rows,
    softplus,
    sqrt,
    square,
    sub,
    tmean,
    tsum,
    parameter,
)


def test_grad_sum_of_squares():
    x = parameter(np.array([1.0, 2.0]))
    (g,) = grad(lambda ps: tsum(square(ps[0])), [x])
    np.testing.assert_allclose(g, [2.0, 4.0])


def test_grad_of_constant_is_zero():
    c = Tensor(np.array([3.0]))
    x = parameter(np.array([1.0, 2.0]))
    (g,) = grad(lambda ps: tsum(c), [x])
    np.testing.assert_array_equal(g, np.zeros(2))


def test_grad_linearity():
    rng = np.random.default_rng(7)
    for _ in range(5):
        x0 = rng.normal(size=(3, 2))

        def f(ps):
            return tsum(mul(square(ps[0]), 0.5)) + tsum(exp(mul(ps[0], 0.1)))

        def g(ps):
            return tmean(square(sub(ps[0], 1.0)))

        def fg(ps):
            return f(ps) + g(ps)

        gf = grad(f, [parameter(x0.copy())])[0]
        gg = grad(g, [parameter(x0.copy())])[0]
        gfg = grad(fg, [parameter(x0.copy())])[0]
        np.testing.assert_allclose(gfg, gf + gg, atol=1e-10)


def test_grad_rejects_nonscalar():
    x = parameter(np.array([1.0, 2.0]))
    with pytest.raises(ContractError):
        grad(lambda ps: square(ps[0]), [x])


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_intermediate_names_operation():
    x = parameter(np.array([1000.0]))
    with pytest.raises(NumericError, match="exp"):
        grad(lambda ps: tsum(exp(ps[0])), [x])


def test_tape_is_single_use():
    x = parameter(np.array([2.0]))
    out = tsum(square(x))
    tape = GradTape(out)
    tape.gradients([x])
    with pytest.raises(ContractError):
        tape.gradients([x])


@pytest.mark.parametrize("seed", range(10))
def test_finite_diff_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    x0 = np.abs(rng.normal(size=(4, 3))) + 0.5  # keep log/sqrt arguments positive

    def f(ps):
        p = ps[0]
        out = tsum(mul(log(p), sqrt(p)))
        out = out + tsum(div(square(p), add(p, 10.0)))
        out = out + tmean(softplus(neg(p)))
        return out

    assert finite_diff_check(f, [parameter(x0)], step=1e-6) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_finite_diff_matrix_ops(seed):
    rng = np.random.default_rng(100 + seed)
    w = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4,)))
    x = Tensor(rng.normal(size=(6, 3)))

    def f(ps):
        h = relu(add(matmul(x, ps[0]), ps[1]))
        s = softmax_rows(add(h, 0.3), 0.7)
        target = Tensor(np.full((6, 4), 0.25))
        out = kl_divergence_rows(target, s)
        out = out + tmean(tsum(square(l2_normalize_rows(add(h, 1.0))), axis=1))
        out = out + tsum(mul(log_softmax_rows(h), 1.0 / 24.0))
        return out

    assert finite_diff_check(f, [w, b], step=1e-6) < 1e-5


def test_finite_diff_check_rejects_bad_step():
    x = parameter(np.array([1.0]))
    with pytest.raises(ParameterError):
        finite_diff_check(lambda ps: tsum(ps[0]), [x], step=0.5)
    with pytest.raises(ParameterError):
        finite_diff_check(lambda ps: tsum(ps[0]), [x], step=0.0)


def test_finite_diff_cubic_small_error():
    x = parameter(np.array([1.0]))
    err = finite_diff_check(lambda ps: tsum(mul(square(ps[0]), ps[0])), [x], step=1e-5)
    assert err < 1e-6


def test_concat_rows_gradient():
    a = parameter(np.array([[1.0, 2.0]]))
    b = parameter(np.array([[3.0, 4.0], [5.0, 6.0]]))

    def f(ps):
        return tsum(mul(concat_rows([ps[0], ps[1]]), Tensor(np.arange(6.0).reshape(3, 2))))

    ga, gb = grad(f, [a, b])
    np.testing.assert_allclose(ga, [[0.0, 1.0]])
    np.testing.assert_allclose(gb, [[2.0, 3.0], [4.0, 5.0]])


# -- softmax ------------------------------------------------------------


def test_softmax_symmetric_row():
    out = softmax_rows(Tensor(np.array([[0.0, 0.0]])), 1.0)
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_softmax_closed_form():
    out = softmax_rows(Tensor(np.array([[1.0, 2.0]])), 1.0)
    e = math.e
    np.testing.assert_allclose(out.data, [[1 / (1 + e), e / (1 + e)]], atol=1e-12)


def test_softmax_flattens_at_huge_temperature():
    out = softmax_rows(Tensor(np.array([[1.0, 2.0]])), 1e6)
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-5)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(20, 7)) * 10
    out = softmax_rows(Tensor(m), 0.5)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(20), atol=1e-12)
    shifted = softmax_rows(Tensor(m + 123.456), 0.5)
    np.testing.assert_allclose(out.data, shifted.data, atol=1e-12)


def test_softmax_requires_positive_tau():
    with pytest.raises(ParameterError):
        softmax_rows(Tensor(np.zeros((1, 2))), 0.0)
    with pytest.raises(ParameterError):
        softmax_rows(Tensor(np.zeros((1, 2))), -1.0)


# -- cosine similarity ---------------------------------------------------


def test_cosine_self_similarity_is_one():
    v = Tensor(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(cosine_similarity_matrix(v, v).data, [[1.0]], atol=1e-12)


def test_cosine_orthogonal_is_zero():
    a = Tensor(np.array([[1.0, 0.0]]))
    b = Tensor(np.array([[0.0, 2.0]]))
    np.testing.assert_allclose(cosine_similarity_matrix(a, b).data, [[0.0]], atol=1e-12)


def test_cosine_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(3, 5))
    got = cosine_similarity_matrix(Tensor(a), Tensor(b)).data
    for i in range(3):
        for j in range(3):
            want = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
            assert abs(got[i, j] - want) < 1e-12


def test_cosine_positive_rescaling_invariance():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(5, 3))
    base = cosine_similarity_matrix(Tensor(a), Tensor(b)).data
    scales_a = rng.uniform(0.1, 9.0, size=(4, 1))
    scales_b = rng.uniform(0.1, 9.0, size=(5, 1))
    scaled = cosine_similarity_matrix(Tensor(a * scales_a), Tensor(b * scales_b)).data
    np.testing.assert_allclose(base, scaled, atol=1e-12)
    assert np.all(np.abs(scaled) <= 1.0 + 1e-12)


def test_cosine_zero_row_reports_index():
    a = np.ones((3, 2))
    a[1] = 0.0
    with pytest.raises(DegenerateInputError, match="index 1"):
        cosine_similarity_matrix(Tensor(a), Tensor(np.ones((2, 2))))


# -- KL divergence -------------------------------------------------------


def test_kl_identity_is_zero():
    p = Tensor(np.array([[0.3, 0.7], [0.9, 0.1]]))
    assert kl_divergence_rows(p, p).item() == 0.0


def test_kl_closed_form():
    p = Tensor(np.array([[0.5, 0.5]]))
    q = Tensor(np.array([[0.25, 0.75]]))
    want = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert abs(kl_divergence_rows(p, q).item() - want) < 1e-12


def test_kl_nonnegative_and_zero_only_at_equality():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6), size=8)
        q = rng.dirichlet(np.ones(6), size=8)
        value = kl_divergence_rows(Tensor(p), Tensor(q)).item()
        assert value >= 0.0
        if np.max(np.abs(p - q)) > 1e-3:
            assert value > 0.0


def test_kl_handles_zero_probabilities():
    p = Tensor(np.array([[1.0, 0.0]]))
    q = Tensor(np.array([[0.5, 0.5]]))
    assert abs(kl_divergence_rows(p, q).item() - math.log(2.0)) < 1e-12


def test_kl_rejects_nondistribution():
    good = Tensor(np.array([[0.5, 0.5]]))
    with pytest.raises(DistributionError):
        kl_divergence_rows(Tensor(np.array([[0.5, 0.6]])), good)
    with pytest.raises(DistributionError):
        kl_divergence_rows(Tensor(np.array([[1.5, -0.5]])), good)


def test_clamp_min_gradient_gates():
    x = parameter(np.array([0.5, 2.0]))
    (g,) = grad(lambda ps: tsum(clamp_min(ps[0], 1.0)), [x])
    np.testing.assert_allclose(g, [0.0, 1.0])


def test_l2_normalize_rows_zero_row():
    with pytest.raises(DegenerateInputError):
        l2_normalize_rows(Tensor(np.zeros((2, 3))))
