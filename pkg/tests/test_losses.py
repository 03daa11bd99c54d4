"""Losses: closed-form oracles, brute-force oracles, gradient and invariance checks."""

import math

import numpy as np
import pytest

from mlkd.errors import (
    CapabilityError,
    ContractError,
    DegenerateInputError,
    LabelError,
    ParameterError,
    ShapeError,
)
from mlkd.losses import (
    LossBreakdown,
    LossWeights,
    kd_alignment_decomposition,
    loss_align,
    loss_ce,
    loss_corr,
    loss_kd,
    loss_sup,
    loss_total,
)
from mlkd.networks import make_transform_head
from mlkd.tensor import (
    GradTape,
    Tensor,
    concat_rows,
    finite_diff_check,
    l2_normalize_rows,
    parameter,
)


def softmax_np(x, tau=1.0):
    e = np.exp(x / tau - np.max(x / tau, axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- defaults ------------------------------------------------------------


def test_default_weights():
    w = LossWeights()
    assert (w.lambda1, w.lambda2) == (10.0, 20.0)
    assert (w.w_sup, w.w_ce) == (0.5, 1.0)
    assert (w.tau_corr, w.tau_sup) == (0.5, 0.07)
    assert w.kd_temperature == 4.0


def test_weights_validation():
    with pytest.raises(ParameterError):
        LossWeights(lambda1=-1).validate()
    with pytest.raises(ParameterError):
        LossWeights(tau_corr=0.0).validate()


# -- standard KD ----------------------------------------------------------


def test_kd_equal_logits_gives_teacher_entropy():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(6, 4)))
    value = loss_kd(logits, logits, 3.0).item()
    p = softmax_np(logits.data, 3.0)
    entropy = -(p * np.log(p)).sum(axis=1).mean()
    assert abs(value - entropy) < 1e-12


def test_kd_peaked_teacher_matching_student_is_zero():
    logits = np.zeros((2, 3))
    logits[:, 0] = 1e6
    assert loss_kd(Tensor(logits), Tensor(logits), 1.0).item() < 1e-9


def test_kd_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    lt, ls = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    value = loss_kd(Tensor(lt), Tensor(ls), 1.7).item()
    p, q = softmax_np(lt, 1.7), softmax_np(ls, 1.7)
    want = float(np.mean([-(p[i] * np.log(q[i])).sum() for i in range(2)]))
    assert abs(value - want) < 1e-12


def test_kd_rejects_mismatched_shapes_and_bad_temperature():
    with pytest.raises(ShapeError):
        loss_kd(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), 1.0)
    with pytest.raises(ParameterError):
        loss_kd(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), 0.0)


def test_kd_teacher_side_gets_no_gradient():
    rng = np.random.default_rng(2)
    lt = parameter(rng.normal(size=(3, 4)))
    ls = parameter(rng.normal(size=(3, 4)))
    out = loss_kd(lt, ls, 2.0)
    g_t, g_s = GradTape(out).gradients([lt, ls])
    np.testing.assert_array_equal(g_t, np.zeros_like(g_t))
    assert np.any(g_s != 0.0)


# -- soft cross-entropy decomposition ----------------------------------------


def test_decomposition_at_perfect_alignment():
    rng = np.random.default_rng(3)
    for _ in range(20):
        lt = Tensor(rng.normal(size=(4, 6)))
        ls = Tensor(rng.normal(size=(4, 6)))
        term1, term2 = kd_alignment_decomposition(lt, ls, lt)
        p = softmax_np(lt.data)
        q = softmax_np(ls.data)
        entropy = -(p * np.log(p)).sum(axis=1).mean()
        kl = (p * (np.log(p) - np.log(q))).sum(axis=1).mean()
        assert abs(term1.item() - entropy) < 1e-10
        assert abs(term2.item() - kl) < 1e-10
        assert abs(term1.item() + term2.item() - loss_kd(lt, ls, 1.0).item()) < 1e-10


def test_decomposition_sums_to_kd_for_any_head_output():
    rng = np.random.default_rng(4)
    lt, ls, la = (Tensor(rng.normal(size=(5, 4))) for _ in range(3))
    term1, term2 = kd_alignment_decomposition(lt, ls, la)
    assert abs(term1.item() + term2.item() - loss_kd(lt, ls, 1.0).item()) < 1e-10


# -- alignment --------------------------------------------------------------


def identity_head(dim):
    head = make_transform_head(dim, dim, 1.0, seed=0)
    head.w1.data = np.eye(dim)
    head.b1.data = np.zeros(dim)
    head.w2.data = np.eye(dim)
    head.b2.data = np.zeros(dim)
    return head


def test_align_zero_at_perfect_alignment():
    rng = np.random.default_rng(5)
    z = np.abs(rng.normal(size=(4, 3)))
    assert loss_align(Tensor(z), Tensor(z), identity_head(3)).item() == 0.0


def test_align_hand_case():
    head = identity_head(2)
    z_s = Tensor(np.array([[1.0, 0.0]]))
    z_t = Tensor(np.array([[0.0, 1.0]]))
    assert abs(loss_align(z_s, z_t, head).item() - 2.0) < 1e-12


def test_align_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    head = make_transform_head(3, 4, 2.0, seed=1)
    z_s = Tensor(rng.normal(size=(5, 3)))
    z_t = Tensor(rng.normal(size=(5, 4)))
    err = finite_diff_check(lambda ps: loss_align(z_s, z_t, head),
                            head.parameters(), step=1e-6)
    assert err < 1e-4


def test_align_teacher_receives_no_gradient():
    rng = np.random.default_rng(7)
    head = make_transform_head(3, 4, 1.0, seed=2)
    z_s = parameter(rng.normal(size=(4, 3)))
    z_t = parameter(rng.normal(size=(4, 4)))
    out = loss_align(z_s, z_t, head)
    g_t = GradTape(out).gradients([z_t])[0]
    np.testing.assert_array_equal(g_t, np.zeros_like(g_t))


# -- correlation -------------------------------------------------------------


def test_corr_zero_when_similarity_matrices_match():
    rng = np.random.default_rng(8)
    anchors = rng.normal(size=(5, 4))
    batch = rng.normal(size=(5, 4))
    value = loss_corr(Tensor(anchors), Tensor(batch),
                      Tensor(anchors.copy()), Tensor(batch.copy()), 0.5)
    assert abs(value.item()) < 1e-15


def test_corr_hand_case():
    zt_anchor = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    zt = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    zs = Tensor(np.array([[1.0, 1.0], [1.0, 1.0]]))
    value = loss_corr(zt_anchor, zt, zs, zs, 0.5).item()
    e2 = math.exp(2.0)
    p = np.array([e2 / (1 + e2), 1 / (1 + e2)])
    want = float((p * np.log(p / 0.5)).sum())
    assert abs(value - want) < 1e-12


def test_corr_scale_invariance_both_sides():
    rng = np.random.default_rng(9)
    zt_anchor, zt = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    zs_anchor, zs = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    base = loss_corr(Tensor(zt_anchor), Tensor(zt), Tensor(zs_anchor), Tensor(zs), 0.5).item()
    st = rng.uniform(0.2, 5.0, size=(6, 1))
    ss = rng.uniform(0.2, 5.0, size=(6, 1))
    scaled = loss_corr(Tensor(zt_anchor * 3.0), Tensor(zt * st),
                       Tensor(zs_anchor * ss), Tensor(zs * 7.0), 0.5).item()
    assert abs(base - scaled) < 1e-12


def test_corr_gradient_flows_to_student_only():
    rng = np.random.default_rng(10)
    zt_anchor = parameter(rng.normal(size=(4, 5)))
    zt = parameter(rng.normal(size=(4, 5)))
    zs_anchor = parameter(rng.normal(size=(4, 3)))
    zs = parameter(rng.normal(size=(4, 3)))
    out = loss_corr(zt_anchor, zt, zs_anchor, zs, 0.5)
    g = GradTape(out).gradients([zt_anchor, zt, zs_anchor, zs])
    np.testing.assert_array_equal(g[0], np.zeros_like(g[0]))
    np.testing.assert_array_equal(g[1], np.zeros_like(g[1]))
    assert np.any(g[2] != 0.0) and np.any(g[3] != 0.0)


def test_corr_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    zt_anchor = Tensor(rng.normal(size=(4, 5)))
    zt = Tensor(rng.normal(size=(4, 5)))
    zs_anchor = parameter(rng.normal(size=(4, 3)))
    zs = parameter(rng.normal(size=(4, 3)))
    err = finite_diff_check(
        lambda ps: loss_corr(zt_anchor, zt, ps[0], ps[1], 0.5),
        [zs_anchor, zs], step=1e-6)
    assert err < 1e-4


def test_corr_rejects_tiny_batch():
    one = Tensor(np.ones((1, 3)))
    with pytest.raises(DegenerateInputError):
        loss_corr(one, one, one, one, 0.5)


# -- supervised contrastive ---------------------------------------------------


def sup_oracle(anchors, bank, labels, tau):
    """Literal triple-loop evaluation of the contrastive formula."""
    n = anchors.shape[0]
    total = 0.0
    for i in range(n):
        positives = [j for j in range(2 * n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(anchors[i] @ bank[k] / tau)
                    for k in range(2 * n) if k != i)
        inner = sum(math.log(math.exp(anchors[i] @ bank[j] / tau) / denom)
                    for j in positives)
        total += -inner / len(positives)
    return total / n


@pytest.mark.parametrize("mode", ["teacher", "student"])
def test_sup_matches_triple_loop_oracle(mode):
    rng = np.random.default_rng(12)
    for trial in range(50):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 7))
        anchors = unit_rows(rng, n, d)
        other = unit_rows(rng, n, d)
        bank = np.vstack([anchors, other])
        labels = rng.integers(0, 3, size=2 * n)
        got = loss_sup(Tensor(anchors), Tensor(bank), labels, 0.07, mode).item()
        want = sup_oracle(anchors, bank, labels, 0.07)
        assert abs(got - want) < 1e-12


def test_sup_modes_agree_in_value():
    rng = np.random.default_rng(13)
    anchors = unit_rows(rng, 5, 4)
    bank = np.vstack([anchors, unit_rows(rng, 5, 4)])
    labels = rng.integers(0, 2, size=10)
    a = loss_sup(Tensor(anchors), Tensor(bank), labels, 0.1, "teacher").item()
    b = loss_sup(Tensor(anchors), Tensor(bank), labels, 0.1, "student").item()
    assert a == b


def test_sup_all_equal_representations_closed_form():
    # every similarity is 1, so each log term is log(1 / (2N - 1))
    n, d = 4, 3
    v = np.zeros((n, d))
    v[:, 0] = 1.0
    bank = np.vstack([v, v])
    labels = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    got = loss_sup(Tensor(v), Tensor(bank), labels, 0.5, "teacher").item()
    want = -math.log(1.0 / (2 * n - 1))
    assert abs(got - want) < 1e-12


def test_sup_bank_second_half_permutation_invariance():
    rng = np.random.default_rng(14)
    n = 6
    anchors = unit_rows(rng, n, 5)
    other = unit_rows(rng, n, 5)
    labels = rng.integers(0, 3, size=2 * n)
    base = loss_sup(Tensor(anchors), Tensor(np.vstack([anchors, other])),
                    labels, 0.07, "teacher").item()
    perm = rng.permutation(n)
    permuted_bank = np.vstack([anchors, other[perm]])
    permuted_labels = np.concatenate([labels[:n], labels[n:][perm]])
    got = loss_sup(Tensor(anchors), Tensor(permuted_bank), permuted_labels,
                   0.07, "teacher").item()
    assert abs(base - got) < 1e-12


def test_sup_joint_anchor_permutation_invariance():
    rng = np.random.default_rng(15)
    n = 5
    anchors = unit_rows(rng, n, 4)
    other = unit_rows(rng, n, 4)
    labels = rng.integers(0, 2, size=2 * n)
    base = loss_sup(Tensor(anchors), Tensor(np.vstack([anchors, other])),
                    labels, 0.07, "student").item()
    perm = rng.permutation(n)
    got = loss_sup(Tensor(anchors[perm]),
                   Tensor(np.vstack([anchors[perm], other])),
                   np.concatenate([labels[:n][perm], labels[n:]]),
                   0.07, "student").item()
    assert abs(base - got) < 1e-12


def test_sup_anchor_without_positive_contributes_zero(caplog):
    rng = np.random.default_rng(16)
    anchors = unit_rows(rng, 2, 3)
    bank = np.vstack([anchors, unit_rows(rng, 2, 3)])
    # anchor 0 is the only member of class 7; anchor 1 has a positive
    labels = np.array([7, 0, 0, 0])
    got = loss_sup(Tensor(anchors), Tensor(bank), labels, 0.1, "teacher").item()
    only_second = sup_oracle(anchors, bank, labels, 0.1)
    assert abs(got - only_second) < 1e-12


def test_sup_requires_unit_norm():
    rng = np.random.default_rng(17)
    anchors = rng.normal(size=(3, 4)) * 5.0
    bank = np.vstack([anchors, anchors])
    with pytest.raises(ContractError):
        loss_sup(Tensor(anchors), Tensor(bank), np.zeros(6, dtype=int), 0.1, "teacher")


def test_sup_gradient_matches_finite_differences_both_modes():
    rng = np.random.default_rng(18)
    n, d = 4, 3
    raw_anchor = parameter(rng.normal(size=(n, d)))
    other = Tensor(unit_rows(rng, n, d))
    labels = rng.integers(0, 2, size=2 * n)

    for mode in ("student",):
        def f(ps):
            normed = l2_normalize_rows(ps[0])
            bank = concat_rows([normed, other])
            return loss_sup(normed, bank, labels, 0.2, mode)

        assert finite_diff_check(f, [raw_anchor], step=1e-6) < 1e-4


def test_sup_teacher_mode_blocks_anchor_gradient():
    rng = np.random.default_rng(19)
    n, d = 3, 4
    raw = parameter(rng.normal(size=(n, d)))
    other = Tensor(unit_rows(rng, n, d))
    labels = rng.integers(0, 2, size=2 * n)
    normed = l2_normalize_rows(raw)
    out = loss_sup(normed, concat_rows([normed.detach(), other]), labels, 0.1, "teacher")
    g = GradTape(out).gradients([raw])[0]
    np.testing.assert_array_equal(g, np.zeros_like(g))


# -- cross-entropy -------------------------------------------------------------


def test_ce_uniform_logits():
    assert abs(loss_ce(Tensor(np.zeros((3, 10))), [0, 5, 9]).item() - math.log(10)) < 1e-12


def test_ce_confident_correct():
    logits = np.zeros((2, 4))
    logits[0, 1] = 1e6
    logits[1, 2] = 1e6
    assert loss_ce(Tensor(logits), [1, 2]).item() < 1e-9


def test_ce_matches_scalar_oracle():
    rng = np.random.default_rng(20)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=5)
    p = softmax_np(logits)
    want = float(np.mean([-math.log(p[i, labels[i]]) for i in range(5)]))
    assert abs(loss_ce(Tensor(logits), labels).item() - want) < 1e-12


def test_ce_rejects_out_of_range_label():
    with pytest.raises(LabelError):
        loss_ce(Tensor(np.zeros((2, 3))), [0, 3])


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    logits = parameter(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4)
    err = finite_diff_check(lambda ps: loss_ce(ps[0], labels), [logits], step=1e-6)
    assert err < 1e-4


# -- total ----------------------------------------------------------------------


def test_total_zero_terms():
    bd = loss_total(LossWeights(), "supervised", align=Tensor(0.0), corr=Tensor(0.0),
                    sup=Tensor(0.0), ce=Tensor(0.0))
    assert bd.total == 0.0


def test_total_feature_only_weights():
    bd = loss_total(LossWeights(), "feature_only", align=Tensor(1.0), corr=Tensor(1.0))
    assert bd.total == 30.0


def test_total_supervised_weights():
    bd = loss_total(LossWeights(), "supervised", align=Tensor(1.0), corr=Tensor(1.0),
                    sup=Tensor(1.0), ce=Tensor(1.0))
    assert bd.total == 31.5


def test_total_bookkeeping_invariant():
    rng = np.random.default_rng(22)
    w = LossWeights(lambda1=3.0, lambda2=0.5, w_sup=2.0, w_ce=1.5, w_kd=0.25)
    terms = {k: float(rng.uniform(0, 5)) for k in ("align", "corr", "sup", "ce", "kd")}
    bd = loss_total(w, "supervised", **{k: Tensor(v) for k, v in terms.items()})
    want = (w.lambda1 * terms["align"] + w.lambda2 * terms["corr"]
            + w.w_sup * terms["sup"] + w.w_ce * terms["ce"] + w.w_kd * terms["kd"])
    assert abs(bd.total - want) < 1e-12
    assert abs(bd.tensor.item() - want) < 1e-12


def test_every_loss_is_nonnegative_on_random_inputs():
    rng = np.random.default_rng(23)
    for i in range(10):
        n, k, ds, dt = 4, 3, 4, 5
        logits_t = Tensor(rng.normal(size=(n, k)))
        logits_s = Tensor(rng.normal(size=(n, k)))
        assert loss_kd(logits_t, logits_s, 2.0).item() >= 0.0
        head = make_transform_head(ds, dt, 1.0, seed=i)
        assert loss_align(Tensor(rng.normal(size=(n, ds))),
                          Tensor(rng.normal(size=(n, dt))), head).item() >= 0.0
        assert loss_corr(Tensor(rng.normal(size=(n, dt))), Tensor(rng.normal(size=(n, dt))),
                         Tensor(rng.normal(size=(n, ds))), Tensor(rng.normal(size=(n, ds))),
                         0.5).item() >= 0.0
        anchors = unit_rows(rng, n, ds)
        bank = np.vstack([anchors, unit_rows(rng, n, ds)])
        labels = rng.integers(0, 2, size=2 * n)
        assert loss_sup(Tensor(anchors), Tensor(bank), labels, 0.1, "teacher").item() >= 0.0
        assert loss_ce(logits_s, rng.integers(0, k, size=n)).item() >= 0.0


def test_total_rejects_supervised_terms_for_feature_only_teacher():
    with pytest.raises(CapabilityError):
        loss_total(LossWeights(), "feature_only", align=Tensor(1.0), ce=Tensor(1.0))
    with pytest.raises(CapabilityError):
        loss_total(LossWeights(), "feature_only", sup=Tensor(1.0))
