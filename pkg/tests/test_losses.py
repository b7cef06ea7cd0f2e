"""Loss and weight-table tests against direct-summation oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aucalib.backbone import HeadOutputs
from aucalib.losses import (
    WeightTables,
    batch_loss,
    compute_weights,
    count_intensities,
    loss_aud,
    loss_auie,
    loss_class,
    loss_reg_cos,
    loss_reg_mse,
)
from aucalib.tensor import Tensor, ShapeError, grad_check


# -- oracles: plain-python summation, no shared code with the library ----

def oracle_mse(y, yhat, reg_table):
    return sum(reg_table[i][y[i]] * (y[i] - yhat[i]) ** 2 for i in range(len(y)))


def oracle_cos(y, yhat):
    sy = sum(v * v for v in y)
    if sy == 0:
        return 0.0
    num = sum(a * b for a, b in zip(y, yhat))
    sp = sum(v * v for v in yhat)
    return 1.0 - num / (math.sqrt(sy) * math.sqrt(sp) + 1e-8)


def oracle_class(y, logits, ord_table):
    total = 0.0
    for i in range(len(y)):
        for j in range(1, 6):
            chi = 1 if y[i] >= j else 0
            p = 1.0 / (1.0 + math.exp(-logits[i][j - 1]))
            p = min(max(p, 1e-12), 1.0 - 1e-12)
            ce = -(chi * math.log(p) + (1 - chi) * math.log(1.0 - p))
            total += ord_table[i][j - 1][chi] * ce
    return total


def oracle_aud(y, logits, det_table):
    total = 0.0
    for i in range(len(y)):
        chi = 1 if y[i] >= 2 else 0
        p = 1.0 / (1.0 + math.exp(-logits[i]))
        p = min(max(p, 1e-12), 1.0 - 1e-12)
        total += det_table[i][chi] * -(chi * math.log(p) + (1 - chi) * math.log(1.0 - p))
    return total


def oracle_weights(counts):
    """Appendix formulas evaluated one fraction at a time."""
    counts = [float(c) for c in counts]
    lo = max(counts[0] + counts[1], 1.0)
    hi = max(sum(counts[2:]), 1.0)
    a, b = 2.0 / lo, 4.0 / hi
    reg = [a / (a + b)] * 2 + [b / (a + b)] * 4

    below = [max(sum(counts[:j]), 1.0) for j in range(1, 6)]
    above = [max(sum(counts[j:]), 1.0) for j in range(1, 6)]
    D = sum(1.0 / below[j] + 1.0 / above[j] for j in range(5))
    ordw = [[(1.0 / below[j]) / D, (1.0 / above[j]) / D] for j in range(5)]

    neg = max(counts[0] + counts[1], 1.0)
    pos = max(sum(counts[2:]), 1.0)
    d = 1.0 / neg + 1.0 / pos
    det = [(1.0 / neg) / d, (1.0 / pos) / d]
    return reg, ordw, det


RNG = np.random.default_rng(20)


def random_weights(n_au):
    counts = RNG.integers(0, 200, size=(n_au, 6))
    return compute_weights(counts)


# -- weight tables -------------------------------------------------------

def test_reg_weights_two_bin_example():
    counts = np.array([[50, 50, 4, 3, 2, 1]])  # N01 = 100, N25 = 10
    w = compute_weights(counts)
    assert np.isclose(w.reg[0, 0], 1.0 / 21.0, atol=1e-12)
    assert np.isclose(w.reg[0, 2], 20.0 / 21.0, atol=1e-12)


def test_reg_weights_balanced_groups():
    counts = np.array([[10, 10, 5, 5, 5, 5]])  # N01 = N25 = 20
    w = compute_weights(counts)
    assert np.isclose(w.reg[0, 0], 1.0 / 3.0, atol=1e-12)
    assert np.isclose(w.reg[0, 2], 2.0 / 3.0, atol=1e-12)


def test_ord_weights_reference_case():
    w = compute_weights(np.array([[4, 2, 1, 1, 1, 1]]))
    # D = sum over thresholds of 1/below + 1/above
    D = (1 / 4 + 1 / 6) + (1 / 6 + 1 / 4) + (1 / 7 + 1 / 3) + (1 / 8 + 1 / 2) + (1 / 9 + 1)
    assert np.isclose(D, 3.045635, atol=1e-6)
    assert np.isclose(w.ord[0, 0, 1], (1 / 6) / D, atol=1e-12)
    assert np.isclose(w.ord[0, 0, 1], 0.054723, atol=1e-6)
    assert np.isclose(w.ord[0].sum(), 1.0, atol=1e-12)


def test_weights_match_oracle_on_random_counts():
    for _ in range(50):
        counts = RNG.integers(0, 500, size=6)
        w = compute_weights(counts[None, :])
        reg, ordw, det = oracle_weights(counts)
        assert np.allclose(w.reg[0], reg, atol=1e-12)
        assert np.allclose(w.ord[0], ordw, atol=1e-12)
        assert np.allclose(w.det[0], det, atol=1e-12)


def test_weights_reject_negative_counts():
    with pytest.raises(ValueError):
        compute_weights(np.array([[1, 2, -1, 0, 0, 0]]))
    with pytest.raises(ShapeError):
        compute_weights(np.array([[1, 2, 3]]))


def test_zero_counts_clamped_not_divided():
    w = compute_weights(np.zeros((2, 6), dtype=int))
    assert np.all(np.isfinite(w.reg))
    assert np.all(np.isfinite(w.ord))
    assert np.all(np.isfinite(w.det))


counts_strategy = st.lists(st.integers(0, 10_000), min_size=6, max_size=6)


@settings(max_examples=200, deadline=None)
@given(counts_strategy)
def test_weight_invariants_hold(counts):
    w = compute_weights(np.array([counts]))
    assert np.all(w.reg >= 0) and np.all(np.isfinite(w.reg))
    assert np.all(w.ord >= 0) and np.all(np.isfinite(w.ord))
    assert np.all(w.det >= 0) and np.all(np.isfinite(w.det))
    assert w.reg[0, 0] == w.reg[0, 1]
    assert len(set(w.reg[0, 2:].tolist())) == 1
    assert abs(w.reg[0, 0] + w.reg[0, 2] - 1.0) < 1e-9
    assert abs(w.ord[0].sum() - 1.0) < 1e-9
    assert abs(w.det[0].sum() - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=6, max_size=6), st.integers(2, 9))
def test_weights_scale_free_for_positive_counts(counts, k):
    base = compute_weights(np.array([counts]))
    scaled = compute_weights(np.array([counts]) * k)
    assert np.allclose(base.reg, scaled.reg, atol=1e-12)
    assert np.allclose(base.ord, scaled.ord, atol=1e-12)
    assert np.allclose(base.det, scaled.det, atol=1e-12)


def test_count_intensities_tallies_levels():
    labels = np.array([[0, 5], [0, 2], [1, 2]])
    counts = count_intensities(labels, 2)
    assert counts[0].tolist() == [2, 1, 0, 0, 0, 0]
    assert counts[1].tolist() == [0, 0, 2, 0, 0, 1]


# -- regression losses ----------------------------------------------------

def test_mse_zero_at_exact_prediction():
    w = random_weights(3)
    y = np.array([0, 3, 5])
    assert loss_reg_mse(y, Tensor(y.astype(float)), w).item() == 0.0


def test_mse_single_term_arithmetic():
    w = WeightTables(reg=np.full((1, 6), 0.5), ord=np.zeros((1, 5, 2)),
                     det=np.zeros((1, 2)))
    val = loss_reg_mse(np.array([3]), Tensor([1.0]), w).item()
    assert np.isclose(val, 0.5 * (3 - 1) ** 2)  # = 2.0


def test_mse_matches_oracle():
    w = random_weights(12)
    for _ in range(20):
        y = RNG.integers(0, 6, size=12)
        yhat = RNG.normal(size=12)
        got = loss_reg_mse(y, Tensor(yhat), w).item()
        want = oracle_mse(y.tolist(), yhat.tolist(), w.reg.tolist())
        assert abs(got - want) < 1e-12


def test_cos_parallel_and_scaled_vectors_score_zero():
    y = np.array([1, 2, 0, 3])
    assert loss_reg_cos(y, Tensor(y.astype(float))).item() < 1e-7
    assert loss_reg_cos(y, Tensor(2.0 * y)).item() < 1e-7


def test_cos_orthogonal_scores_one():
    val = loss_reg_cos(np.array([1, 0]), Tensor([0.0, 1.0])).item()
    assert np.isclose(val, 1.0, atol=1e-6)


def test_cos_zero_labels_contribute_nothing():
    assert loss_reg_cos(np.zeros(4, dtype=int), Tensor(RNG.normal(size=4))).item() == 0.0


def test_cos_matches_oracle():
    for _ in range(20):
        y = RNG.integers(0, 6, size=8)
        yhat = RNG.normal(size=8)
        got = loss_reg_cos(y, Tensor(yhat)).item()
        assert abs(got - oracle_cos(y.tolist(), yhat.tolist())) < 1e-12


def test_cos_survives_all_zero_prediction():
    y = np.array([2, 1, 0])
    val = loss_reg_cos(y, Tensor(np.zeros(3)))
    assert np.isfinite(val.item())
    assert np.isclose(val.item(), 1.0, atol=1e-6)


# -- classification losses --------------------------------------------------

def test_class_logit_zero_gives_weighted_ln2():
    w = WeightTables(reg=np.zeros((1, 6)), det=np.zeros((1, 2)),
                     ord=np.full((1, 5, 2), 0.1))
    val = loss_class(np.array([5]), Tensor(np.zeros((1, 5))), w).item()
    # all five indicators are 1, each term 0.1 * ln 2
    assert np.isclose(val, 0.5 * math.log(2.0), atol=1e-12)


def test_class_confident_correct_logits_vanish():
    w = random_weights(2)
    y = np.array([0, 4])
    logits = np.where(y[:, None] >= np.arange(1, 6)[None, :], 30.0, -30.0)
    assert loss_class(y, Tensor(logits), w).item() < 1e-10


def test_class_matches_oracle():
    w = random_weights(6)
    for _ in range(20):
        y = RNG.integers(0, 6, size=6)
        logits = RNG.normal(scale=2.0, size=(6, 5))
        got = loss_class(y, Tensor(logits), w).item()
        want = oracle_class(y.tolist(), logits.tolist(), w.ord.tolist())
        assert abs(got - want) < 1e-12


def test_aud_occurrence_rule_and_ln2():
    w = WeightTables(reg=np.zeros((1, 6)), ord=np.zeros((1, 5, 2)),
                     det=np.ones((1, 2)))
    # intensity 2 counts as occurrence; logit 0 with weight 1 -> ln 2
    val = loss_aud(np.array([2]), Tensor([0.0]), w).item()
    assert np.isclose(val, math.log(2.0), atol=1e-12)


def test_aud_intensity_1_is_not_occurrence():
    w = random_weights(1)
    lo = loss_aud(np.array([1]), Tensor([-30.0]), w).item()   # confident "absent"
    hi = loss_aud(np.array([2]), Tensor([-30.0]), w).item()   # wrong for y=2
    assert lo < 1e-10
    assert hi > 1.0


def test_aud_matches_oracle():
    w = random_weights(8)
    for _ in range(20):
        y = RNG.integers(0, 6, size=8)
        logits = RNG.normal(scale=2.0, size=8)
        got = loss_aud(y, Tensor(logits), w).item()
        want = oracle_aud(y.tolist(), logits.tolist(), w.det.tolist())
        assert abs(got - want) < 1e-12


def test_extreme_logits_stay_finite():
    w = random_weights(2)
    val = loss_aud(np.array([0, 5]), Tensor([800.0, -800.0]), w).item()
    assert np.isfinite(val)
    val2 = loss_class(np.array([0, 5]), Tensor(np.full((2, 5), 800.0)), w).item()
    assert np.isfinite(val2)


# -- combined objective -------------------------------------------------------

def perfect_head(y):
    reg = Tensor(y.astype(float))
    logits = np.where(y[:, None] >= np.arange(1, 6)[None, :], 30.0, -30.0)
    return HeadOutputs(reg=reg.reshape((1, len(y))),
                       ord_logits=Tensor(logits[None]))


def test_auie_zero_at_perfect_prediction():
    w = random_weights(4)
    y = np.array([1, 0, 3, 5])
    assert loss_auie(y, perfect_head(y), w).item() < 1e-7


def test_auie_is_sum_of_parts():
    w = random_weights(5)
    y = RNG.integers(0, 6, size=(3, 5))
    head = HeadOutputs(reg=Tensor(RNG.normal(size=(3, 5))),
                       ord_logits=Tensor(RNG.normal(size=(3, 5, 5))))
    total = loss_auie(y, head, w).item()
    parts = (loss_reg_mse(y, head.reg, w).item()
             + loss_reg_cos(y, head.reg).item()
             + loss_class(y, head.ord_logits, w).item())
    assert total == parts


def test_batch_mean_matches_hand_average():
    w = random_weights(3)
    y = RNG.integers(0, 6, size=(2, 3))
    reg = RNG.normal(size=(2, 3))
    logits = RNG.normal(size=(2, 3, 5))
    head = HeadOutputs(reg=Tensor(reg), ord_logits=Tensor(logits))
    both = batch_loss("intensity", y, head, w).item()
    one = batch_loss("intensity", y[:1],
                     HeadOutputs(reg=Tensor(reg[:1]), ord_logits=Tensor(logits[:1])), w).item()
    two = batch_loss("intensity", y[1:],
                     HeadOutputs(reg=Tensor(reg[1:]), ord_logits=Tensor(logits[1:])), w).item()
    assert np.isclose(both, (one + two) / 2.0, atol=1e-12)


def test_batch_permutation_invariant():
    w = random_weights(3)
    y = RNG.integers(0, 6, size=(4, 3))
    reg = RNG.normal(size=(4, 3))
    logits = RNG.normal(size=(4, 3, 5))
    perm = np.array([2, 0, 3, 1])
    a = batch_loss("intensity", y,
                   HeadOutputs(reg=Tensor(reg), ord_logits=Tensor(logits)), w).item()
    b = batch_loss("intensity", y[perm],
                   HeadOutputs(reg=Tensor(reg[perm]), ord_logits=Tensor(logits[perm])), w).item()
    assert np.isclose(a, b, atol=1e-12)


def test_batch_of_identical_samples_equals_single():
    w = random_weights(3)
    y = np.array([[1, 0, 4]])
    reg = RNG.normal(size=(1, 3))
    logits = RNG.normal(size=(1, 3, 5))
    single = batch_loss("intensity", y,
                        HeadOutputs(reg=Tensor(reg), ord_logits=Tensor(logits)), w).item()
    tripled = batch_loss("intensity", np.repeat(y, 3, axis=0),
                         HeadOutputs(reg=Tensor(np.repeat(reg, 3, axis=0)),
                                     ord_logits=Tensor(np.repeat(logits, 3, axis=0))), w).item()
    assert np.isclose(single, tripled, atol=1e-12)


def test_empty_batch_rejected():
    w = random_weights(2)
    with pytest.raises((ValueError, ShapeError)):
        batch_loss("intensity", np.zeros((0, 2), dtype=int),
                   HeadOutputs(reg=Tensor(np.zeros((0, 2))),
                               ord_logits=Tensor(np.zeros((0, 2, 5)))), w)


def test_label_validation():
    w = random_weights(2)
    with pytest.raises(ValueError):
        loss_reg_mse(np.array([6, 0]), Tensor([0.0, 0.0]), w)
    with pytest.raises(ValueError):
        loss_reg_mse(np.array([-1, 0]), Tensor([0.0, 0.0]), w)
    with pytest.raises(ValueError):
        loss_reg_mse(np.array([0.5, 0]), Tensor([0.0, 0.0]), w)
    with pytest.raises(ShapeError):
        loss_reg_mse(np.array([1, 0, 2]), Tensor([0.0, 0.0]), w)


# -- gradients -----------------------------------------------------------------

def test_intensity_loss_gradients_match_fd():
    w = random_weights(3)
    y = np.array([[2, 0, 5], [1, 1, 0]])

    def builder():
        reg = Tensor(RNG.normal(size=(2, 3)), requires_grad=True)
        logits = Tensor(RNG.normal(size=(2, 3, 5)), requires_grad=True)

        def loss_fn():
            return loss_auie(y, HeadOutputs(reg=reg, ord_logits=logits), w)

        return {"reg": reg, "ord_logits": logits}, loss_fn

    report = grad_check(builder, tol=1e-4)
    assert report.passed(1e-4), report.format_table()


def test_detection_loss_gradients_match_fd():
    w = random_weights(4)
    y = np.array([[0, 2, 5, 1]])

    def builder():
        logits = Tensor(RNG.normal(size=(1, 4)), requires_grad=True)
        return {"det": logits}, lambda: loss_aud(y, logits, w)

    report = grad_check(builder, tol=1e-4)
    assert report.passed(1e-4), report.format_table()


def test_losses_nonnegative_random_sweep():
    w = random_weights(5)
    for _ in range(30):
        y = RNG.integers(0, 6, size=(3, 5))
        head = HeadOutputs(reg=Tensor(RNG.normal(size=(3, 5))),
                           ord_logits=Tensor(RNG.normal(size=(3, 5, 5))))
        assert loss_auie(y, head, w).item() >= 0.0
        assert loss_aud(y, Tensor(RNG.normal(size=(3, 5))), w).item() >= 0.0
