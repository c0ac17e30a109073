import math

import numpy as np
import pytest

from sdnas import diffcore as dc
from sdnas import distill
from sdnas.diffcore import RngState, Tape, Tensor
from sdnas.distill import TeacherBank, correlation, distill_loss


def _simplex(rng, c):
    v = rng.uniform((c,), 1e-3, 1.0)
    return v / v.sum()


# -- teacher bank ---------------------------------------------------------------


def test_record_then_read_back_identical():
    bank = TeacherBank(window=2, n_examples=5, class_count=3)
    p = np.array([0.2, 0.3, 0.5])
    bank.record("train", 1, 0, p)
    assert np.array_equal(bank.stored("train", 1, 0), p)


def test_recording_past_the_window_evicts_oldest():
    bank = TeacherBank(window=2, n_examples=2, class_count=2)
    for epoch in (1, 2, 3):
        bank.record("train", epoch, [0, 1], np.array([[0.5, 0.5], [0.4, 0.6]]))
    bank.seal("train", 3)
    bank.stored("train", 2, 0)
    bank.stored("train", 3, 0)
    with pytest.raises(KeyError, match="epoch 1"):
        bank.stored("train", 1, 0)


def test_record_rejects_bad_probabilities():
    bank = TeacherBank(window=1, n_examples=2, class_count=2)
    with pytest.raises(ValueError, match="sum to 1"):
        bank.record("train", 1, 0, np.array([0.5, 0.4]))
    with pytest.raises(ValueError, match="length"):
        bank.record("train", 1, 0, np.array([0.2, 0.3, 0.5]))
    with pytest.raises(ValueError, match="non-negative"):
        bank.record("train", 1, 0, np.array([1.1, -0.1]))
    with pytest.raises(KeyError, match="split"):
        bank.record("test", 1, 0, np.array([0.5, 0.5]))


def test_record_overwrites_within_epoch():
    bank = TeacherBank(window=1, n_examples=1, class_count=2)
    bank.record("train", 1, 0, np.array([0.5, 0.5]))
    bank.record("train", 1, 0, np.array([0.1, 0.9]))
    assert np.array_equal(bank.stored("train", 1, 0), [0.1, 0.9])


def test_vote_arithmetic_mean():
    bank = TeacherBank(window=2, n_examples=1, class_count=2)
    bank.record("valid", 1, 0, np.array([0.2, 0.8]))
    bank.seal("valid", 1)
    bank.record("valid", 2, 0, np.array([0.4, 0.6]))
    bank.seal("valid", 2)
    out = bank.vote("valid", 3, [0])
    assert np.allclose(out, [[0.3, 0.7]], atol=1e-15)


def test_vote_window_one_is_identity():
    bank = TeacherBank(window=1, n_examples=3, class_count=2)
    probs = np.array([[0.25, 0.75], [0.5, 0.5], [0.9, 0.1]])
    bank.record("train", 4, [0, 1, 2], probs)
    bank.seal("train", 4)
    out = bank.vote("train", 5, [0, 1, 2])
    assert np.array_equal(out, probs)
    assert np.array_equal(out, bank.stored_batch("train", 4, np.array([0, 1, 2])))


def test_vote_of_simplex_points_stays_on_simplex():
    rng = RngState(12)
    bank = TeacherBank(window=3, n_examples=4, class_count=5)
    for epoch in (1, 2, 3):
        rows = np.stack([_simplex(rng, 5) for _ in range(4)])
        bank.record("valid", epoch, [0, 1, 2, 3], rows)
        bank.seal("valid", epoch)
    out = bank.vote("valid", 4, [0, 1, 2, 3])
    assert np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)


def test_vote_is_permutation_equivariant_across_slots():
    rows = [np.array([[0.1, 0.9]]), np.array([[0.6, 0.4]]), np.array([[0.3, 0.7]])]
    outs = []
    for order in ([0, 1, 2], [2, 0, 1]):
        bank = TeacherBank(window=3, n_examples=1, class_count=2)
        for epoch, idx in zip((1, 2, 3), order):
            bank.record("train", epoch, [0], rows[idx])
            bank.seal("train", epoch)
        outs.append(bank.vote("train", 4, [0]))
    assert np.allclose(outs[0], outs[1], atol=1e-15)


def test_vote_names_missing_epoch_and_id():
    bank = TeacherBank(window=2, n_examples=3, class_count=2)
    bank.record("train", 1, [0, 1], np.array([[0.5, 0.5], [0.5, 0.5]]))
    bank.seal("train", 1)
    with pytest.raises(KeyError, match="epoch 2"):
        bank.vote("train", 3, [0])
    bank.record("train", 2, [0, 1], np.array([[0.5, 0.5], [0.5, 0.5]]))
    bank.seal("train", 2)
    with pytest.raises(KeyError, match="id 2"):
        bank.vote("train", 3, [0, 2])


def test_mid_epoch_recording_keeps_previous_window_votable():
    # while epoch 3 is being recorded, epochs 1 and 2 must stay addressable
    bank = TeacherBank(window=2, n_examples=2, class_count=2)
    for epoch in (1, 2):
        bank.record("train", epoch, [0, 1], np.array([[0.5, 0.5], [0.5, 0.5]]))
        bank.seal("train", epoch)
    bank.record("train", 3, 0, np.array([0.9, 0.1]))
    out = bank.vote("train", 3, [0, 1])
    assert np.allclose(out, 0.5)


def test_bank_dump_roundtrip(tmp_path):
    bank = TeacherBank(window=2, n_examples=3, class_count=2)
    rng = RngState(3)
    for epoch in (1, 2):
        bank.record("valid", epoch, [0, 1, 2], np.stack([_simplex(rng, 2) for _ in range(3)]))
        bank.seal("valid", epoch)
    path = tmp_path / "bank.bin"
    distill.dump_bank(bank, "valid", path)
    meta, data = distill.load_bank_dump(path)
    assert meta == {"K": 2, "N": 3, "C": 2, "split": "valid"}
    st = bank._store("valid")
    assert np.array_equal(data, st.data)


def test_bank_dump_rejects_corrupt(tmp_path):
    path = tmp_path / "bank.bin"
    path.write_bytes(b"bank v1; K=2; N=3; C=2; split=valid\n\x00\x01")
    with pytest.raises(ValueError, match="payload"):
        distill.load_bank_dump(path)


# -- correlation metrics ----------------------------------------------------------


def test_kl_of_identical_distributions_is_zero():
    rng = RngState(5)
    for c in range(2, 9):
        p = _simplex(rng, c)
        assert correlation(Tensor(p), p, "KL").item() < 1e-12


def test_kl_reference_value():
    # direct evaluation: 0.9*ln(0.9/0.6) + 0.1*ln(0.1/0.4)
    expected = 0.9 * math.log(0.9 / 0.6) + 0.1 * math.log(0.1 / 0.4)
    got = correlation(Tensor([0.9, 0.1]), np.array([0.6, 0.4]), "KL").item()
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.226289) < 1e-5


def test_kl_nonnegative_on_random_simplex_pairs():
    rng = RngState(100)
    for _ in range(200):
        c = 2 + int(rng.integers(1, 7)[0])
        p, q = _simplex(rng, c), _simplex(rng, c)
        assert correlation(Tensor(p), q, "KL").item() >= 0.0


def test_metric_identities():
    p = np.array([0.3, 0.7])
    assert correlation(Tensor(p), p, "ED").item() == 0.0
    assert correlation(Tensor(p), p, "MD").item() == 0.0
    # cosine distance ignores scale, and its teacher need not be normalized
    assert abs(correlation(Tensor(p), 2.0 * p, "CD").item()) < 1e-12


def test_metric_batch_reduction_is_mean():
    s = np.array([[0.2, 0.8], [0.6, 0.4]])
    t = np.array([[0.3, 0.7], [0.5, 0.5]])
    per_example = [
        float(np.sum((s[i] - t[i]) ** 2)) for i in range(2)
    ]
    got = correlation(Tensor(s), t, "ED").item()
    assert abs(got - np.mean(per_example)) < 1e-15


def test_kl_rejects_non_probability_input():
    with pytest.raises(ValueError, match="probability"):
        correlation(Tensor([0.9, 0.3]), np.array([0.5, 0.5]), "KL")
    with pytest.raises(ValueError, match="probability"):
        correlation(Tensor([0.5, 0.5]), np.array([0.9, 0.3]), "KL")


def test_correlation_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        correlation(Tensor([0.5, 0.5]), np.array([0.2, 0.3, 0.5]), "ED")


def test_correlation_unknown_metric():
    with pytest.raises(ValueError, match="metric"):
        correlation(Tensor([0.5, 0.5]), np.array([0.5, 0.5]), "JS")


def test_kl_rev_direction():
    p = np.array([0.9, 0.1])
    q = np.array([0.6, 0.4])
    fwd = correlation(Tensor(p), q, "KL").item()
    rev = correlation(Tensor(p), q, "KL_REV").item()
    expected_rev = 0.6 * math.log(0.6 / 0.9) + 0.4 * math.log(0.4 / 0.1)
    assert abs(rev - expected_rev) < 1e-12
    assert fwd != rev


# -- distill loss -------------------------------------------------------------------


def test_distill_loss_lambda_zero_is_plain_cross_entropy():
    rng = RngState(7)
    logits = Tensor(rng.normal((5, 3)), requires_grad=True)
    labels = np.array([0, 1, 2, 0, 1])
    teacher = np.full((5, 3), 1 / 3)
    plain = dc.cross_entropy(Tensor(logits.data), labels).item()
    combined = distill_loss(logits, labels, teacher, lam=0.0).item()
    assert combined == plain  # bit-identical


def test_distill_loss_teacher_equals_student_reduces_to_ce():
    rng = RngState(8)
    logits = Tensor(rng.normal((4, 3)), requires_grad=True)
    labels = np.array([0, 2, 1, 0])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    teacher = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    ce = dc.cross_entropy(Tensor(logits.data), labels).item()
    got = distill_loss(logits, labels, teacher, lam=1.0, metric="KL").item()
    assert got == ce


def test_distill_loss_rejects_negative_lambda():
    with pytest.raises(ValueError, match="lambda"):
        distill_loss(Tensor(np.zeros((2, 2))), np.array([0, 1]), np.full((2, 2), 0.5), lam=-1.0)


@pytest.mark.parametrize("metric", ["KL", "ED", "MD", "CD", "KL_REV"])
def test_distill_loss_gradient_matches_finite_differences(metric):
    rng = RngState(13)
    logits = Tensor(rng.normal((4, 3)), requires_grad=True)
    labels = np.array([0, 1, 2, 1])
    teacher = np.stack([_simplex(rng, 3) for _ in range(4)])
    err = dc.gradient_check(
        lambda: distill_loss(logits, labels, teacher, lam=1.0, metric=metric),
        [logits],
        step=1e-6,
    )
    assert err < 1e-5


def test_distill_loss_gradient_flows_only_to_student():
    rng = RngState(14)
    logits = Tensor(rng.normal((3, 2)), requires_grad=True)
    teacher = np.stack([_simplex(rng, 2) for _ in range(3)])
    with Tape() as tape:
        loss = distill_loss(logits, np.array([0, 1, 0]), teacher, lam=1.0)
    grads = tape.gradients(loss, [logits])
    assert grads[logits].shape == (3, 2)
    assert np.all(np.isfinite(grads[logits]))
