import math

import numpy as np
import pytest

import oracles
from bridgeseg import autodiff as ad
from bridgeseg.autodiff import NumericError, Tensor
from bridgeseg.losses import (LabelMatrix, LossWeights, alignment_loss, class_centroids,
                              consistency_loss, seg_loss_bridge, seg_loss_source, total_loss)

# --- label matrices -------------------------------------------------------

def test_label_matrix_validation():
    with pytest.raises(ValueError):
        LabelMatrix(np.array([[1.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        LabelMatrix(np.eye(2), source="oracle")
    lm = LabelMatrix.from_labels([2, 0, 1], 3, "teacher-pseudo")
    assert lm.n == 3 and lm.num_classes == 3 and lm.labels.tolist() == [2, 0, 1]


# --- segmentation ---------------------------------------------------------

def test_seg_perfect_prediction_is_zero():
    logp = Tensor(np.log(np.array([[1.0, 1e-300], [1e-300, 1.0]])))
    assert seg_loss_source(logp, LabelMatrix.from_labels([0, 1], 2)).item() == pytest.approx(0.0, abs=1e-12)


def test_seg_uniform_two_classes():
    logp = ad.log_softmax(Tensor(np.zeros((5, 2))))
    assert seg_loss_source(logp, LabelMatrix.from_labels([0, 1, 1, 0, 1], 2)).item() == pytest.approx(0.693147, abs=1e-6)


def test_seg_bridge_uniform_four_classes():
    logp = ad.log_softmax(Tensor(np.zeros((3, 4))))
    pseudo = LabelMatrix.from_labels([3, 1, 0], 4, "teacher-pseudo")
    assert seg_loss_bridge(logp, pseudo).item() == pytest.approx(math.log(4), abs=1e-15)


def test_seg_bridge_confident_match_is_zero():
    logp = Tensor([[0.0, -800.0]])
    assert seg_loss_bridge(logp, LabelMatrix.from_labels([0], 2, "teacher-pseudo")).item() == 0.0


def test_seg_empty_batch_raises():
    with pytest.raises(ValueError):
        seg_loss_source(Tensor(np.zeros((0, 3))), LabelMatrix.from_labels([], 3))


def test_seg_losses_match_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, c = rng.integers(1, 6), rng.integers(2, 5)
        z = rng.normal(size=(n, c)) * 3
        y = rng.integers(0, c, size=n)
        logp = ad.log_softmax(Tensor(z))
        expected = oracles.cross_entropy(z.tolist(), y.tolist())
        assert abs(seg_loss_source(logp, LabelMatrix.from_labels(y, c)).item() - expected) <= 1e-10
        bridge = seg_loss_bridge(logp, LabelMatrix.from_labels(y, c, "teacher-pseudo")).item()
        assert bridge == seg_loss_source(logp, LabelMatrix.from_labels(y, c)).item()


# --- consistency ----------------------------------------------------------

def test_consistency_identical_rows_and_zero_weights():
    p = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    assert consistency_loss(p, p, [Tensor(np.zeros((3, 5)))], 0.01).item() == 0.0


def test_consistency_unit_offset():
    a = np.random.default_rng(1).normal(size=(6, 3))
    b = a.copy()
    b[:, 1] += 1.0
    assert consistency_loss(Tensor(a), Tensor(b), [], 0.0).item() == pytest.approx(1.0, abs=1e-12)


def test_consistency_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, d = rng.integers(1, 5), rng.integers(1, 4)
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        ws = [rng.normal(size=(d, 3)), rng.normal(size=(d, 2))]
        lam = float(rng.uniform(0, 0.1))
        got = consistency_loss(Tensor(a), Tensor(b), [Tensor(w) for w in ws], lam).item()
        assert abs(got - oracles.consistency(a.tolist(), b.tolist(), ws, lam)) <= 1e-10


# --- centroids ------------------------------------------------------------

def test_single_point_centroid():
    proj = Tensor([[1.0, 2.0], [3.0, -1.0]])
    cent = class_centroids(proj, LabelMatrix.from_labels([0, 1], 3))
    np.testing.assert_array_equal(cent.vector(1), [3.0, -1.0])
    assert cent.present.tolist() == [True, True, False]
    with pytest.raises(KeyError):
        cent.vector(2)


def test_two_point_centroid_is_midpoint():
    u, v = np.array([1.0, 5.0]), np.array([-3.0, 2.0])
    cent = class_centroids(Tensor(np.stack([u, v])), LabelMatrix.from_labels([1, 1], 2))
    np.testing.assert_allclose(cent.vector(1), (u + v) / 2)


def test_centroids_match_grouping_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, d, c = rng.integers(1, 8), rng.integers(1, 4), 3
        proj = rng.normal(size=(n, d))
        y = rng.integers(0, c, size=n)
        cent = class_centroids(Tensor(proj), LabelMatrix.from_labels(y, c))
        expected = oracles.centroids(proj.tolist(), y.tolist(), c)
        assert set(np.flatnonzero(cent.present)) == set(expected)
        for k, vec in expected.items():
            assert np.max(np.abs(cent.vector(k) - np.array(vec))) <= 1e-10


# --- alignment ------------------------------------------------------------

def cents(rows, labels, c=2):
    return class_centroids(Tensor(np.array(rows, dtype=float)), LabelMatrix.from_labels(labels, c))


def test_alignment_identical_is_zero():
    a = cents([[1, 2], [3, 1]], [0, 1])
    assert alignment_loss(a, a).item() == pytest.approx(0.0, abs=1e-15)


def test_alignment_opposite_is_two():
    assert alignment_loss(cents([[1, 2]], [0]), cents([[-1, -2]], [0])).item() == pytest.approx(2.0)


def test_alignment_orthogonal_is_one():
    a = cents([[1, 0], [0, 3]], [0, 1])
    b = cents([[0, 2], [5, 0]], [0, 1])
    assert alignment_loss(a, b).item() == pytest.approx(1.0, abs=1e-15)


def test_alignment_no_shared_class_is_zero():
    assert alignment_loss(cents([[1, 0]], [0]), cents([[0, 1]], [1])).item() == 0.0


def test_alignment_zero_centroid_raises():
    with pytest.raises(NumericError):
        alignment_loss(cents([[0, 0]], [0]), cents([[1, 1]], [0]))


def test_alignment_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d, c = rng.integers(2, 5), rng.integers(2, 5)
        ns, nt = rng.integers(1, 8), rng.integers(1, 8)
        ps, pt = rng.normal(size=(ns, d)), rng.normal(size=(nt, d))
        ys, yt = rng.integers(0, c, size=ns), rng.integers(0, c, size=nt)
        got = alignment_loss(class_centroids(Tensor(ps), LabelMatrix.from_labels(ys, c)),
                             class_centroids(Tensor(pt), LabelMatrix.from_labels(yt, c))).item()
        expected = oracles.alignment(oracles.centroids(ps.tolist(), ys.tolist(), c),
                                   oracles.centroids(pt.tolist(), yt.tolist(), c))
        assert abs(got - expected) <= 1e-10


# --- total ----------------------------------------------------------------

def one(v):
    return Tensor(float(v))


def test_total_all_zero():
    parts = {k: one(0) for k in ("seg_s", "seg_b", "con", "ali")}
    assert total_loss(parts, LossWeights()).item() == 0.0


def test_total_weighted_sum():
    parts = {k: one(1) for k in ("seg_s", "seg_b", "con", "ali")}
    assert total_loss(parts, LossWeights(lambda_c=4, lambda_a=0.1)).item() == pytest.approx(6.1, abs=1e-15)


def test_total_zero_weights_equal_seg_only():
    parts = {"seg_s": one(0.7), "seg_b": one(1.3), "con": one(2.0), "ali": one(0.4)}
    a = total_loss(parts, LossWeights(lambda_c=0, lambda_a=0)).item()
    b = total_loss(parts, LossWeights(), use_con=False, use_ali=False).item()
    assert a == b == pytest.approx(2.0)


def test_total_averages_list_parts():
    parts = {"seg_s": [one(1), one(3)], "seg_b": one(0)}
    assert total_loss(parts, LossWeights()).item() == 2.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_c=-1)
