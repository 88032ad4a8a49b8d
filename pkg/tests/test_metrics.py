import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from talkstyle import metrics as mt
from talkstyle.errors import InputError, MetricError
from talkstyle.synthcorpus import EMOTION_DIMS, EXPR_DIM, LIP_DIMS

LOADING = 1e-6


def identity_map() -> mt.PseudoVertexMap:
    """Vertex 0 reads expression dims 0-2, vertex 1 reads dims 20-22."""
    W = np.zeros((2, 3, EXPR_DIM))
    W[0, range(3), range(3)] = 1.0
    W[1, range(3), range(20, 23)] = 1.0
    return mt.PseudoVertexMap(W.reshape(6, EXPR_DIM), np.array([0]), np.array([1]))


class TestVertexErrors:
    def test_lve_is_displacement_norm(self):
        gt = np.zeros((4, EXPR_DIM))
        pred = gt.copy()
        pred[:, :3] = [3.0, 4.0, 0.0]
        assert mt.lve(pred, gt, identity_map()) == 5.0
        assert mt.eve(pred, gt, identity_map()) == 0.0

    def test_lve_takes_worst_vertex_then_frame_mean(self):
        W = np.zeros((2, 3, EXPR_DIM))
        W[0, 0, 0] = W[1, 0, 1] = 1.0
        vmap = mt.PseudoVertexMap(W.reshape(6, EXPR_DIM), np.array([0, 1]), np.array([], int))
        gt = np.zeros((2, EXPR_DIM))
        pred = np.zeros((2, EXPR_DIM))
        pred[0, :2] = [1.0, 3.0]  # frame max 3
        pred[1, :2] = [2.0, 0.0]  # frame max 2
        assert mt.lve(pred, gt, vmap) == 2.5

    def test_eve_hand_mean(self):
        gt = np.zeros((2, EXPR_DIM))
        pred = gt.copy()
        pred[0, 20] = 2.0
        pred[1, 20:22] = [0.0, 4.0]
        assert mt.eve(pred, gt, identity_map()) == 3.0

    def test_default_map_separates_regions(self):
        gt = np.zeros((5, EXPR_DIM))
        pred = gt.copy()
        non_emotion = [d for d in range(EXPR_DIM) if d not in EMOTION_DIMS]
        pred[:, non_emotion] = np.random.default_rng(0).normal(size=(5, len(non_emotion)))
        assert mt.eve(pred, gt) == 0.0
        pred = gt.copy()
        pred[:, [d for d in range(EXPR_DIM) if d not in LIP_DIMS]] = 1.0
        assert mt.lve(pred, gt) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            mt.lve(np.zeros((3, EXPR_DIM)), np.zeros((4, EXPR_DIM)))


class TestDiversity:
    def test_identical(self):
        s = np.random.default_rng(0).normal(size=(10, 3))
        assert mt.diversity([s, s.copy(), s[::-1]]) == 0.0

    def test_hand_example(self):
        assert mt.diversity([np.zeros((4, 2)), np.tile([3.0, 0.0], (6, 1))]) == 3.0

    @given(seed=st.integers(0, 2**16), c=st.floats(-5, 5))
    def test_translation_invariant(self, seed, c):
        seqs = [np.random.default_rng(seed + i).normal(size=(8, 3)) for i in range(3)]
        assert math.isclose(mt.diversity(seqs), mt.diversity([s + c for s in seqs]), rel_tol=1e-9, abs_tol=1e-12)

    def test_needs_two(self):
        with pytest.raises(InputError):
            mt.diversity([np.zeros((3, 3))])


class TestLSD:
    def test_constant_pose(self):
        pose = np.tile([0.1, -0.3, 0.2], (30, 1))
        assert mt.lsd([pose]) == 0.0

    @given(theta=st.floats(0.01, 1.5), half=st.integers(1, 20))
    def test_alternating_yaw_closed_form(self, theta, half):
        pose = np.zeros((2 * half, 3))
        pose[1::2, 1] = theta
        # landmark (1,0,0) projects to x=1 or x=cos(theta): spread (1 - cos) / 2
        got = mt.lsd([pose], landmarks=np.array([[1.0, 0.0, 0.0]]))
        assert math.isclose(got, (1 - math.cos(theta)) / 2, rel_tol=1e-9, abs_tol=1e-15)

    def test_grows_with_amplitude(self):
        t = np.arange(100) / 25
        vals = [mt.lsd([a * np.stack([np.sin(t), np.cos(t), np.sin(2 * t)], 1)]) for a in (0.05, 0.1, 0.3)]
        assert vals[0] < vals[1] < vals[2]

    def test_rotation_matrices_orthonormal(self):
        R = mt.euler_to_matrix(np.random.default_rng(0).uniform(-1.5, 1.5, size=(10, 3)))
        np.testing.assert_allclose(R @ R.transpose(0, 2, 1), np.broadcast_to(np.eye(3), R.shape), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def stats(mu, sigma) -> mt.GaussianStats:
    return mt.GaussianStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(sigma, float)))


class TestFID:
    def test_self_distance(self):
        feats = np.random.default_rng(0).normal(size=(200, 6))
        s = mt.GaussianStats.from_features(feats)
        assert mt.fid(s, s) <= 1e-6

    @given(m1=st.floats(-5, 5), m2=st.floats(-5, 5), v1=st.floats(0, 9), v2=st.floats(0, 9))
    def test_one_dimensional(self, m1, m2, v1, v2):
        expect = (m1 - m2) ** 2 + (math.sqrt(v1) - math.sqrt(v2)) ** 2
        assert math.isclose(mt.fid(stats(m1, v1), stats(m2, v2)), expect, rel_tol=1e-9, abs_tol=1e-9)

    @given(seed=st.integers(0, 2**16), d=st.integers(1, 6))
    def test_diagonal_closed_form(self, seed, d):
        rng = np.random.default_rng(seed)
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        va, vb = rng.uniform(0, 4, d), rng.uniform(0, 4, d)
        expect = ((mu_a - mu_b) ** 2).sum() + ((np.sqrt(va) - np.sqrt(vb)) ** 2).sum()
        got = mt.fid(stats(mu_a, np.diag(va)), stats(mu_b, np.diag(vb)))
        assert math.isclose(got, expect, rel_tol=1e-9, abs_tol=1e-9)

    @given(seed=st.integers(0, 2**16), d=st.integers(1, 5))
    def test_symmetric_and_non_negative(self, seed, d):
        rng = np.random.default_rng(seed)
        a = mt.GaussianStats.from_features(rng.normal(size=(20, d)))
        b = mt.GaussianStats.from_features(rng.normal(size=(30, d)) * 2 + 1)
        ab, ba = mt.fid(a, b), mt.fid(b, a)
        assert ab >= 0 and math.isclose(ab, ba, rel_tol=1e-7, abs_tol=1e-9)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(100, 3)), rng.normal(size=(80, 3)) * 1.5
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        plain = mt.fid(mt.GaussianStats.from_features(x), mt.GaussianStats.from_features(y))
        rotated = mt.fid(mt.GaussianStats.from_features(x @ Q), mt.GaussianStats.from_features(y @ Q))
        assert math.isclose(plain, rotated, rel_tol=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            mt.fid(stats([0, 0], np.eye(2)), stats([0], [[1]]))

    def test_from_features_loading(self):
        s = mt.GaussianStats.from_features(np.array([[1.0], [3.0]]))
        assert s.mu.tolist() == [2.0] and s.sigma.tolist() == [[2.0 + LOADING]]


class TestFSD:
    def test_single_unit_equals_fid(self):
        rng = np.random.default_rng(0)
        g, r = rng.normal(size=(40, 3)), rng.normal(size=(50, 3)) + 0.5
        expect = mt.fid(mt.GaussianStats.from_features(g), mt.GaussianStats.from_features(r))
        assert mt.fsd(g, np.full(40, 7), r, np.full(50, 7)) == expect

    def test_two_units_closed_form(self):
        g = np.array([0.0, 2.0, 10.0, 10.0])[:, None]  # unit 1: mean 1 var 2; unit 2: mean 10 var 0
        r = np.array([1.0, 1.0, 12.0, 14.0])[:, None]  # unit 1: mean 1 var 0; unit 2: mean 13 var 2
        labels = np.array([1, 1, 2, 2])
        s_small, s_big = math.sqrt(LOADING), math.sqrt(2 + LOADING)
        unit1 = (s_big - s_small) ** 2
        unit2 = 9 + (s_small - s_big) ** 2
        assert math.isclose(mt.fsd(g, labels, r, labels), (unit1 + unit2) / 2, rel_tol=1e-12)

    def test_units_without_frames_are_skipped(self):
        g = np.array([[0.0], [1.0], [5.0]])
        r = np.array([[0.0], [1.0], [9.0], [8.0]])
        assert mt.fsd(g, [1, 1, 2], r, [1, 1, 3, 3]) <= 1e-12

    def test_no_shared_units(self):
        with pytest.raises(MetricError):
            mt.fsd(np.zeros((3, 1)), [1, 1, 1], np.zeros((3, 1)), [2, 2, 2])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            mt.fsd(np.zeros((3, 1)), [1, 1], np.zeros((3, 1)), [1, 1, 1])


def test_pose_features():
    pose = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    feats = mt.pose_features(pose)
    assert feats.shape == (3, 6)
    assert feats[:, 3].tolist() == [1.0, 1.0, 2.0]
