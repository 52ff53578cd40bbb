import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contactdyn.geometry import (
    InvalidPoseError,
    Pose,
    _quat_log,
    add_s,
    add_s_auc,
    add_s_curve,
    apply_increments,
    auc_from_errors,
    box_cloud,
    encode_increments,
    exp_map,
    is_rotation,
    log_map,
    transform_cloud,
)
from contactdyn.selfcheck import brute_add_s, random_pose_sequence, random_rotation_vectors

finite = st.floats(-1.0, 1.0, allow_nan=False)
rotvec = arrays(np.float64, 3, elements=st.floats(-1.8, 1.8, allow_nan=False))


def rodrigues_termwise(w):
    """exp(hat(w)) by summing the matrix power series."""
    W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    out, term = np.eye(3), np.eye(3)
    for k in range(1, 60):
        term = term @ W / k
        out = out + term
    return out


class TestExpLog:
    def test_zero_is_identity(self):
        assert np.array_equal(exp_map(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = exp_map(np.array([0, 0, np.pi / 2]))
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_identity_logs_to_zero(self):
        assert np.array_equal(log_map(np.eye(3)), np.zeros(3))

    def test_unit_angle_round_trip(self):
        w = np.array([0.6, -0.0, 0.8])
        np.testing.assert_allclose(log_map(exp_map(w)), w, atol=1e-14)

    @settings(max_examples=200)
    @given(rotvec)
    def test_matches_series(self, w):
        np.testing.assert_allclose(exp_map(w), rodrigues_termwise(w), atol=1e-12)

    def test_round_trip_batch(self):
        w = random_rotation_vectors(np.random.default_rng(0), 20_000, np.pi - 1e-3)
        assert np.max(np.abs(log_map(exp_map(w)) - w)) <= 1e-9

    @pytest.mark.parametrize("gap", [1e-3, 1e-5, 1e-7])
    def test_near_pi_matches_quaternion_oracle(self, gap):
        rng = np.random.default_rng(3)
        for w in random_rotation_vectors(rng, 50, 1.0):
            w = w / np.linalg.norm(w) * (np.pi - gap)
            R = exp_map(w)
            np.testing.assert_allclose(log_map(R), _quat_log(R), atol=1e-6)
            np.testing.assert_allclose(log_map(R), w, atol=1e-6)

    def test_tiny_angles_use_series(self):
        w = np.array([1e-10, -2e-10, 3e-10])
        np.testing.assert_allclose(log_map(exp_map(w)), w, rtol=1e-6, atol=0)

    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidPoseError):
            log_map(np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(ValueError):
            exp_map(np.array([np.nan, 0, 0]))

    @given(rotvec)
    def test_exp_is_a_rotation(self, w):
        assert is_rotation(exp_map(w))


class TestIncrements:
    def test_constant_sequence_gives_zero(self):
        poses = Pose.planar(np.full(5, 0.1), np.full(5, -0.2), np.full(5, 0.3))
        assert np.array_equal(encode_increments(poses), np.zeros((4, 6)))

    def test_pure_translation(self):
        poses = Pose.planar(0.01 * np.arange(4), np.zeros(4), np.zeros(4))
        inc = encode_increments(poses)
        np.testing.assert_allclose(inc[:, :3], np.tile([0.01, 0, 0], (3, 1)), atol=1e-15)
        assert np.array_equal(inc[:, 3:], np.zeros((3, 3)))

    def test_zero_increments_repeat_anchor(self):
        a = Pose.planar(0.1, 0.2, 0.7)
        out = apply_increments(a, np.zeros((6, 6)))
        assert np.array_equal(out.p, np.tile(a.p, (6, 1)))
        assert np.array_equal(out.R, np.tile(a.R, (6, 1, 1)))

    def test_coaxial_rotations_compose(self):
        out = apply_increments(Pose.identity(), np.array([[0, 0, 0, 0, 0, np.pi / 4]] * 2))
        np.testing.assert_allclose(log_map(out.R[-1]), [0, 0, np.pi / 2], atol=1e-15)

    def test_round_trip_1000_sequences(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            seq = random_pose_sequence(rng, int(rng.integers(2, 12)))
            back = apply_increments(seq[0], encode_increments(seq))
            worst = max(worst, np.abs(back.p - seq.p[1:]).max(), np.linalg.norm(back.R - seq.R[1:], axis=(1, 2)).max())
        assert worst <= 1e-9

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(8)
        seqs = [random_pose_sequence(rng, 6) for _ in range(4)]
        batch = Pose.stack(seqs)
        inc = encode_increments(batch)
        for i, s in enumerate(seqs):
            assert np.array_equal(inc[i], encode_increments(s))
        out = apply_increments(batch[:, 0], inc)
        for i, s in enumerate(seqs):
            np.testing.assert_allclose(out.R[i], apply_increments(s[0], inc[i]).R, atol=0)

    def test_rejects_pi_rotation_increment(self):
        with pytest.raises(InvalidPoseError):
            apply_increments(Pose.identity(), np.array([[0, 0, 0, 0, 0, np.pi]]))

    def test_planar_poses_stay_planar(self):
        poses = Pose.planar(np.linspace(0, 0.1, 6), np.linspace(0, -0.05, 6), np.linspace(0, 0.4, 6))
        inc = encode_increments(poses)
        assert np.all(inc[:, 2] == 0) and np.all(inc[:, 3:5] == 0)


class TestClouds:
    def test_identity_leaves_cloud(self):
        cloud = np.random.default_rng(0).standard_normal((10, 3))
        assert np.array_equal(transform_cloud(cloud, Pose.identity()), cloud)

    def test_translation_shifts(self):
        cloud = np.random.default_rng(0).standard_normal((10, 3))
        p = np.array([0.1, -0.2, 0.3])
        np.testing.assert_allclose(transform_cloud(cloud, Pose(p, np.eye(3))), cloud + p, atol=1e-15)

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_rigidity(self, seed):
        rng = np.random.default_rng(seed)
        cloud = rng.standard_normal((12, 3))
        pose = Pose(rng.standard_normal(3), exp_map(random_rotation_vectors(rng, 1, np.pi)[0]))
        out = transform_cloud(cloud, pose)
        d0 = np.linalg.norm(cloud[:, None] - cloud[None], axis=-1)
        d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
        assert np.abs(d0 - d1).max() <= 1e-9

    def test_box_cloud_on_surface(self):
        pts = box_cloud((0.05, 0.03), 0.06, 500, np.random.default_rng(0))
        scaled = np.abs(pts) / np.array([0.05, 0.03, 0.03])
        assert np.allclose(scaled.max(axis=1), 1.0)


class TestAddS:
    def test_identical_poses(self):
        seq = random_pose_sequence(np.random.default_rng(0), 5)
        cloud = np.random.default_rng(1).standard_normal((20, 3))
        auc, err = add_s_auc(seq, seq, cloud, 0.05)
        assert np.array_equal(err, np.zeros(5)) and auc == 100.0

    @pytest.mark.parametrize("d", [0.0, 0.01, 0.025, 0.049])
    def test_constant_offset_single_point(self, d):
        gt = Pose.planar(np.zeros(4), np.zeros(4), np.zeros(4))
        pred = Pose(gt.p + [d, 0, 0], gt.R)
        auc, _ = add_s_auc(pred, gt, np.zeros((1, 3)), 0.05)
        assert auc == pytest.approx(100 * (0.05 - d) / 0.05, abs=1e-12)

    def test_cube_matches_brute_force(self):
        rng = np.random.default_rng(2)
        cube = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * 0.02
        for _ in range(50):
            gt = random_pose_sequence(rng, 4)
            pred = Pose(gt.p + rng.normal(0, 0.005, gt.p.shape), exp_map(rng.normal(0, 0.05, (4, 3))) @ gt.R)
            assert np.abs(add_s(pred, gt, cube) - brute_add_s(pred, gt, cube)).max() <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 64))
    def test_random_clouds_match_brute_force(self, seed, n):
        rng = np.random.default_rng(seed)
        cloud = rng.uniform(-0.05, 0.05, (n, 3))
        pred, gt = random_pose_sequence(rng, 3), random_pose_sequence(rng, 3)
        assert np.abs(add_s(pred, gt, cloud) - brute_add_s(pred, gt, cloud)).max() <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        cloud = rng.uniform(-0.05, 0.05, (16, 3))
        pred, gt = random_pose_sequence(rng, 3), random_pose_sequence(rng, 3)
        a = add_s(pred, gt, cloud)
        b = add_s(pred, gt, cloud[rng.permutation(16)])
        np.testing.assert_allclose(a, b, atol=1e-15)

    @given(arrays(np.float64, 20, elements=st.floats(0, 0.2)), st.floats(0.001, 0.1), st.floats(0.0, 0.1))
    def test_auc_monotone_in_dmax(self, errors, d, extra):
        assert auc_from_errors(errors, d) <= auc_from_errors(errors, d + extra) + 1e-12

    def test_curve_area_converges_to_closed_form(self):
        errors = np.random.default_rng(4).uniform(0, 0.06, 500)
        thr, frac = add_s_curve(errors, 0.05, 20_000)
        assert 100 * frac.mean() == pytest.approx(auc_from_errors(errors, 0.05), abs=0.02)
        assert np.all(np.diff(frac) >= 0) and thr[-1] == 0.05

    def test_length_mismatch(self):
        seq = random_pose_sequence(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            add_s(seq, seq[:2], np.zeros((1, 3)))
