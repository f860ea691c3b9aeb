import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from carmsim.bodyfit import (TARGETS, BodyParams, default_params, default_template,
                             fit_body, forward_kinematics, locate_target,
                             locate_target_from_joints, positioning_error)
from carmsim.errors import FrameDegenerate, InsufficientKeypoints
from carmsim.observation import JointId
from carmsim.triangulation import ScoredKeypoint3D

J = JointId
TEMPLATE = default_template()


def keypoints_from(fk, rng=None, sigma=0.0, drop=(), rho=0.9):
    out = {}
    for j in JointId:
        if j in drop:
            continue
        pos = fk[j] if sigma == 0 else fk[j] + rng.normal(0, sigma, 3)
        out[j] = ScoredKeypoint3D(joint=j, timestep=0, position=pos, rho=rho,
                                  vis=1.0, inv_err=2.0, subset=("c0", "c1"))
    return out


def random_body(rng):
    scales = {c: float(np.clip(rng.normal(1.0, 0.05), 0.85, 1.15)) for c in TEMPLATE.bones}
    rots = {j: Rotation.from_rotvec(rng.uniform(-0.15, 0.15, 3)).as_matrix()
            for j in (J.R_ELBOW, J.L_ELBOW, J.R_SHOULDER, J.L_SHOULDER)}
    return BodyParams(root_position=rng.uniform([-200, -100, 900], [800, 100, 1050]),
                      root_orientation=Rotation.from_rotvec([0, 0, rng.uniform(-0.3, 0.3)]).as_matrix(),
                      bone_scales=scales, joint_rotations=rots)


class TestForwardKinematics:
    def test_canonical_supine_layout(self):
        fk = forward_kinematics(TEMPLATE, default_params(TEMPLATE))
        # independent chain sums for a few joints
        assert np.allclose(fk[J.NECK], [0, 0, 0])
        assert np.allclose(fk[J.HEAD_TOP], [180, 0, 0])
        assert np.allclose(fk[J.R_WRIST], [-550, -200, 0])  # shoulder 200 + arm 300 + 250
        assert np.allclose(fk[J.L_ANKLE], fk[J.L_KNEE] + [-420, 0, 0])

    def test_root_translation_equivariance(self):
        base = forward_kinematics(TEMPLATE, default_params(TEMPLATE))
        moved = forward_kinematics(TEMPLATE, default_params(TEMPLATE, (100.0, 0.0, 0.0)))
        assert np.allclose(moved, base + [100.0, 0.0, 0.0], atol=1e-12)

    def test_uniform_scale_scales_bone_lengths(self):
        params = default_params(TEMPLATE)
        scaled = BodyParams(root_position=params.root_position,
                            root_orientation=params.root_orientation,
                            bone_scales={c: 1.1 for c in TEMPLATE.bones})
        fk = forward_kinematics(TEMPLATE, scaled)
        for child, parent in TEMPLATE.parents.items():
            length = np.linalg.norm(fk[child] - fk[parent])
            assert length == pytest.approx(1.1 * TEMPLATE.bone_lengths[child], abs=1e-9)

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            body = random_body(rng)
            q = Rotation.from_rotvec(rng.uniform(-1, 1, 3)).as_matrix()
            d = rng.uniform(-500, 500, 3)
            fk = forward_kinematics(TEMPLATE, body)
            moved = BodyParams(root_position=q @ body.root_position + d,
                               root_orientation=q @ body.root_orientation,
                               bone_scales=body.bone_scales,
                               joint_rotations=body.joint_rotations)
            fk2 = forward_kinematics(TEMPLATE, moved)
            assert np.allclose(fk2, fk @ q.T + d, atol=1e-6)


class TestFitBody:
    def test_exact_recovery(self):
        rng = np.random.default_rng(1)
        fk = forward_kinematics(TEMPLATE, random_body(rng))
        fit = fit_body(keypoints_from(fk), TEMPLATE)
        fk_fit = forward_kinematics(TEMPLATE, fit)
        rms = np.sqrt(np.mean(np.sum((fk_fit - fk) ** 2, axis=1)))
        assert rms < 0.1

    def test_noisy_bound_from_monte_carlo(self):
        # 200-seed Monte-Carlo oracle: per-joint error mean 6.9, max 24.6 mm
        errs = []
        for seed in range(25):
            rng = np.random.default_rng(seed)
            fk = forward_kinematics(TEMPLATE, random_body(rng))
            fit = fit_body(keypoints_from(fk, rng, sigma=5.0), TEMPLATE)
            errs.append(np.linalg.norm(forward_kinematics(TEMPLATE, fit) - fk, axis=1))
        errs = np.array(errs)
        assert errs.max() < 26.0
        assert errs.mean() < 9.0

    def test_occlusion_completion(self):
        # held-out joints predicted by FK; 200-seed oracle max 68 mm
        drop = (J.L_WRIST, J.R_ANKLE, J.NOSE)
        for seed in range(15):
            rng = np.random.default_rng(seed)
            fk = forward_kinematics(TEMPLATE, random_body(rng))
            fit = fit_body(keypoints_from(fk, rng, sigma=5.0, drop=drop), TEMPLATE)
            fk_fit = forward_kinematics(TEMPLATE, fit)
            for j in drop:
                assert np.linalg.norm(fk_fit[j] - fk[j]) < 70.0

    def test_input_order_invariance(self):
        rng = np.random.default_rng(2)
        fk = forward_kinematics(TEMPLATE, random_body(rng))
        kps = keypoints_from(fk, rng, sigma=3.0)
        fit_a = fit_body(kps, TEMPLATE)
        shuffled = {j: kps[j] for j in reversed(list(kps))}
        fit_b = fit_body(shuffled, TEMPLATE)
        assert np.allclose(forward_kinematics(TEMPLATE, fit_a),
                           forward_kinematics(TEMPLATE, fit_b), atol=1e-6)

    def test_too_few_keypoints(self):
        rng = np.random.default_rng(3)
        fk = forward_kinematics(TEMPLATE, random_body(rng))
        kps = keypoints_from(fk)
        small = {j: kps[j] for j in list(kps)[:7]}
        with pytest.raises(InsufficientKeypoints):
            fit_body(small, TEMPLATE)

    def test_low_scores_ignored(self):
        rng = np.random.default_rng(4)
        fk = forward_kinematics(TEMPLATE, random_body(rng))
        kps = keypoints_from(fk)
        kps[J.R_WRIST] = ScoredKeypoint3D(joint=J.R_WRIST, timestep=0,
                                          position=fk[J.R_WRIST] + [500, 0, 0],
                                          rho=0.01, vis=1.0, inv_err=2.0, subset=("c0",))
        fit = fit_body(kps, TEMPLATE)
        fk_fit = forward_kinematics(TEMPLATE, fit)
        # corrupted-but-discounted wrist should not drag its own prediction far
        assert np.linalg.norm(fk_fit[J.R_WRIST] - fk[J.R_WRIST]) < 30.0

    def test_bone_lengths_constant_under_rigid_motion(self):
        rng = np.random.default_rng(5)
        body = random_body(rng)
        lengths = []
        for k in range(4):
            q = Rotation.from_rotvec([0, 0, 0.2 * k]).as_matrix()
            d = np.array([50.0 * k, -30.0 * k, 10.0 * k])
            moved = BodyParams(root_position=q @ body.root_position + d,
                               root_orientation=q @ body.root_orientation,
                               bone_scales=body.bone_scales,
                               joint_rotations=body.joint_rotations)
            fk = forward_kinematics(TEMPLATE, moved)
            fit = fit_body(keypoints_from(fk), TEMPLATE)
            fk_fit = forward_kinematics(TEMPLATE, fit)
            lengths.append([np.linalg.norm(fk_fit[c] - fk_fit[p])
                            for c, p in TEMPLATE.parents.items()])
        lengths = np.array(lengths)
        assert np.ptp(lengths, axis=0).max() < 1.0


class TestLocateTarget:
    def test_head_top_is_fk_joint(self):
        params = default_params(TEMPLATE, (600.0, 0.0, 980.0))
        fk = forward_kinematics(TEMPLATE, params)
        target = locate_target(params, TEMPLATE, TARGETS["head_top"])
        assert np.allclose(target, fk[J.HEAD_TOP], atol=1e-12)

    def test_radial_artery_along_forearm(self):
        params = default_params(TEMPLATE)
        fk = forward_kinematics(TEMPLATE, params)
        target = locate_target(params, TEMPLATE, TARGETS["right_radial_artery"])
        forearm = fk[J.R_WRIST] - fk[J.R_ELBOW]
        expected = fk[J.R_WRIST] - 20.0 * forearm / np.linalg.norm(forearm)
        assert np.allclose(target, expected, atol=1e-9)

    def test_commutes_with_rigid_transform(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            body = random_body(rng)
            fk = forward_kinematics(TEMPLATE, body)
            q = Rotation.from_rotvec(rng.uniform(-0.4, 0.4, 3)).as_matrix()
            d = rng.uniform(-300, 300, 3)
            for name in ("right_radial_artery", "head_top", "left_femoral_artery"):
                a = locate_target_from_joints(fk @ q.T + d, TARGETS[name])
                b = q @ locate_target_from_joints(fk, TARGETS[name]) + d
                assert np.allclose(a, b, atol=1e-6)

    def test_degenerate_frame(self):
        joints = np.zeros((15, 3))
        with pytest.raises(FrameDegenerate):
            locate_target_from_joints(joints, TARGETS["right_radial_artery"])

    def test_head_top_matches_high_confidence_keypoint(self):
        rng = np.random.default_rng(7)
        fk = forward_kinematics(TEMPLATE, random_body(rng))
        kps = keypoints_from(fk, rng, sigma=1.0, rho=0.95)
        fit = fit_body(kps, TEMPLATE)
        target = locate_target(fit, TEMPLATE, TARGETS["head_top"])
        assert np.linalg.norm(target - kps[J.HEAD_TOP].position) < 10.0


class TestPositioningError:
    def test_identical(self):
        assert positioning_error([1, 2, 3], [1, 2, 3]) == 0.0

    def test_z_ignored(self):
        assert positioning_error([3, 4, 100], [0, 0, 0]) == pytest.approx(5.0)

    def test_scale_validation(self):
        with pytest.raises(ValueError):
            BodyParams(root_position=np.zeros(3), root_orientation=np.eye(3),
                       bone_scales={J.HEAD_TOP: 3.0})
