import numpy as np
import pytest

from carmsim.geometry import project
from carmsim.observation import (CONFIDENCE_SCALE_PX, FrameObservations, JointId,
                                 NoiseConfig, Observation2D, dump_observations,
                                 load_observations, occluded_mask, score_model,
                                 synth_detect)
from carmsim.scenesim import Box, Sphere


def classroom_joints(rig):
    """15 joint positions well inside every camera's view."""
    rng = np.random.default_rng(42)
    return np.column_stack([rng.uniform(-500, 600, 15), rng.uniform(-250, 250, 15),
                            rng.uniform(900, 1100, 15)])


class TestScoreModel:
    def test_perfect_visible(self):
        rho, v = score_model([100, 100], [100, 100], occluded=False, in_frame=True)
        assert rho == 1.0 and v == 1

    def test_out_of_frame_visibility(self):
        _, v = score_model([0, 0], [0, 0], occluded=False, in_frame=False)
        assert v == 0

    def test_ten_px_error_gives_inverse_e(self):
        rho, _ = score_model([0, 0], [10, 0], occluded=False, in_frame=True)
        assert rho == pytest.approx(np.exp(-1.0), abs=1e-12)

    def test_occlusion_scales_down(self):
        rho, _ = score_model([0, 0], [0, 0], occluded=True, in_frame=True)
        assert rho == pytest.approx(0.2, abs=1e-12)

    def test_monotone_in_error(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            e1, e2 = sorted(rng.uniform(0, 60, 2))
            r1, _ = score_model([0, 0], [e1, 0], occluded=False, in_frame=True)
            r2, _ = score_model([0, 0], [e2, 0], occluded=False, in_frame=True)
            assert r1 >= r2


class TestOccludedMask:
    def test_box_blocks_ray(self, rig):
        cam = rig["c0"]
        target = np.array([[0.0, 0.0, 900.0]])
        midpoint = (cam.center + target[0]) / 2.0
        box = Box("b", midpoint, (300.0, 300.0, 300.0))
        assert occluded_mask(cam, target, [box])[0]
        far_box = Box("b2", midpoint + np.array([0, 0, 5000.0]), (300.0, 300.0, 300.0))
        assert not occluded_mask(cam, target, [far_box])[0]

    def test_sphere_behind_target_does_not_block(self, rig):
        cam = rig["c0"]
        target = np.array([[0.0, 0.0, 900.0]])
        behind = target[0] + (target[0] - cam.center) * 0.5
        assert not occluded_mask(cam, target, [Sphere("s", behind, 200.0)])[0]

    def test_no_occluders(self, rig):
        assert not occluded_mask(rig["c1"], np.zeros((4, 3)) + [0, 0, 900], []).any()


class TestSynthDetect:
    def test_noiseless_oracle(self, rig):
        joints = classroom_joints(rig)
        cam = rig["c0"]
        frame = synth_detect(joints, cam, [], NoiseConfig(seed=1), timestep=0)
        assert len(frame.observations) == 15
        for joint, obs in frame.observations.items():
            assert np.allclose(obs.pixel, project(cam, joints[joint]), atol=1e-12)
            assert obs.confidence == 1.0
            assert obs.visibility == 1

    def test_occluded_joint_dropped_or_low_confidence(self, rig):
        joints = classroom_joints(rig)
        cam = rig["c1"]
        midpoint = (cam.center + joints[JointId.R_WRIST]) / 2.0
        box = Box("occ", midpoint, (250.0, 250.0, 250.0))
        seen_low = 0
        for seed in range(20):
            frame = synth_detect(joints, cam, [box],
                                 NoiseConfig(dropout_prob=0.5, seed=seed), timestep=0)
            obs = frame.observations.get(JointId.R_WRIST)
            if obs is not None:
                assert obs.confidence <= 0.2
                seen_low += 1
        assert 0 < seen_low < 20  # both outcomes occur across seeds

    def test_noise_statistics(self, rig):
        joints = classroom_joints(rig)
        cam = rig["c2"]
        exact = {j: project(cam, joints[j]) for j in JointId}
        deltas = []
        noise = NoiseConfig(pixel_sigma=2.0, seed=7)
        for t in range(1000):
            frame = synth_detect(joints, cam, [], noise, timestep=t)
            for j, obs in frame.observations.items():
                deltas.append(obs.pixel - exact[j])
        deltas = np.array(deltas)
        assert 1.9 <= deltas[:, 0].std() <= 2.1
        assert 1.9 <= deltas[:, 1].std() <= 2.1

    def test_outliers_fixed_magnitude(self, rig):
        joints = classroom_joints(rig)
        cam = rig["c0"]
        noise = NoiseConfig(outlier_prob=1.0, outlier_magnitude=80.0, seed=3)
        frame = synth_detect(joints, cam, [], noise, timestep=0)
        for j, obs in frame.observations.items():
            assert np.linalg.norm(obs.pixel - project(cam, joints[j])) == pytest.approx(80.0)

    def test_bit_reproducible(self, rig):
        joints = classroom_joints(rig)
        noise = NoiseConfig(pixel_sigma=2.0, dropout_prob=0.3, outlier_prob=0.1,
                            outlier_magnitude=50.0, seed=11)
        a = synth_detect(joints, rig["c0"], [], noise, timestep=5)
        b = synth_detect(joints, rig["c0"], [], noise, timestep=5)
        assert set(a.observations) == set(b.observations)
        for j in a.observations:
            assert np.array_equal(a.observations[j].pixel, b.observations[j].pixel)
            assert a.observations[j].confidence == b.observations[j].confidence

    def test_varies_with_camera_and_timestep(self, rig):
        joints = classroom_joints(rig)
        noise = NoiseConfig(pixel_sigma=2.0, seed=11)
        a = synth_detect(joints, rig["c0"], [], noise, timestep=0)
        b = synth_detect(joints, rig["c0"], [], noise, timestep=1)
        j = JointId.NECK
        assert not np.array_equal(a.observations[j].pixel, b.observations[j].pixel)


class TestDataModel:
    def test_duplicate_joint_rejected(self):
        frame = FrameObservations(camera_id="c0", timestep=0)
        obs = Observation2D(joint=JointId.NOSE, pixel=[1, 2], confidence=0.5, visibility=1)
        frame.add(obs)
        with pytest.raises(ValueError):
            frame.add(obs)

    def test_confidence_range_enforced(self):
        with pytest.raises(ValueError):
            Observation2D(joint=JointId.NOSE, pixel=[0, 0], confidence=1.5, visibility=1)

    def test_noise_config_validation(self):
        with pytest.raises(ValueError):
            NoiseConfig(pixel_sigma=-1.0)
        with pytest.raises(ValueError):
            NoiseConfig(dropout_prob=1.5)

    def test_dump_round_trip(self, rig, tmp_path):
        joints = classroom_joints(rig)
        noise = NoiseConfig(pixel_sigma=1.0, seed=2)
        frames = [synth_detect(joints, cam, [], noise, timestep=t)
                  for t in range(3) for cam in rig.values()]
        path = tmp_path / "obs.jsonl"
        dump_observations(path, frames)
        loaded = load_observations(path)
        assert len(loaded) == len(frames)
        by_key = {(f.timestep, f.camera_id): f for f in frames}
        for f in loaded:
            orig = by_key[(f.timestep, f.camera_id)]
            assert set(f.observations) == set(orig.observations)
            for j in f.observations:
                assert np.allclose(f.observations[j].pixel, orig.observations[j].pixel)
