import math

import numpy as np
import pytest

from agloc.geometry import RelPose4, compose, invert, project, transform_point, wrap_angle, yaw_of
from agloc.protocol import decode, encode
from agloc.simkit import (
    InvalidConfig,
    NoiseModel,
    OutOfRange,
    ScenarioConfig,
    config_from_dict,
    first_covisible_cycle,
    generate,
    global_descriptor_of,
    read_config,
    render_cloud,
    render_frame,
    true_pose,
    visible_landmark_ids,
    write_config,
)


def scenario(preset="covisible", **kw):
    return generate(ScenarioConfig(preset=preset, **kw))


class TestDeterminism:
    def test_same_seed_same_scenario(self):
        a = scenario(seed=7)
        b = scenario(seed=7)
        assert np.array_equal(a.landmarks, b.landmarks)
        assert np.array_equal(a.region_of, b.region_of)

    def test_same_seed_same_renders_bytes(self):
        a = scenario(seed=3, noise=NoiseModel(pixel_sigma=0.5, descriptor_sigma=0.05,
                                              depth_sigma=0.02, vio_pos_sigma=0.01,
                                              vio_rot_sigma=0.01, lio_pos_sigma=0.01,
                                              lio_rot_sigma=0.01))
        b = scenario(seed=3, noise=NoiseModel(pixel_sigma=0.5, descriptor_sigma=0.05,
                                              depth_sigma=0.02, vio_pos_sigma=0.01,
                                              vio_rot_sigma=0.01, lio_pos_sigma=0.01,
                                              lio_rot_sigma=0.01))
        for c in range(3):
            for agent in ("uav", "ugv"):
                pa, _ = render_frame(a, agent, c)
                pb, _ = render_frame(b, agent, c)
                assert encode(pa) == encode(pb)
            assert np.array_equal(render_cloud(a, c), render_cloud(b, c))

    def test_different_seed_differs(self):
        a = scenario(seed=1)
        b = scenario(seed=2)
        assert not np.array_equal(a.landmarks, b.landmarks)


class TestRenderFrame:
    def test_noiseless_keypoints_reproject_exactly(self):
        s = scenario(seed=5)
        for agent in ("uav", "ugv"):
            packet, truth = render_frame(s, agent, 2)
            w2c = invert(truth.true_pose)
            for px, lm in zip(packet.keypoints, truth.landmark_ids):
                pc = transform_point(w2c, s.landmarks[lm])
                want = project(s.intrinsics(), pc)
                # f32 quantization of the pixel is the only error source
                assert np.linalg.norm(px.astype(float) - want) < 1e-3

    def test_transmitted_pose_is_in_agent_world(self):
        s = scenario(seed=6)
        packet, truth = render_frame(s, "uav", 1)
        sent_q = packet.pose[:4].astype(float)
        sent_t = packet.pose[4:].astype(float)
        want = compose(s.true_relative.to_rigid(), truth.true_pose)
        assert np.linalg.norm(sent_t - want.t) < 1e-5
        assert abs(abs(np.dot(sent_q / np.linalg.norm(sent_q), want.q)) - 1) < 1e-6
        g_packet, g_truth = render_frame(s, "ugv", 1)
        assert np.linalg.norm(g_packet.pose[4:].astype(float) - g_truth.true_pose.t) < 1e-5

    def test_eq1_composition_reproduces_true_relative(self):
        """Ground-truth poses satisfy the frame-composition identity."""
        s = scenario(seed=8)
        _, truth_a = render_frame(s, "uav", 3)
        _, truth_g = render_frame(s, "ugv", 3)
        t_wa_ca = compose(s.true_relative.to_rigid(), truth_a.true_pose)
        t_ca_cg = compose(invert(truth_a.true_pose), truth_g.true_pose)
        got = compose(t_wa_ca, compose(t_ca_cg, invert(truth_g.true_pose)))
        rel = RelPose4.from_rigid(got)
        assert np.linalg.norm(rel.t - s.true_relative.t) < 1e-9
        assert abs(wrap_angle(rel.yaw - s.true_relative.yaw)) < 1e-9

    def test_pixel_noise_statistics(self):
        s = scenario(seed=9, noise=NoiseModel(pixel_sigma=0.5))
        clean = scenario(seed=9)
        errs = []
        for c in range(s.config.cycles()):
            p_noisy, t = render_frame(s, "ugv", c)
            p_clean, _ = render_frame(clean, "ugv", c)
            errs.append((p_noisy.keypoints - p_clean.keypoints).ravel())
        errs = np.concatenate(errs)
        assert len(errs) >= 400
        assert 0.4 <= float(errs.std()) <= 0.6

    def test_budget_respected(self):
        s = scenario(seed=10, keypoints_per_frame=32)
        packet, _ = render_frame(s, "ugv", 0)
        assert packet.keypoint_count <= 32

    def test_out_of_range(self):
        s = scenario(seed=11)
        with pytest.raises(OutOfRange):
            render_frame(s, "ugv", 99)

    def test_round_trips_through_wire(self):
        s = scenario(seed=12, noise=NoiseModel(pixel_sigma=0.3))
        packet, _ = render_frame(s, "uav", 0)
        assert decode(encode(packet)) == packet


class TestGlobalDescriptors:
    def test_overlap_implies_proximity(self):
        s = scenario(seed=13, duration_s=10.0)
        # consecutive ground views overlap heavily; compare to a far view
        ids = [visible_landmark_ids(s, "ugv", c) for c in range(10)]
        d0 = global_descriptor_of(s, ids[0])
        d1 = global_descriptor_of(s, ids[1])
        d9 = global_descriptor_of(s, ids[9])
        near = np.linalg.norm(d0 - d1)
        far = np.linalg.norm(d0 - d9)
        assert near < far

    def test_same_region_views_are_nearest(self):
        s = scenario(seed=14)
        for c in range(3):
            ga = visible_landmark_ids(s, "ugv", c)
            aa = visible_landmark_ids(s, "uav", c)
            if len(set(ga.tolist()) & set(aa.tolist())) < 10:
                continue
            dg = global_descriptor_of(s, ga)
            da = global_descriptor_of(s, aa)
            assert np.linalg.norm(dg - da) < math.sqrt(2.0)

    def test_unit_norm(self):
        s = scenario(seed=15)
        d = global_descriptor_of(s, visible_landmark_ids(s, "ugv", 0))
        assert abs(np.linalg.norm(d) - 1.0) < 1e-6


class TestCloud:
    def test_coverage_of_visible_landmarks(self):
        s = scenario(seed=16)
        cloud = render_cloud(s, 0).astype(float)
        ids = visible_landmark_ids(s, "ugv", 0)
        for lm in ids:
            d = np.linalg.norm(cloud - s.landmarks[lm], axis=1)
            assert d.min() <= 0.05

    def test_noise_scale(self):
        s = scenario(seed=17, noise=NoiseModel(depth_sigma=0.02),
                     cloud_points_per_landmark=0)
        clean = scenario(seed=17, cloud_points_per_landmark=0)
        a = render_cloud(s, 0).astype(float)
        b = render_cloud(clean, 0).astype(float)
        err = np.linalg.norm(a - b, axis=1)
        assert 0.01 <= float(np.median(err)) <= 0.06

    def test_f32_dtype(self):
        s = scenario(seed=18)
        assert render_cloud(s, 0).dtype == np.float32


class TestPresets:
    def test_covisible_has_shared_landmarks_from_start(self):
        s = scenario("covisible", seed=19)
        assert first_covisible_cycle(s, min_shared=20) == 0

    def test_disjoint_start_has_no_initial_overlap(self):
        s = scenario("disjoint_start", seed=20, duration_s=12.0)
        first = first_covisible_cycle(s, min_shared=10)
        g = set(visible_landmark_ids(s, "ugv", 0).tolist())
        a = set(visible_landmark_ids(s, "uav", 0).tolist())
        assert len(g & a) == 0
        assert first is not None and first >= 2

    def test_plane_depths_near_five(self):
        s = scenario("plane", seed=21)
        packet, truth = render_frame(s, "ugv", 0)
        w2c = invert(truth.true_pose)
        z = np.array([transform_point(w2c, s.landmarks[i])[2]
                      for i in truth.landmark_ids])
        assert np.all(np.abs(z - 5.0) < 0.1)

    def test_trajectories_move(self):
        s = scenario(seed=22)
        p0 = true_pose(s, "ugv", 0)
        p5 = true_pose(s, "ugv", 5)
        assert np.linalg.norm(p5.t - p0.t) > 3.0
        assert yaw_of(p0) == pytest.approx(yaw_of(p5), abs=1e-9)


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = ScenarioConfig(preset="disjoint_start", seed=42, landmark_count=300,
                             noise=NoiseModel(pixel_sigma=0.5, depth_sigma=0.02))
        path = tmp_path / "scenario.cfg"
        write_config(cfg, path)
        back = read_config(path)
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidConfig):
            config_from_dict({"bogus": "1"})

    def test_bad_preset_rejected(self):
        with pytest.raises(InvalidConfig):
            ScenarioConfig(preset="volcano")

    def test_negative_noise_rejected(self):
        with pytest.raises(InvalidConfig):
            NoiseModel(pixel_sigma=-1.0)

    def test_comments_and_spacing(self, tmp_path):
        path = tmp_path / "s.cfg"
        path.write_text("# header\nseed = 5   # trailing\n\npreset = plane\n")
        cfg = read_config(path)
        assert cfg.seed == 5 and cfg.preset == "plane"
