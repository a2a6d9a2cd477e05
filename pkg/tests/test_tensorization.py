import math

import numpy as np
import pytest

from trajstream.generator import GeneratorSpec, generate_synthetic
from trajstream.geometry import Pose2D, wrap_angle
from trajstream.scenario import LaneSegment, ObservationWindow, WindowTrack
from trajstream.tensorization import (TensorizationError, apply_se2_bundle,
                                      apply_se2_scenario, build_agent_tensor,
                                      build_lane_tensor, focal_frame,
                                      resample_polyline, select_context, tensorize)

from conftest import random_polyline, window_of


def make_track(track_id, xy, vel=None, valid=None, agent_type="vehicle", T_h=None):
    xy = np.asarray(xy, dtype=float)
    n = len(xy)
    if vel is None:
        vel = np.zeros((n, 2))
        vel[:-1] = (xy[1:] - xy[:-1]) * 10.0
        vel[-1] = vel[-2] if n > 1 else 0.0
    hist = np.concatenate([xy, np.asarray(vel, dtype=float)], axis=1)
    hv = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    hist[~hv] = 0.0
    horizon = 80
    return WindowTrack(track_id=track_id, agent_type=agent_type, hist=hist,
                       hist_valid=hv, fut=np.zeros((horizon, 2)),
                       fut_valid=np.zeros(horizon, dtype=bool))


def make_window(tracks, lanes=(), focal="f", T_h=None):
    T_h = T_h if T_h is not None else len(tracks[0].hist)
    return ObservationWindow(t_now=T_h - 1, T_h=T_h, T_f=60, T_a=20,
                             focal_track_id=focal, scored_track_ids=[focal],
                             tracks=list(tracks), lanes=list(lanes))


class TestFocalFrame:
    def test_heading_along_x(self):
        xy = np.array([[10.0 - 0.1 * (4 - i), 5.0] for i in range(5)])
        w = make_window([make_track("f", xy)])
        pose = focal_frame(w)
        assert (pose.x, pose.y) == (10.0, 5.0)
        assert pose.yaw == pytest.approx(0.0, abs=1e-12)

    def test_heading_along_y(self):
        xy = np.array([[3.0, 0.1 * i] for i in range(5)])
        w = make_window([make_track("f", xy)])
        assert focal_frame(w).yaw == pytest.approx(math.pi / 2)

    def test_stationary_falls_back_to_prior_displacement(self):
        # moved toward -x, then stands still with zero velocity
        xy = np.array([[2.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        vel = np.zeros((4, 2))
        w = make_window([make_track("f", xy, vel=vel)])
        assert focal_frame(w).yaw == pytest.approx(math.pi)

    def test_fully_stationary_yaw_zero(self):
        xy = np.tile([4.0, 4.0], (5, 1))
        w = make_window([make_track("f", xy, vel=np.zeros((5, 2)))])
        assert focal_frame(w).yaw == 0.0

    def test_invalid_at_t_now_raises(self):
        valid = [True, True, True, True, False]
        xy = np.array([[0.1 * i, 0.0] for i in range(5)])
        w = make_window([make_track("f", xy, valid=valid)])
        with pytest.raises(TensorizationError):
            focal_frame(w)


class TestSelectContext:
    def _window_with_neighbor_at(self, dist):
        f = make_track("f", np.array([[0.1 * i, 0.0] for i in range(5)]))
        n = make_track("n", np.tile([0.4 + dist, 0.0], (5, 1)), vel=np.zeros((5, 2)))
        lane_far = LaneSegment("far", "standard",
                               np.array([[200.0, 0.0], [210.0, 0.0]]))
        return make_window([f, n], [lane_far])

    def test_boundary_inclusive(self):
        w = self._window_with_neighbor_at(149.9)
        pose = focal_frame(w)
        tracks, lanes = select_context(w, pose, 150.0)
        assert {t.track_id for t in tracks} == {"f", "n"}
        w = self._window_with_neighbor_at(150.1)
        tracks, _ = select_context(w, focal_frame(w), 150.0)
        assert {t.track_id for t in tracks} == {"f"}

    def test_far_lane_dropped(self):
        w = self._window_with_neighbor_at(10.0)
        _, lanes = select_context(w, focal_frame(w), 150.0)
        assert lanes == []

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            tracks = [make_track("f", np.array([[0.1 * i, 0.0] for i in range(5)]))]
            for j in range(rng.integers(1, 12)):
                p = rng.uniform(-200, 200, 2)
                tracks.append(make_track(f"a{j}", np.tile(p, (5, 1)),
                                         vel=np.zeros((5, 2))))
            lanes = [LaneSegment(f"l{j}", "standard",
                                 random_polyline(rng) + rng.uniform(-220, 220, 2))
                     for j in range(rng.integers(0, 8))]
            w = make_window(tracks, lanes)
            pose = focal_frame(w)
            radius = float(rng.uniform(20, 180))
            kept_tracks, kept_lanes = select_context(w, pose, radius)
            center = np.array([pose.x, pose.y])
            expect_tracks = {t.track_id for t in tracks
                             if t.track_id == "f"
                             or np.linalg.norm(t.hist[t.hist_valid][-1, :2] - center) <= radius}
            expect_lanes = {l.lane_id for l in lanes
                            if min(np.linalg.norm(p - center) for p in l.centerline) <= radius}
            assert {t.track_id for t in kept_tracks} == expect_tracks
            assert {l.lane_id for l in kept_lanes} == expect_lanes


class TestAgentTensor:
    def test_first_valid_state_is_frame_origin(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(-5, 5, (6, 2)).cumsum(axis=0)
        track = make_track("f", xy)
        speed = np.linalg.norm(track.hist[0, 2:4])
        A, poses, types, mask = build_agent_tensor([track], 6, Pose2D.identity())
        assert A.shape == (1, 6, 5)
        np.testing.assert_allclose(A[0, 0], [0.0, 0.0, speed, 0.0, 1.0], atol=1e-9)

    def test_straight_track_local_axis(self):
        xy = np.array([[i * 1.3 + 2.0, -i * 1.3 + 4.0] for i in range(8)])
        track = make_track("f", xy)
        A, *_ = build_agent_tensor([track], 8, Pose2D.identity())
        assert np.all(np.diff(A[0, :, 0]) > 0)
        np.testing.assert_allclose(A[0, :, 1], 0.0, atol=1e-9)

    def test_agent_pose_transform_recovers_focal_frame_coords(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            xy = rng.uniform(-40, 40, (10, 2)).cumsum(axis=0) * 0.2
            valid = rng.random(10) > 0.2
            valid[rng.integers(0, 10)] = True
            track = make_track("a", xy, valid=valid)
            focal = Pose2D(*rng.uniform(-30, 30, 2), rng.uniform(-math.pi, math.pi))
            A, poses, *_ = build_agent_tensor([track], 10, focal)
            frame = Pose2D(*poses[0])
            recovered = frame.transform_points(A[0, valid, :2])
            expect = focal.inverse().transform_points(xy[valid])
            np.testing.assert_allclose(recovered, expect, atol=1e-9)

    def test_invalid_rows_zeroed(self):
        valid = [False, True, True, False, True]
        xy = np.array([[float(i), 1.0] for i in range(5)])
        track = make_track("a", xy, valid=valid)
        A, *_ = build_agent_tensor([track], 5, Pose2D.identity())
        assert np.all(A[0, ~np.asarray(valid)] == 0.0)


class TestLaneTensor:
    def test_straight_lane_resample(self):
        lane = LaneSegment("l", "standard", np.array([[0.0, 0.0], [10.0, 0.0]]))
        L, poses, types, mask, ids, dropped = build_lane_tensor(
            [lane], 5, Pose2D.identity(), 150.0)
        np.testing.assert_allclose(L[0, :, 0], [-5.0, -2.5, 0.0, 2.5, 5.0], atol=1e-9)
        np.testing.assert_allclose(L[0, :, 1], 0.0, atol=1e-9)
        assert L[0, :, 2].all()
        np.testing.assert_allclose(poses[0], [5.0, 0.0, 0.0], atol=1e-12)

    def test_partially_outside_region_flags_invalid(self):
        lane = LaneSegment("l", "standard", np.array([[0.0, 0.0], [300.0, 0.0]]))
        L, *_ = build_lane_tensor([lane], 10, Pose2D.identity(), 150.0)
        valid = L[0, :, 2] > 0
        assert valid[0] and not valid[-1]
        assert np.all(L[0, ~valid] == 0.0)

    def test_resample_positions_cover_arclength_uniformly(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            line = random_polyline(rng, n=int(rng.integers(3, 15)))
            cum = np.concatenate([[0.0], np.cumsum(
                np.linalg.norm(np.diff(line, axis=0), axis=1))])
            total = cum[-1]
            pts = resample_polyline(line, 20)
            # each resampled point lies on the original polyline at its
            # expected arc-length position
            for i, p in enumerate(pts):
                s = i * total / 19
                expect = np.array([np.interp(s, cum, line[:, 0]),
                                   np.interp(s, cum, line[:, 1])])
                assert np.linalg.norm(p - expect) < 1e-9
            # sampled arc positions span the full length
            assert abs(total - 19 * (total / 19)) / total < 1e-6

    def test_resample_idempotent_on_uniform_polyline(self):
        # chord-uniform inputs: a straight line and an equal-angle circle arc
        line = np.linspace([0.0, 0.0], [37.0, 12.0], 20)
        np.testing.assert_allclose(resample_polyline(line, 20), line, atol=1e-9)
        ang = np.linspace(0.2, 1.7, 20)
        arc = np.stack([25.0 * np.cos(ang), 25.0 * np.sin(ang)], axis=1)
        np.testing.assert_allclose(resample_polyline(arc, 20), arc, atol=1e-9)

    def test_zero_length_centerline_dropped_with_count(self):
        bad = LaneSegment("z", "standard", np.array([[1.0, 1.0], [1.0, 1.0]]))
        good = LaneSegment("g", "standard", np.array([[0.0, 0.0], [5.0, 0.0]]))
        L, poses, types, mask, ids, dropped = build_lane_tensor(
            [bad, good], 5, Pose2D.identity(), 150.0)
        assert dropped == 1 and ids == ["g"]


class TestBundleInvariance:
    def test_local_frame_invariance_under_rigid_motion(self, scenario, tiny_cfg):
        rng = np.random.default_rng(1)
        w = window_of(scenario)
        b0 = tensorize(w, tiny_cfg.P_l, tiny_cfg.context_radius_m)
        for _ in range(5):
            g = Pose2D(*rng.uniform(-200, 200, 2), rng.uniform(-math.pi, math.pi))
            sc2 = apply_se2_scenario(scenario, g)
            b1 = tensorize(window_of(sc2), tiny_cfg.P_l, tiny_cfg.context_radius_m)
            np.testing.assert_allclose(b1.A, b0.A, atol=1e-6)
            np.testing.assert_allclose(b1.L, b0.L, atol=1e-6)
            np.testing.assert_allclose(b1.agent_poses, b0.agent_poses, atol=1e-6)
            np.testing.assert_allclose(b1.lane_poses, b0.lane_poses, atol=1e-6)
            expect = g.compose(b0.focal_pose)
            assert abs(b1.focal_pose.x - expect.x) < 1e-6
            assert abs(b1.focal_pose.y - expect.y) < 1e-6
            assert abs(wrap_angle(b1.focal_pose.yaw - expect.yaw)) < 1e-9

    def test_mask_consistency(self, ped_scenario, tiny_cfg):
        w = window_of(ped_scenario)
        b = tensorize(w, tiny_cfg.P_l, tiny_cfg.context_radius_m)
        invalid_a = b.A[:, :, 4] == 0
        assert np.all(b.A[invalid_a] == 0.0)
        if b.L.size:
            invalid_l = b.L[:, :, 2] == 0
            assert np.all(b.L[invalid_l] == 0.0)


class TestApplySE2:
    def test_identity_bit_identical(self, scenario):
        out = apply_se2_scenario(scenario, Pose2D.identity())
        for t0, t1 in zip(scenario.tracks, out.tracks):
            assert np.array_equal(t0.x, t1.x) and np.array_equal(t0.y, t1.y)
            assert np.array_equal(t0.vx, t1.vx) and np.array_equal(t0.vy, t1.vy)

    def test_translate_roundtrip(self, scenario):
        fwd = apply_se2_scenario(scenario, Pose2D(1.0, 0.0, 0.0))
        back = apply_se2_scenario(fwd, Pose2D(-1.0, 0.0, 0.0))
        for t0, t1 in zip(scenario.tracks, back.tracks):
            np.testing.assert_allclose(t1.x, t0.x, atol=1e-12)
            np.testing.assert_allclose(t1.y, t0.y, atol=1e-12)

    def test_rotation_composition(self, scenario):
        quarter = Pose2D(0.0, 0.0, math.pi / 2)
        half = Pose2D(0.0, 0.0, math.pi)
        twice = apply_se2_scenario(apply_se2_scenario(scenario, quarter), quarter)
        once = apply_se2_scenario(scenario, half)
        for t0, t1 in zip(once.tracks, twice.tracks):
            np.testing.assert_allclose(t1.x, t0.x, atol=1e-9)
            np.testing.assert_allclose(t1.y, t0.y, atol=1e-9)

    def test_bundle_transform_touches_only_global_pose(self, scenario, tiny_cfg):
        w = window_of(scenario)
        b = tensorize(w, tiny_cfg.P_l, tiny_cfg.context_radius_m)
        g = Pose2D(3.0, -2.0, 0.4)
        b2 = apply_se2_bundle(b, g)
        assert b2.A is b.A and b2.L is b.L
        expect = g.compose(b.focal_pose)
        assert (b2.focal_pose.x, b2.focal_pose.y) == pytest.approx((expect.x, expect.y))
