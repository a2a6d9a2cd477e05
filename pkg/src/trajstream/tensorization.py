"""Focal-frame model tensors from an observation window.

Agent histories are normalized per track to the track's first valid pose,
lane centerlines are arc-length resampled and expressed relative to their
midpoint, and each token's frame pose is stored in the focal agent's frame.
Invalid entries are zeroed everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose2D, wrap_angle
from .scenario import AGENT_TYPES, LANE_TYPES, LaneSegment, ObservationWindow, Scenario, WindowTrack

SPEED_EPS = 1e-6   # below this, a velocity/displacement defines no heading


class TensorizationError(ValueError):
    pass


@dataclass
class TensorBundle:
    A: np.ndarray            # [N_a, T_h, 5] local (x, y, vx, vy, valid)
    L: np.ndarray            # [N_l, P_l, 3] local (x, y, valid)
    agent_poses: np.ndarray  # [N_a, 3] track-origin frames in the focal frame
    lane_poses: np.ndarray   # [N_l, 3] centerline-midpoint frames in the focal frame
    agent_types: np.ndarray  # [N_a] int
    lane_types: np.ndarray   # [N_l] int
    agent_mask: np.ndarray   # [N_a] bool
    lane_mask: np.ndarray    # [N_l] bool
    focal_index: int
    focal_pose: Pose2D       # global
    track_ids: list[str]
    lane_ids: list[str]

    @property
    def num_tokens(self) -> int:
        return len(self.track_ids) + len(self.lane_ids)


def _heading_from_history(hist: np.ndarray, valid: np.ndarray, anchor: int) -> float:
    """Heading at a history step: velocity direction, then the nearest
    above-threshold displacement between valid samples (searching backward
    from the anchor first, then forward), then 0."""
    vx, vy = hist[anchor, 2], hist[anchor, 3]
    if math.hypot(vx, vy) > SPEED_EPS:
        return math.atan2(vy, vx)
    idx = np.flatnonzero(valid)
    pairs = list(zip(idx[:-1], idx[1:]))
    back = [p for p in pairs if p[1] <= anchor][::-1]
    fwd = [p for p in pairs if p[1] > anchor]
    for i, j in back + fwd:
        d = hist[j, :2] - hist[i, :2]
        if math.hypot(d[0], d[1]) > SPEED_EPS:
            return math.atan2(d[1], d[0])
    return 0.0


def focal_frame(window: ObservationWindow, focal_track_id: str | None = None) -> Pose2D:
    """Global pose of the focal agent at t_now."""
    track = window.track(focal_track_id or window.focal_track_id)
    t = window.T_h - 1
    if not track.hist_valid[t]:
        raise TensorizationError(f"focal track {track.track_id!r} invalid at t_now")
    yaw = _heading_from_history(track.hist, track.hist_valid, t)
    return Pose2D(track.hist[t, 0], track.hist[t, 1], yaw)


def _track_position_now(track: WindowTrack) -> np.ndarray:
    """Most recent valid history position (tracks are guaranteed >=1 valid step)."""
    last = np.flatnonzero(track.hist_valid)[-1]
    return track.hist[last, :2]


def select_context(window: ObservationWindow, focal_pose: Pose2D,
                   radius_m: float = 150.0,
                   focal_track_id: str | None = None) -> tuple[list[WindowTrack], list[LaneSegment]]:
    """Scene elements within `radius_m` of the focal agent (inclusive).

    Tracks are filtered by their most recent valid position, lanes by their
    closest centerline point. The focal track is always kept.
    """
    focal_id = focal_track_id or window.focal_track_id
    center = np.array([focal_pose.x, focal_pose.y])
    tracks = [t for t in window.tracks
              if t.track_id == focal_id
              or np.linalg.norm(_track_position_now(t) - center) <= radius_m]
    lanes = [l for l in window.lanes
             if np.min(np.linalg.norm(l.centerline - center, axis=1)) <= radius_m]
    return tracks, lanes


def build_agent_tensor(tracks: list[WindowTrack], T_h: int, focal_pose: Pose2D):
    """Per-track locally normalized history tensor plus frame poses/types/mask."""
    n = len(tracks)
    A = np.zeros((n, T_h, 5))
    poses = np.zeros((n, 3))
    types = np.zeros(n, dtype=np.int64)
    inv_focal = focal_pose.inverse()
    for i, t in enumerate(tracks):
        fv = int(np.flatnonzero(t.hist_valid)[0])
        yaw = _heading_from_history(t.hist, t.hist_valid, fv)
        frame = Pose2D(t.hist[fv, 0], t.hist[fv, 1], yaw)
        inv = frame.inverse()
        v = t.hist_valid
        A[i, v, 0:2] = inv.transform_points(t.hist[v, 0:2])
        A[i, v, 2:4] = inv.rotate_vectors(t.hist[v, 2:4])
        A[i, v, 4] = 1.0
        rel = inv_focal.compose(frame)
        poses[i] = (rel.x, rel.y, rel.yaw)
        types[i] = AGENT_TYPES.index(t.agent_type)
    return A, poses, types, np.ones(n, dtype=bool)


def resample_polyline(line: np.ndarray, n_points: int) -> np.ndarray:
    """Resample to `n_points` positions uniformly spaced in arc length along
    the original polyline (endpoints preserved)."""
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])
    total = cum[-1]
    if total <= 0.0:
        raise TensorizationError("zero-length centerline")
    s = np.linspace(0.0, total, n_points)
    return np.stack([np.interp(s, cum, line[:, 0]), np.interp(s, cum, line[:, 1])], axis=1)


def _midpoint_frame(line: np.ndarray) -> Pose2D:
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])
    s_mid = cum[-1] / 2.0
    seg = int(np.clip(np.searchsorted(cum, s_mid, side="right") - 1, 0, len(line) - 2))
    d = line[seg + 1] - line[seg]
    mid = np.array([np.interp(s_mid, cum, line[:, 0]), np.interp(s_mid, cum, line[:, 1])])
    return Pose2D(mid[0], mid[1], math.atan2(d[1], d[0]))


def build_lane_tensor(lanes: list[LaneSegment], P_l: int, focal_pose: Pose2D,
                      radius_m: float = 150.0):
    """Arc-length resampled, midpoint-normalized lane tensor.

    Resampled points farther than `radius_m` from the focal agent are flagged
    invalid and zeroed; zero-length centerlines are dropped (count returned).
    """
    center = np.array([focal_pose.x, focal_pose.y])
    inv_focal = focal_pose.inverse()
    rows, poses, types, kept_ids = [], [], [], []
    dropped = 0
    for lane in lanes:
        try:
            pts = resample_polyline(lane.centerline, P_l)
        except TensorizationError:
            dropped += 1
            continue
        valid = np.linalg.norm(pts - center, axis=1) <= radius_m
        if not valid.any():
            dropped += 1
            continue
        frame = _midpoint_frame(pts)
        local = frame.inverse().transform_points(pts)
        row = np.zeros((P_l, 3))
        row[valid, 0:2] = local[valid]
        row[valid, 2] = 1.0
        rows.append(row)
        rel = inv_focal.compose(frame)
        poses.append((rel.x, rel.y, rel.yaw))
        types.append(LANE_TYPES.index(lane.lane_type))
        kept_ids.append(lane.lane_id)
    n = len(rows)
    L = np.stack(rows) if n else np.zeros((0, P_l, 3))
    lane_poses = np.asarray(poses) if n else np.zeros((0, 3))
    return L, lane_poses, np.asarray(types, dtype=np.int64), np.ones(n, dtype=bool), kept_ids, dropped


def tensorize(window: ObservationWindow, P_l: int = 20, radius_m: float = 150.0,
              focal_track_id: str | None = None) -> TensorBundle:
    """Full pipeline: focal frame, context selection, agent + lane tensors."""
    focal_id = focal_track_id or window.focal_track_id
    pose = focal_frame(window, focal_id)
    tracks, lanes = select_context(window, pose, radius_m, focal_id)
    A, agent_poses, agent_types, agent_mask = build_agent_tensor(tracks, window.T_h, pose)
    L, lane_poses, lane_types, lane_mask, lane_ids, _ = build_lane_tensor(lanes, P_l, pose, radius_m)
    track_ids = [t.track_id for t in tracks]
    return TensorBundle(
        A=A, L=L, agent_poses=agent_poses, lane_poses=lane_poses,
        agent_types=agent_types, lane_types=lane_types,
        agent_mask=agent_mask, lane_mask=lane_mask,
        focal_index=track_ids.index(focal_id), focal_pose=pose,
        track_ids=track_ids, lane_ids=lane_ids,
    )


def build_gt_tensor(window: ObservationWindow, track_ids: list[str], focal_pose: Pose2D):
    """Focal-frame future ground truth aligned with a bundle's track order.

    Returns gt [N_a, T_f + T_a, 2] and mask [N_a, T_f + T_a].
    """
    horizon = window.T_f + window.T_a
    inv = focal_pose.inverse()
    gt = np.zeros((len(track_ids), horizon, 2))
    mask = np.zeros((len(track_ids), horizon), dtype=bool)
    for i, tid in enumerate(track_ids):
        t = window.track(tid)
        v = t.fut_valid
        gt[i, v] = inv.transform_points(t.fut[v])
        mask[i] = v
    return gt, mask


# ---------------------------------------------------------------------------
# Rigid-transform application (equivariance plumbing)

def apply_se2_scenario(scenario: Scenario, g: Pose2D) -> Scenario:
    tracks = []
    for t in scenario.tracks:
        v = t.valid
        xy = np.zeros((len(t.step), 2))
        vel = np.zeros((len(t.step), 2))
        xy[v] = g.transform_points(np.stack([t.x[v], t.y[v]], axis=1))
        vel[v] = g.rotate_vectors(np.stack([t.vx[v], t.vy[v]], axis=1))
        tracks.append(replace(t, x=xy[:, 0], y=xy[:, 1], vx=vel[:, 0], vy=vel[:, 1]))
    lanes = [replace(l, centerline=g.transform_points(l.centerline)) for l in scenario.lanes]
    return replace(scenario, tracks=tracks, lanes=lanes)


def apply_se2_bundle(bundle: TensorBundle, g: Pose2D) -> TensorBundle:
    """Rigid transform of a bundle's global-frame quantities. Local-frame
    tensors and focal-frame poses are untouched by construction."""
    return replace(bundle, focal_pose=g.compose(bundle.focal_pose))


def apply_se2_points(points: np.ndarray, g: Pose2D) -> np.ndarray:
    return g.transform_points(points)


def local_to_global(points: np.ndarray, focal_pose: Pose2D) -> np.ndarray:
    """Map focal-frame trajectory points [..., 2] to the global frame."""
    return focal_pose.transform_points(points)


def global_to_local(points: np.ndarray, focal_pose: Pose2D) -> np.ndarray:
    return focal_pose.inverse().transform_points(points)


def relative_pose_array(frame: Pose2D, poses: np.ndarray) -> np.ndarray:
    """Express [N, 3] poses (given in `frame`'s parent) relative to `frame`."""
    inv = frame.inverse()
    out = np.empty_like(np.asarray(poses, dtype=float))
    c, s = math.cos(inv.yaw), math.sin(inv.yaw)
    out[:, 0] = inv.x + c * poses[:, 0] - s * poses[:, 1]
    out[:, 1] = inv.y + s * poses[:, 0] + c * poses[:, 1]
    out[:, 2] = wrap_angle(inv.yaw + poses[:, 2])
    return out
