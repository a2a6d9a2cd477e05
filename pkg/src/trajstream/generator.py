"""Synthetic scenario generation.

Deterministic, seed-driven stand-in for real driving logs: agents follow lane
centerlines with bounded lateral noise, velocities are forward differences of
positions (so stored kinematics are consistent by construction), and three
scripted interaction templates (car following, unprotected turn, pedestrian
crossing) place an interaction partner near the focal agent's future path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import SAMPLE_RATE_HZ, AgentTrack, LaneSegment, Scenario

TEMPLATES = ("straight", "curve", "intersection",
             "car_following", "unprotected_turn", "pedestrian_crossing")

# av2-like protocol needs T_h + two 1 s gaps + T_f + T_a steps of data
STREAM_HORIZON_STEPS = 30 + 20 + 60 + 20


class GeneratorConfigError(ValueError):
    pass


@dataclass
class GeneratorSpec:
    template: str = "straight"
    n_agents: int = 4
    duration_steps: int = 130
    noise_std_m: float = 0.15

    def validate(self) -> None:
        if self.template not in TEMPLATES:
            raise GeneratorConfigError(f"unknown template {self.template!r}")
        if self.duration_steps < STREAM_HORIZON_STEPS:
            raise GeneratorConfigError(
                f"duration_steps={self.duration_steps} shorter than the "
                f"streaming horizon ({STREAM_HORIZON_STEPS} steps)")
        if self.n_agents < 1:
            raise GeneratorConfigError("n_agents must be >= 1")


# ---------------------------------------------------------------------------
# Polyline helpers

def _arclengths(line: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])


def _point_at(line: np.ndarray, cum: np.ndarray, s) -> np.ndarray:
    s = np.clip(s, 0.0, cum[-1])
    x = np.interp(s, cum, line[:, 0])
    y = np.interp(s, cum, line[:, 1])
    return np.stack([x, y], axis=-1)


def _normal_at(line: np.ndarray, cum: np.ndarray, s) -> np.ndarray:
    s = np.atleast_1d(np.clip(s, 0.0, cum[-1]))
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(line) - 2)
    d = line[seg + 1] - line[seg]
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.stack([-d[:, 1], d[:, 0]], axis=-1)


def _arc(center, radius, a0, a1, step_m=1.0) -> np.ndarray:
    n = max(int(abs(a1 - a0) * radius / step_m), 8)
    ang = np.linspace(a0, a1, n + 1)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def _straight(p0, p1, step_m=2.0) -> np.ndarray:
    n = max(int(np.linalg.norm(np.asarray(p1) - np.asarray(p0)) / step_m), 2)
    return np.linspace(p0, p1, n + 1)


# ---------------------------------------------------------------------------
# Lane graphs

def _lanes_straight() -> list[LaneSegment]:
    return [
        LaneSegment("lane_e", "standard", _straight((-60.0, -1.75), (260.0, -1.75))),
        LaneSegment("lane_w", "standard", _straight((260.0, 1.75), (-60.0, 1.75))),
        LaneSegment("bike_e", "bike", _straight((-60.0, -5.0), (260.0, -5.0))),
    ]


def _lanes_curve() -> list[LaneSegment]:
    r = 80.0
    return [
        LaneSegment("curve_in", "standard", _arc((0.0, r + 1.75), r + 1.75, -np.pi / 2, np.pi / 2)),
        LaneSegment("curve_out", "standard", _arc((0.0, r + 1.75), r - 1.75, np.pi / 2, -np.pi / 2)),
    ]


def _lanes_intersection() -> list[LaneSegment]:
    ext, off = 140.0, 1.75
    lanes = [
        LaneSegment("ns_in", "standard", _straight((off, -ext), (off, ext))),
        LaneSegment("sn_in", "standard", _straight((-off, ext), (-off, -ext))),
        LaneSegment("we_in", "standard", _straight((-ext, -off), (ext, -off))),
        LaneSegment("ew_in", "standard", _straight((ext, off), (-ext, off))),
        # left-turn connector: eastbound onto northbound
        LaneSegment("we_turn_n", "standard", np.concatenate([
            _straight((-ext, -off), (-8.0, -off)),
            _arc((-8.0, -off + 9.75), 9.75, -np.pi / 2, 0.0)[1:],
            _straight((off, 9.75 - off), (off, ext))[1:],
        ])),
        # right-turn connector: eastbound onto southbound
        LaneSegment("we_turn_s", "standard", np.concatenate([
            _straight((-ext, -off), (-8.0, -off)),
            _arc((-8.0, -off - 6.25), 6.25, np.pi / 2, 0.0)[1:],
            _straight((-off + 6.25, -8.0), (-off + 6.25, -ext))[1:],
        ])),
        LaneSegment("bus_e", "bus", _straight((-ext, -5.25), (ext, -5.25))),
    ]
    return lanes


_LANE_GRAPHS = {
    "straight": _lanes_straight,
    "curve": _lanes_curve,
    "intersection": _lanes_intersection,
    "car_following": _lanes_straight,
    "pedestrian_crossing": _lanes_straight,
    "unprotected_turn": _lanes_intersection,
}


# ---------------------------------------------------------------------------
# Track synthesis

def _track_from_positions(track_id: str, agent_type: str, pos: np.ndarray,
                          first_step: int = 0) -> AgentTrack:
    n = len(pos)
    vel = np.zeros((n, 2))
    if n >= 2:
        vel[:-1] = (pos[1:] - pos[:-1]) * SAMPLE_RATE_HZ
        vel[-1] = vel[-2]
    return AgentTrack(
        track_id=track_id, agent_type=agent_type,
        step=np.arange(first_step, first_step + n, dtype=np.int64),
        x=pos[:, 0].copy(), y=pos[:, 1].copy(),
        vx=vel[:, 0].copy(), vy=vel[:, 1].copy(),
        valid=np.ones(n, dtype=bool),
    )


def _lane_follower(rng: np.random.Generator, lane: LaneSegment, n_pts: int,
                   s0: float, speed: float, noise_std: float,
                   speed_profile: np.ndarray | None = None) -> np.ndarray:
    """Positions of an agent advancing along a centerline with smooth,
    bounded lateral offset noise."""
    cum = _arclengths(lane.centerline)
    dt = 1.0 / SAMPLE_RATE_HZ
    if speed_profile is None:
        wobble = 1.0 + 0.1 * np.sin(np.linspace(0, 2 * np.pi, n_pts) + rng.uniform(0, 2 * np.pi))
        speed_profile = speed * wobble
    s = s0 + np.concatenate([[0.0], np.cumsum(speed_profile[:-1] * dt)])
    lat = np.zeros(n_pts)
    for t in range(1, n_pts):
        lat[t] = 0.95 * lat[t - 1] + rng.normal(0.0, noise_std * 0.1)
    lat = np.clip(lat, -2.0 * noise_std, 2.0 * noise_std)
    pts = _point_at(lane.centerline, cum, s)
    return pts + _normal_at(lane.centerline, cum, s) * lat[:, None]


def _speed_dip(n_pts: int, base: float, dip_at: int, dip_len: int, floor: float) -> np.ndarray:
    """Speed profile easing down to `floor` around step `dip_at`."""
    prof = np.full(n_pts, base)
    t = np.arange(n_pts)
    bump = np.exp(-0.5 * ((t - dip_at) / max(dip_len, 1)) ** 2)
    return np.maximum(prof - (base - floor) * bump, floor * 0.5)


def generate_synthetic(seed: int, spec: GeneratorSpec) -> Scenario:
    """One deterministic synthetic scenario for a template and seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    lanes = _LANE_GRAPHS[spec.template]()
    n_pts = spec.duration_steps + 1
    tracks: list[AgentTrack] = []

    # Focal agent, valid over the whole timeline.
    if spec.template in ("straight", "car_following", "pedestrian_crossing"):
        focal_lane = lanes[0]
        focal_speed = rng.uniform(9.0, 13.0)
        if spec.template == "pedestrian_crossing":
            cross_x = rng.uniform(55.0, 75.0)
            reach = (cross_x - 6.0) / focal_speed * SAMPLE_RATE_HZ
            profile = _speed_dip(n_pts, focal_speed, int(reach), 12, rng.uniform(2.0, 4.0))
            pos = _lane_follower(rng, focal_lane, n_pts, 66.0 - cross_x + 6.0,
                                 focal_speed, spec.noise_std_m, profile)
        else:
            pos = _lane_follower(rng, focal_lane, n_pts, rng.uniform(5.0, 20.0),
                                 focal_speed, spec.noise_std_m)
    elif spec.template == "curve":
        focal_lane = lanes[0]
        pos = _lane_follower(rng, focal_lane, n_pts, rng.uniform(5.0, 25.0),
                             rng.uniform(8.0, 12.0), spec.noise_std_m)
    else:  # intersection / unprotected_turn
        focal_lane = next(l for l in lanes if l.lane_id == "we_turn_n")
        speed = rng.uniform(8.0, 11.0)
        s0 = rng.uniform(45.0, 70.0)
        if spec.template == "unprotected_turn":
            # slow before the turn while oncoming traffic clears
            dist_to_turn = (132.0 - s0)
            profile = _speed_dip(n_pts, speed, int(dist_to_turn / speed * SAMPLE_RATE_HZ),
                                 15, rng.uniform(2.5, 4.5))
            pos = _lane_follower(rng, focal_lane, n_pts, s0, speed, spec.noise_std_m, profile)
        else:
            pos = _lane_follower(rng, focal_lane, n_pts, s0, speed, spec.noise_std_m)
    tracks.append(_track_from_positions("focal", "vehicle", pos))

    # Template-scripted interaction partner.
    if spec.template == "pedestrian_crossing":
        walk_speed = rng.uniform(1.0, 1.6)
        start_y = -8.0 - 1.75
        t0 = np.linalg.norm(pos[0] - np.array([cross_x, start_y])) / max(walk_speed, 0.1)
        ped = np.zeros((n_pts, 2))
        wait = int(rng.uniform(5, 20))
        yy = start_y + np.concatenate([
            np.zeros(wait),
            np.cumsum(np.full(n_pts - wait, walk_speed / SAMPLE_RATE_HZ)),
        ])[:n_pts]
        ped[:, 0] = cross_x + rng.normal(0.0, 0.02, n_pts).cumsum().clip(-0.5, 0.5)
        ped[:, 1] = np.minimum(yy, 10.0)
        tracks.append(_track_from_positions("ped_0", "pedestrian", ped))
    elif spec.template == "car_following":
        lead_speed = rng.uniform(7.0, 11.0)
        profile = lead_speed * (1.0 + 0.25 * np.sin(np.linspace(0, 3 * np.pi, n_pts)))
        lead = _lane_follower(rng, lanes[0], n_pts, 25.0 + rng.uniform(10.0, 25.0),
                              lead_speed, spec.noise_std_m, profile)
        tracks.append(_track_from_positions("lead_0", "vehicle", lead))
    elif spec.template == "unprotected_turn":
        oncoming = next(l for l in lanes if l.lane_id == "ew_in")
        onc = _lane_follower(rng, oncoming, n_pts, rng.uniform(80.0, 110.0),
                             rng.uniform(9.0, 13.0), spec.noise_std_m)
        tracks.append(_track_from_positions("oncoming_0", "vehicle", onc))

    # Filler traffic on the remaining lanes; later fillers may appear mid-scenario.
    filler_lanes = [l for l in lanes if l is not focal_lane and l.lane_type == "standard"]
    i = 0
    while len(tracks) < spec.n_agents and filler_lanes:
        lane = filler_lanes[i % len(filler_lanes)]
        cum_len = _arclengths(lane.centerline)[-1]
        speed = rng.uniform(6.0, 12.0)
        s0 = rng.uniform(0.1, 0.5) * cum_len
        first = 0 if i < 2 else int(rng.integers(0, 20))
        n_here = n_pts - first
        kind = "cyclist" if rng.random() < 0.15 else "vehicle"
        p = _lane_follower(rng, lane, n_here, s0, speed, spec.noise_std_m)
        tracks.append(_track_from_positions(f"agent_{i}", kind, p, first_step=first))
        i += 1

    scored = [t.track_id for t in tracks
              if t.agent_type in ("vehicle", "cyclist") and t.step[0] == 0
              and t.step[-1] == spec.duration_steps][:4]
    scenario = Scenario(
        scenario_id=f"{spec.template}-{seed}",
        num_steps=spec.duration_steps,
        focal_track_id="focal",
        scored_track_ids=scored,
        tracks=tracks,
        lanes=lanes,
    )
    scenario.validate()
    return scenario
