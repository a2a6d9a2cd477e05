"""Global-frame scenario data model, JSON file format and window extraction.

A scenario's timeline covers integer step indices 0..num_steps inclusive at a
fixed 10 Hz, so `num_steps` is the index of the last step (a 110-step scenario
spans 11.0 s and holds up to 111 samples per track). Tracks may cover any
subset of steps; missing or invalid steps carry zeroed kinematics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE_HZ = 10

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist", "other")
LANE_TYPES = ("standard", "bike", "bus")


class ScenarioError(ValueError):
    """Schema or invariant violation in scenario data."""


class ScheduleError(ValueError):
    """Streaming schedule incompatible with the scenario."""


@dataclass
class AgentTrack:
    track_id: str
    agent_type: str
    step: np.ndarray      # [S] int, strictly increasing
    x: np.ndarray         # [S] m
    y: np.ndarray         # [S] m
    vx: np.ndarray        # [S] m/s
    vy: np.ndarray        # [S] m/s
    valid: np.ndarray     # [S] bool

    def validate(self) -> None:
        if self.agent_type not in AGENT_TYPES:
            raise ScenarioError(f"track {self.track_id}: unknown agent_type {self.agent_type!r}")
        n = len(self.step)
        for name in ("x", "y", "vx", "vy", "valid"):
            if len(getattr(self, name)) != n:
                raise ScenarioError(f"track {self.track_id}: field '{name}' length mismatch")
        if n and np.any(np.diff(self.step) <= 0):
            raise ScenarioError(f"track {self.track_id}: field 'step' not strictly increasing")
        if not np.all(np.isfinite(np.stack([self.x, self.y, self.vx, self.vy]))):
            raise ScenarioError(f"track {self.track_id}: non-finite state values")
        bad = ~self.valid
        if np.any(self.x[bad] != 0) or np.any(self.y[bad] != 0) or np.any(self.vx[bad] != 0) or np.any(self.vy[bad] != 0):
            raise ScenarioError(f"track {self.track_id}: invalid states must carry zeroed kinematics")

    def state_at(self, step: int):
        """(x, y, vx, vy, valid) at a step; zeros/False when absent."""
        i = np.searchsorted(self.step, step)
        if i < len(self.step) and self.step[i] == step:
            return (self.x[i], self.y[i], self.vx[i], self.vy[i], bool(self.valid[i]))
        return (0.0, 0.0, 0.0, 0.0, False)


@dataclass
class LaneSegment:
    lane_id: str
    lane_type: str
    centerline: np.ndarray  # [P, 2] m, >= 2 points

    def validate(self) -> None:
        if self.lane_type not in LANE_TYPES:
            raise ScenarioError(f"lane {self.lane_id}: unknown lane_type {self.lane_type!r}")
        cl = self.centerline
        if cl.ndim != 2 or cl.shape[1] != 2 or cl.shape[0] < 2:
            raise ScenarioError(f"lane {self.lane_id}: field 'centerline' must be [P>=2, 2]")
        if not np.all(np.isfinite(cl)):
            raise ScenarioError(f"lane {self.lane_id}: non-finite centerline point")
        if np.any(np.all(np.diff(cl, axis=0) == 0, axis=1)):
            raise ScenarioError(f"lane {self.lane_id}: consecutive identical centerline points")


@dataclass
class Scenario:
    scenario_id: str
    num_steps: int
    focal_track_id: str
    scored_track_ids: list[str]
    tracks: list[AgentTrack]
    lanes: list[LaneSegment]
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def validate(self) -> None:
        track_ids = [t.track_id for t in self.tracks]
        if len(set(track_ids)) != len(track_ids):
            raise ScenarioError("field 'tracks': duplicate track ids")
        if self.focal_track_id not in track_ids:
            raise ScenarioError(f"field 'focal_track_id': {self.focal_track_id!r} not among tracks")
        missing = set(self.scored_track_ids) - set(track_ids)
        if missing:
            raise ScenarioError(f"field 'scored_track_ids': unknown ids {sorted(missing)}")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise ScenarioError(f"field 'sample_rate_hz': must be {SAMPLE_RATE_HZ}")
        if self.num_steps < 1:
            raise ScenarioError("field 'num_steps': must be >= 1")
        for t in self.tracks:
            t.validate()
            if len(t.step) and (t.step[0] < 0 or t.step[-1] > self.num_steps):
                raise ScenarioError(f"track {t.track_id}: step indices outside [0, num_steps]")
        lane_ids = [l.lane_id for l in self.lanes]
        if len(set(lane_ids)) != len(lane_ids):
            raise ScenarioError("field 'lanes': duplicate lane ids")
        for l in self.lanes:
            l.validate()

    def track(self, track_id: str) -> AgentTrack:
        for t in self.tracks:
            if t.track_id == track_id:
                return t
        raise KeyError(track_id)


# ---------------------------------------------------------------------------
# File format

_SCENARIO_KEYS = {"id", "sample_rate_hz", "num_steps", "focal_track_id",
                  "scored_track_ids", "tracks", "lanes"}
_TRACK_KEYS = {"id", "agent_type", "step", "x", "y", "vx", "vy", "valid"}
_LANE_KEYS = {"id", "lane_type", "centerline"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {sorted(unknown)}")


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "id": s.scenario_id,
        "sample_rate_hz": s.sample_rate_hz,
        "num_steps": s.num_steps,
        "focal_track_id": s.focal_track_id,
        "scored_track_ids": list(s.scored_track_ids),
        "tracks": [
            {
                "id": t.track_id,
                "agent_type": t.agent_type,
                "step": [int(v) for v in t.step],
                "x": [float(v) for v in t.x],
                "y": [float(v) for v in t.y],
                "vx": [float(v) for v in t.vx],
                "vy": [float(v) for v in t.vy],
                "valid": [bool(v) for v in t.valid],
            }
            for t in s.tracks
        ],
        "lanes": [
            {
                "id": l.lane_id,
                "lane_type": l.lane_type,
                "centerline": [[float(p[0]), float(p[1])] for p in l.centerline],
            }
            for l in s.lanes
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise ScenarioError("scenario file must hold a JSON object")
    _reject_unknown(d, _SCENARIO_KEYS, "scenario")
    for key in _SCENARIO_KEYS:
        if key not in d:
            raise ScenarioError(f"field '{key}': missing")
    tracks = []
    for td in d["tracks"]:
        _reject_unknown(td, _TRACK_KEYS, f"track {td.get('id', '?')}")
        for key in _TRACK_KEYS:
            if key not in td:
                raise ScenarioError(f"track {td.get('id', '?')}: field '{key}' missing")
        tracks.append(AgentTrack(
            track_id=str(td["id"]),
            agent_type=str(td["agent_type"]),
            step=np.asarray(td["step"], dtype=np.int64),
            x=np.asarray(td["x"], dtype=float),
            y=np.asarray(td["y"], dtype=float),
            vx=np.asarray(td["vx"], dtype=float),
            vy=np.asarray(td["vy"], dtype=float),
            valid=np.asarray(td["valid"], dtype=bool),
        ))
    lanes = []
    for ld in d["lanes"]:
        _reject_unknown(ld, _LANE_KEYS, f"lane {ld.get('id', '?')}")
        for key in _LANE_KEYS:
            if key not in ld:
                raise ScenarioError(f"lane {ld.get('id', '?')}: field '{key}' missing")
        lanes.append(LaneSegment(
            lane_id=str(ld["id"]),
            lane_type=str(ld["lane_type"]),
            centerline=np.asarray(ld["centerline"], dtype=float),
        ))
    s = Scenario(
        scenario_id=str(d["id"]),
        num_steps=int(d["num_steps"]),
        focal_track_id=str(d["focal_track_id"]),
        scored_track_ids=[str(v) for v in d["scored_track_ids"]],
        tracks=tracks,
        lanes=lanes,
        sample_rate_hz=int(d["sample_rate_hz"]),
    )
    s.validate()
    return s


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=1) + "\n", encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: not valid JSON ({e})") from e
    return scenario_from_dict(d)


def list_dataset(directory: str | Path) -> list[Path]:
    """Scenario paths listed by the dataset index file."""
    directory = Path(directory)
    index = directory / "index.json"
    if not index.exists():
        raise FileNotFoundError(f"{directory}: no index.json (not a dataset directory)")
    names = json.loads(index.read_text(encoding="utf-8"))["scenarios"]
    return [directory / n for n in names]


# ---------------------------------------------------------------------------
# Streaming schedule and window extraction

AV2_LIKE_STEPS = (30, 40, 50)


def streaming_schedule(scenario: Scenario, protocol: str = "av2_like",
                       times: list[int] | None = None,
                       T_h: int = 30, T_f: int = 60) -> list[int]:
    """Prediction step indices for a scenario under a streaming protocol.

    `av2_like` predicts at 3, 4 and 5 s (steps 30/40/50 at 10 Hz). Every
    window needs T_h history steps and a T_f-step future inside the scenario.
    """
    if protocol == "av2_like":
        steps = list(AV2_LIKE_STEPS)
    elif protocol == "custom":
        if not times:
            raise ScheduleError("custom protocol requires a non-empty step list")
        steps = [int(t) for t in times]
    else:
        raise ScheduleError(f"unknown protocol {protocol!r}")
    focal = scenario.track(scenario.focal_track_id)
    for t in steps:
        if t < T_h - 1:
            raise ScheduleError(f"window at step {t} lacks {T_h} history steps")
        if t + T_f > scenario.num_steps:
            raise ScheduleError(
                f"window at step {t} needs future through step {t + T_f}, "
                f"scenario ends at {scenario.num_steps}")
        if not focal.state_at(t)[4]:
            raise ScheduleError(f"focal track invalid at scheduled step {t}")
    return steps


@dataclass
class WindowTrack:
    track_id: str
    agent_type: str
    hist: np.ndarray        # [T_h, 4] (x, y, vx, vy), zeroed where invalid
    hist_valid: np.ndarray  # [T_h] bool
    fut: np.ndarray         # [T_f + T_a, 2] (x, y), zeroed where invalid
    fut_valid: np.ndarray   # [T_f + T_a] bool


@dataclass
class ObservationWindow:
    t_now: int
    T_h: int
    T_f: int
    T_a: int
    focal_track_id: str
    scored_track_ids: list[str]
    tracks: list[WindowTrack] = field(default_factory=list)
    lanes: list[LaneSegment] = field(default_factory=list)

    def track(self, track_id: str) -> WindowTrack:
        for t in self.tracks:
            if t.track_id == track_id:
                return t
        raise KeyError(track_id)


def _slice_track(track: AgentTrack, steps: np.ndarray, n_cols: int) -> tuple[np.ndarray, np.ndarray]:
    data = np.zeros((len(steps), n_cols))
    valid = np.zeros(len(steps), dtype=bool)
    idx = np.searchsorted(track.step, steps)
    for j, (i, step) in enumerate(zip(idx, steps)):
        if i < len(track.step) and track.step[i] == step and track.valid[i]:
            row = (track.x[i], track.y[i], track.vx[i], track.vy[i])[:n_cols]
            data[j] = row
            valid[j] = True
    return data, valid


def extract_window(scenario: Scenario, t_now: int, T_h: int, T_f: int, T_a: int) -> ObservationWindow:
    """Slice one sliding window: T_h history steps ending at t_now inclusive
    plus T_f + T_a future ground-truth steps, masked past the scenario end.

    Tracks without a single valid history step are dropped.
    """
    if t_now < T_h - 1:
        raise ScheduleError(f"t_now={t_now} too early for T_h={T_h}")
    hist_steps = np.arange(t_now - T_h + 1, t_now + 1)
    fut_steps = np.arange(t_now + 1, t_now + T_f + T_a + 1)
    window = ObservationWindow(
        t_now=t_now, T_h=T_h, T_f=T_f, T_a=T_a,
        focal_track_id=scenario.focal_track_id,
        scored_track_ids=list(scenario.scored_track_ids),
        lanes=list(scenario.lanes),
    )
    for track in scenario.tracks:
        hist, hist_valid = _slice_track(track, hist_steps, 4)
        if not hist_valid.any():
            continue
        fut, fut_valid = _slice_track(track, fut_steps, 2)
        window.tracks.append(WindowTrack(
            track_id=track.track_id, agent_type=track.agent_type,
            hist=hist, hist_valid=hist_valid, fut=fut, fut_valid=fut_valid,
        ))
    return window
