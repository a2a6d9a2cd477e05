import json

import numpy as np
import pytest

from trajstream.generator import GeneratorSpec, generate_synthetic
from trajstream.scenario import (ScenarioError, ScheduleError, extract_window,
                                 load_scenario, save_scenario, scenario_from_dict,
                                 scenario_to_dict, streaming_schedule)


def minimal_dict(num_steps=110, focal="a0"):
    steps = list(range(num_steps + 1))
    return {
        "id": "hand-written",
        "sample_rate_hz": 10,
        "num_steps": num_steps,
        "focal_track_id": focal,
        "scored_track_ids": ["a0"],
        "tracks": [{
            "id": "a0", "agent_type": "vehicle",
            "step": steps,
            "x": [0.1 * s for s in steps],
            "y": [0.0] * len(steps),
            "vx": [1.0] * len(steps),
            "vy": [0.0] * len(steps),
            "valid": [True] * len(steps),
        }],
        "lanes": [{
            "id": "l0", "lane_type": "standard",
            "centerline": [[-10.0, 0.0], [50.0, 0.0]],
        }],
    }


def test_load_minimal_file(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(minimal_dict()))
    sc = load_scenario(path)
    assert sc.num_steps == 110
    assert sc.scenario_id == "hand-written"
    assert len(sc.tracks) == 1 and len(sc.lanes) == 1


def test_missing_focal_track_rejected():
    d = minimal_dict(focal="ghost")
    with pytest.raises(ScenarioError, match="focal_track_id"):
        scenario_from_dict(d)


def test_unknown_key_rejected_with_name():
    d = minimal_dict()
    d["surprise"] = 1
    with pytest.raises(ScenarioError, match="surprise"):
        scenario_from_dict(d)
    d = minimal_dict()
    d["tracks"][0]["extra_field"] = []
    with pytest.raises(ScenarioError, match="extra_field"):
        scenario_from_dict(d)


def test_missing_field_named():
    d = minimal_dict()
    del d["tracks"][0]["vx"]
    with pytest.raises(ScenarioError, match="'vx'"):
        scenario_from_dict(d)


def test_invalid_states_must_be_zeroed():
    d = minimal_dict()
    d["tracks"][0]["valid"][3] = False
    with pytest.raises(ScenarioError, match="zeroed"):
        scenario_from_dict(d)


def test_roundtrip_generated_scenarios(tmp_path):
    for seed, template in enumerate(["straight", "curve", "intersection",
                                     "pedestrian_crossing", "car_following",
                                     "unprotected_turn"]):
        sc = generate_synthetic(seed, GeneratorSpec(template=template, n_agents=4))
        path = tmp_path / f"{template}.json"
        save_scenario(sc, path)
        back = load_scenario(path)
        assert scenario_to_dict(back) == scenario_to_dict(sc)


def test_schedule_av2_like():
    sc = generate_synthetic(0, GeneratorSpec(duration_steps=130))
    sc.num_steps = 130
    assert streaming_schedule(sc, "av2_like") == [30, 40, 50]


def test_schedule_custom_passthrough():
    sc = generate_synthetic(0, GeneratorSpec(duration_steps=130))
    assert streaming_schedule(sc, "custom", times=[30]) == [30]


def test_schedule_too_short_rejected():
    sc = generate_synthetic(0, GeneratorSpec(duration_steps=130))
    sc.num_steps = 40
    for t in sc.tracks:
        keep = t.step <= 40
        t.step, t.x, t.y = t.step[keep], t.x[keep], t.y[keep]
        t.vx, t.vy, t.valid = t.vx[keep], t.vy[keep], t.valid[keep]
    with pytest.raises(ScheduleError):
        streaming_schedule(sc, "av2_like")


def test_extract_window_history_range():
    sc = scenario_from_dict(minimal_dict())
    w = extract_window(sc, t_now=30, T_h=30, T_f=60, T_a=20)
    tr = w.track("a0")
    assert tr.hist.shape == (30, 4)
    # history covers steps 1..30: x stores 0.1 * step
    assert tr.hist[0, 0] == pytest.approx(0.1)
    assert tr.hist[-1, 0] == pytest.approx(3.0)
    assert tr.hist_valid.all()


def test_extract_window_padding_for_late_appearance():
    d = minimal_dict()
    steps = list(range(25, 111))
    d["tracks"].append({
        "id": "late", "agent_type": "vehicle", "step": steps,
        "x": [float(s) for s in steps], "y": [0.0] * len(steps),
        "vx": [0.0] * len(steps), "vy": [0.0] * len(steps),
        "valid": [True] * len(steps)})
    sc = scenario_from_dict(d)
    w = extract_window(sc, 30, 30, 60, 20)
    tr = w.track("late")
    assert not tr.hist_valid[:24].any()
    assert tr.hist_valid[24:].all()


def test_extract_window_future_mask_counts():
    sc = scenario_from_dict(minimal_dict(num_steps=110))
    w = extract_window(sc, t_now=50, T_h=30, T_f=60, T_a=20)
    tr = w.track("a0")
    assert tr.fut_valid.sum() == 60
    assert not tr.fut_valid[60:].any()


def test_extract_window_too_early():
    sc = scenario_from_dict(minimal_dict())
    with pytest.raises(ScheduleError):
        extract_window(sc, t_now=10, T_h=30, T_f=60, T_a=20)


def test_window_partition_contiguous():
    sc = scenario_from_dict(minimal_dict())
    t_now, T_h, T_f, T_a = 40, 30, 60, 20
    hist_steps = np.arange(t_now - T_h + 1, t_now + 1)
    fut_steps = np.arange(t_now + 1, t_now + T_f + T_a + 1)
    union = np.concatenate([hist_steps, fut_steps])
    assert len(np.intersect1d(hist_steps, fut_steps)) == 0
    assert np.array_equal(union, np.arange(union[0], union[-1] + 1))


def test_tracks_without_valid_history_dropped():
    d = minimal_dict()
    steps = list(range(80, 111))
    d["tracks"].append({
        "id": "future_only", "agent_type": "vehicle", "step": steps,
        "x": [float(s) for s in steps], "y": [0.0] * len(steps),
        "vx": [0.0] * len(steps), "vy": [0.0] * len(steps),
        "valid": [True] * len(steps)})
    sc = scenario_from_dict(d)
    w = extract_window(sc, 30, 30, 60, 20)
    assert [t.track_id for t in w.tracks] == ["a0"]
