import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from busholding.corridor import (DOWN, N_HOURS, N_STOPS, UP, ScenarioLoadError, ScenarioValidationError,
                                 Timetable, generate_synthetic_scenario, generate_timetable, hour_index,
                                 load_scenario, save_scenario, scenario_equal)


def test_timetable_examples():
    up = generate_timetable(360, 0, 46800)
    assert len(up) == 130 and up.departures[0] == 0
    down = generate_timetable(360, 180, 46800, direction=DOWN)
    assert len(down) == 130 and down.departures[0] == 180
    assert generate_timetable(360, 0, 360).departures == (0,)


@given(st.integers(1, 5000), st.data())
def test_timetable_length(interval, data):
    offset = data.draw(st.integers(0, interval - 1))
    horizon = data.draw(st.integers(offset + 1, 46800))
    tt = generate_timetable(interval, offset, horizon)
    assert len(tt) == math.ceil((horizon - offset) / interval)
    assert all(b - a == interval for a, b in zip(tt.departures, tt.departures[1:]))


@pytest.mark.parametrize("interval,offset", [(0, 0), (-360, 0), (360, 360), (360, -1)])
def test_timetable_bad_arguments(interval, offset):
    with pytest.raises(ValueError):
        generate_timetable(interval, offset)


def test_timetable_gap_mismatch_names_row():
    with pytest.raises(ScenarioValidationError, match="row 2"):
        Timetable(UP, (0, 360, 700), 360)


def test_hour_index_clamps():
    assert hour_index(0) == 0
    assert hour_index(3599.9) == 0
    assert hour_index(3600) == 1
    assert hour_index(46800 + 5000) == N_HOURS - 1


def test_synthetic_profile(scenario):
    inner = scenario.od_matrices[:, 1:-1, 1:-1].sum(axis=(1, 2))
    assert inner[3] > inner[0] and inner[3] > inner[6]
    assert set(np.argsort(inner)[-2:]) == {3, 11}
    speed = scenario.speed_means.mean(axis=0)
    assert speed[11] < speed[7]
    assert set(np.argsort(speed)[:2]) == {3, 11}


def test_synthetic_invariants(scenario):
    od = scenario.od_matrices
    assert od.shape == (13, 22, 22)
    assert np.all(od[:, [0, 21], :] == 0) and np.all(od[:, :, [0, 21]] == 0)
    assert np.all(np.einsum("hii->hi", od) == 0)
    assert len(scenario.stops) == N_STOPS
    assert scenario.stops[0].kind == "terminal_up" and scenario.stops[-1].kind == "terminal_down"
    assert np.all(scenario.segment_lengths == 800.0)


def test_scenario_is_immutable(scenario):
    with pytest.raises(ValueError):
        scenario.od_matrices[1, 1, 2] = 5.0


def test_round_trip(tmp_path, scenario):
    save_scenario(scenario, tmp_path)
    back = load_scenario(tmp_path)
    assert scenario_equal(scenario, back)
    assert back.od_matrices.shape[0] == 13


def test_same_seed_same_bytes(tmp_path):
    a = save_scenario(generate_synthetic_scenario(7), tmp_path / "a")
    b = save_scenario(generate_synthetic_scenario(7), tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_missing_file_named(tmp_path, scenario):
    save_scenario(scenario, tmp_path)
    (tmp_path / "speeds.csv").unlink()
    with pytest.raises(ScenarioLoadError, match="speeds.csv"):
        load_scenario(tmp_path)


def test_terminal_demand_rejected(tmp_path, scenario):
    save_scenario(scenario, tmp_path)
    with open(tmp_path / "od.csv", "a") as f:
        f.write("0,0,5,3.0\n")
    with pytest.raises(ScenarioValidationError, match=r"od.csv row \d+ column from"):
        load_scenario(tmp_path)


def test_timetable_gap_rejected(tmp_path, scenario):
    save_scenario(scenario, tmp_path)
    lines = (tmp_path / "timetable.csv").read_text().splitlines()
    lines[3] = "1,725"
    (tmp_path / "timetable.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ScenarioValidationError, match="gap"):
        load_scenario(tmp_path)


def test_bad_speed_rejected(tmp_path, scenario):
    save_scenario(scenario, tmp_path)
    lines = (tmp_path / "speeds.csv").read_text().splitlines()
    lines[5] = "0,3,-1"
    (tmp_path / "speeds.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ScenarioValidationError, match="speeds.csv row 6 column mean_mps"):
        load_scenario(tmp_path)


def test_invalid_scalars_rejected(scenario):
    with pytest.raises(ScenarioValidationError):
        scenario.replace(max_hold_secs=0.0)
    with pytest.raises(ScenarioValidationError):
        scenario.replace(speed_sigma=-1.0)
