import json

import pytest
from hypothesis import given, settings, strategies as st

from velocal.config import (AppConfig, CalibConfig, ConfigError, NoiseConfig, SensorRig,
                            SimulationConfig, dump_config, parse_config)


def test_defaults_round_trip():
    cfg = AppConfig()
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config("") == cfg


@settings(max_examples=50, deadline=None)
@given(knot=st.floats(1e-3, 1.0), sigma=st.floats(1e-4, 10.0), rounds=st.integers(1, 5),
       t_off=st.floats(-0.09, 0.09), seed=st.integers(0, 2**31))
def test_round_trip_property(knot, sigma, rounds, t_off, seed):
    cfg = AppConfig(
        simulation=SimulationConfig(rig=SensorRig(t_off=t_off), seed=seed),
        calibration=CalibConfig(rot_knot_spacing=knot, vel_knot_spacing=knot,
                                outer_rounds=rounds,
                                noise=NoiseConfig(sigma_gyro=sigma)))
    assert parse_config(dump_config(cfg)) == cfg


def _text_with(path, value):
    raw = json.loads(dump_config(AppConfig()))
    node = raw
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    return json.dumps(raw, indent=2, sort_keys=True)


def test_negative_rate_rejected_with_field_and_line():
    text = _text_with(["simulation", "rig", "imu_rate"], -200.0)
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == "simulation.rig.imu_rate"
    line = text.splitlines()[err.value.line - 1]
    assert '"imu_rate"' in line


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config('{"calibration": {"knot": 0.1}}')
    assert "knot" in err.value.field


def test_syntax_error_has_line():
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "calibration": {\n    "seed": 1,\n  }\n}')
    assert err.value.line == 4


def test_time_offset_bound():
    with pytest.raises(ConfigError):
        parse_config(_text_with(["simulation", "rig", "t_off"], 0.5))
