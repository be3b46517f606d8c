import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from co2occ.ingest import DeviceMeta, RoomMeta, load_dataset, parse_timestamp
from co2occ.simulator import (
    PPM,
    Schedule,
    SimConfig,
    SimConfigError,
    default_config,
    default_rooms,
    exchange_rate,
    integrate,
    sample_sensors,
    school_schedule,
    simulate,
    step,
    to_dataset,
    true_readings,
    write_files,
)
from oracles import rk4_two_zone

DAY = "2021-12-13"
T8 = parse_timestamp("2021-12-13T08:00:00Z")


def _quiet(**overrides):
    """Config with all randomness switched off."""
    base = dict(sensor_noise_sd=0.0, wind_sd=0.0, outdoor_day_sd=0.0)
    base.update(overrides)
    return default_config("room1", **base)


def _mass(state, cfg):
    return cfg.lower_volume * state[0] + cfg.upper_volume * state[1]


@settings(max_examples=50)
@given(st.floats(400, 3000), st.floats(400, 3000), st.integers(0, 30),
       st.floats(0, 1), st.floats(0.2, 3.0), st.floats(300, 600))
def test_closed_room_conserves_mass(c_l, c_u, n, opening, wind, outdoor):
    cfg = _quiet(infiltration_ach=0.0)
    # outdoor value and wind are irrelevant with the window shut
    state = (c_l, c_u)
    m0 = _mass(state, cfg)
    for _ in range(40):
        state = step(state, cfg, n, 0.0, wind=wind, outdoor=outdoor)
    source = n * cfg.emission_per_person * 1e-3 * PPM
    expected = m0 + 40 * cfg.dt * source
    assert _mass(state, cfg) == pytest.approx(expected, rel=1e-12, abs=1e-9 * m0)


def test_empty_closed_room_mass_exact_per_step():
    cfg = _quiet(infiltration_ach=0.0)
    state = (900.0, 1500.0)
    for _ in range(240):
        new = step(state, cfg, 0, 0.0)
        assert abs(_mass(new, cfg) - _mass(state, cfg)) <= 1e-9 * _mass(state, cfg)
        state = new
    # zones mix toward a common value
    assert abs(state[1] - state[0]) < 600.0


@pytest.mark.parametrize("n, opening", [(0, 0.0), (12, 0.0), (25, 0.25), (18, 1.0)])
def test_euler_matches_fine_step_oracle(n, opening):
    cfg = _quiet()
    q = cfg.interzone_base + n * cfg.interzone_per_person
    lam = exchange_rate(cfg, opening)
    source = n * cfg.emission_per_person * 1e-3 * PPM
    start = (700.0, 900.0)
    ours = integrate(start, cfg, n, opening, 3600, cfg.dt)
    ref = rk4_two_zone(start, cfg.lower_volume, cfg.upper_volume, q, lam, source,
                       cfg.outdoor_co2, 3600, cfg.dt / 100)
    np.testing.assert_allclose(ours, ref, rtol=0.01)


def test_exchange_rate_values():
    cfg = _quiet()
    assert exchange_rate(cfg, 0.0) == pytest.approx(0.3 / 3600)
    assert exchange_rate(cfg, 1.0) == pytest.approx(8.3 / 3600)
    assert exchange_rate(cfg, 0.5, wind=2.0) == pytest.approx(exchange_rate(cfg, 1.0))


def _block_schedule(n=20, opening=(), days=(DAY,), start="08:00", end="09:30"):
    occ = []
    for d in days:
        occ += [(parse_timestamp(f"{d}T{start}:00Z"), n), (parse_timestamp(f"{d}T{end}:00Z"), 0)]
    return Schedule(days=list(days), occupancy=occ, opening=list(opening))


def test_equilibrium_and_closed_room_filling():
    cfg = _quiet()
    eq = (cfg.outdoor_co2, cfg.outdoor_co2)
    assert step(eq, cfg, 0, 0.0) == eq
    assert step(eq, cfg, 0, 1.0) == eq
    # the lower zone has no source, so it starts rising one step after the upper zone
    state = step(eq, cfg, 20, 0.0)
    assert state[0] == eq[0] and state[1] > eq[1]
    for _ in range(240):
        new = step(state, cfg, 20, 0.0)
        assert new[0] > state[0] and new[1] > state[1]
        assert new[1] >= new[0]
        state = new


@pytest.mark.parametrize("room_id", ["room1", "room2", "room3"])
@pytest.mark.parametrize("opening", [0.0, 0.25])
def test_vd_positive_while_occupied(room_id, opening):
    cfg = default_config(room_id, sensor_noise_sd=0.0, wind_sd=0.0, outdoor_day_sd=0.0)
    res = simulate(cfg, _block_schedule(n=25, opening=[(T8, opening)] if opening else ()))
    late = (res.occupants > 0) & (res.times >= T8 + 300)
    vd = res.truth[late, 1] - res.truth[late, 0]
    assert np.all(vd > 0)
    if opening == 0:
        # 25 occupants with windows shut: gradient well above 3x the sensor noise sd
        assert vd.min() > 3 * default_config(room_id).sensor_noise_sd


def _return_time(cfg, opening, n=25, occupied=2700, limit=12 * 3600):
    """Seconds after the class leaves until both zones are within 50 ppm of outdoor."""
    state = integrate((cfg.outdoor_co2,) * 2, cfg, n, opening, occupied, cfg.dt)
    t = 0.0
    while max(state) - cfg.outdoor_co2 > 50 and t < limit:
        state = step(state, cfg, 0, opening)
        t += cfg.dt
    return t


def test_more_ventilation_means_lower_co2_and_faster_return():
    cfg = _quiet()
    finals = [integrate((420.0, 420.0), cfg, 25, o, 2700, cfg.dt) for o in (0, 0.25, 0.5, 1)]
    for a, b in zip(finals, finals[1:]):
        assert b[0] < a[0] and b[1] < a[1]
    times = [_return_time(cfg, o) for o in (0.0, 0.1, 0.25, 0.5, 1.0)]
    assert all(b <= a for a, b in zip(times, times[1:]))
    assert times[-1] < times[0]


def test_empty_day_stays_at_outdoor():
    cfg = default_config("room2", seed=3)
    res = simulate(cfg, Schedule(days=[DAY], occupancy=[]))
    np.testing.assert_allclose(res.truth, np.column_stack([res.outdoor] * 2), atol=1e-9)
    dev = res.readings - res.outdoor[:, None, None]
    assert np.abs(dev).max() <= cfg.noise_clip + 1e-9


def test_carry_over_after_class_leaves():
    cfg = _quiet()
    res = simulate(cfg, _block_schedule(n=25))
    leave = parse_timestamp(f"{DAY}T09:30:00Z")
    i = np.searchsorted(res.times, leave)
    avg = res.truth[i: i + 121].mean(axis=1)  # next 30 min
    vd = res.truth[i: i + 121, 1] - res.truth[i: i + 121, 0]
    assert np.all(np.diff(avg) < 0)
    # the mean keeps most of its excess while the vertical gradient collapses
    excess = avg - cfg.outdoor_co2
    assert excess[-1] > 0.8 * excess[0]
    assert vd[-1] < 0.2 * vd[0]


def test_noise_statistics():
    cfg = default_config("room1")
    rng = np.random.default_rng(0)
    state = (800.0, 950.0)
    base = true_readings(state, cfg, 0.0)
    draws = sample_sensors(state, cfg, rng, size=10_000)
    assert draws.shape == (10_000, len(cfg.room.devices))
    dev = draws - base
    assert np.all(np.abs(dev.mean(axis=0)) <= 1.0)
    assert np.all(np.abs(dev) <= 30.0)
    assert dev.std() == pytest.approx(10.0, rel=0.05)


def test_near_window_blend():
    room = RoomMeta("r", 8.0, 7.0, 3.0, (DeviceMeta("near", 0.6, 0.5),
                                         DeviceMeta("far", 0.6, 4.0),
                                         DeviceMeta("top", 2.2, 1.0)))
    cfg = SimConfig(room=room)
    state = (1000.0, 1400.0)
    np.testing.assert_allclose(true_readings(state, cfg, 0.0), [1000, 1000, 1400])
    closed_blend = 1000 + 0.3 * (420 - 1000)
    np.testing.assert_allclose(true_readings(state, cfg, 0.5),
                               [closed_blend, 1000, 1400 + 0.3 * (420 - 1400)])
    np.testing.assert_allclose(true_readings(state, cfg, 0.5, outdoor=500.0)[0],
                               1000 + 0.3 * (500 - 1000))


def test_disturbances():
    cfg = default_config("room1", seed=1)
    sched = _block_schedule(days=("2021-12-13", "2021-12-14"),
                            opening=[(parse_timestamp("2021-12-13T08:10:00Z"), 1.0),
                                     (parse_timestamp("2021-12-13T09:30:00Z"), 0.0)])
    res = simulate(cfg, sched)
    per_day = res.times.size // 2
    assert np.unique(res.outdoor[:per_day]).size == 1
    assert res.outdoor[0] != res.outdoor[-1]
    # outdoor and wind draws come from their own stream: noise level does not move the truth
    quiet = simulate(default_config("room1", seed=1, sensor_noise_sd=0.0), sched)
    np.testing.assert_array_equal(quiet.truth, res.truth)
    still = simulate(default_config("room1", seed=1, wind_sd=0.0, outdoor_day_sd=0.0), sched)
    assert np.all(still.outdoor == cfg.outdoor_co2)
    assert not np.array_equal(still.truth, res.truth)


def test_simulation_deterministic(tmp_path):
    cfg, sched = default_rooms(seed=7, days=["2021-12-14", "2022-06-14"])[2]
    a, b = simulate(cfg, sched), simulate(cfg, sched)
    assert a.readings.tobytes() == b.readings.tobytes()
    pa = write_files(a, tmp_path / "a")
    pb = write_files(b, tmp_path / "b")
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()
    c = simulate(default_config(cfg.room.room_id, seed=cfg.seed + 1), sched)
    assert c.readings.tobytes() != a.readings.tobytes()


def test_files_roundtrip_through_loader(tmp_path):
    cfg, sched = default_rooms(seed=3, days=["2021-12-15"])[0]
    res = simulate(cfg, sched)
    write_files(res, tmp_path)
    loaded = load_dataset(tmp_path, interval=300)
    mem = to_dataset(res, 300)
    np.testing.assert_array_equal(loaded.grid, mem.grid)
    np.testing.assert_array_equal(loaded.labels, mem.labels)
    np.testing.assert_array_equal(loaded.ventilation, mem.ventilation)
    for k in mem.series:
        np.testing.assert_allclose(loaded.series[k], mem.series[k], rtol=0, atol=1e-9)
    room = json.loads((tmp_path / "room.json").read_text())
    assert room["room_id"] == "room1"


@pytest.mark.parametrize("override, field", [
    ({"dt": 30.0}, "dt"),
    ({"dt": -1.0}, "dt"),
    ({"split_height": 9.0}, "split_height"),
    ({"sample_interval": 20}, "sample_interval"),
    ({"infiltration_ach": -0.1}, "infiltration_ach"),
    ({"wind_sd": math.nan}, "wind_sd"),
    ({"near_window_blend": 1.5}, "near_window_blend"),
])
def test_config_errors_name_the_field(override, field):
    with pytest.raises(SimConfigError) as err:
        default_config("room1", **override)
    assert err.value.field == field
    assert field in str(err.value)


def test_config_from_dict_errors():
    d = default_config("room1").to_dict()
    assert SimConfig.from_dict(json.loads(json.dumps(d))) == default_config("room1")
    bad = dict(d, room=dict(d["room"], length_m=-2))
    with pytest.raises(SimConfigError, match="room"):
        SimConfig.from_dict(bad)
    with pytest.raises(SimConfigError, match="colour"):
        SimConfig.from_dict(dict(d, colour=1))


def test_schedule_rejects_window_change_in_empty_room():
    with pytest.raises(SimConfigError, match="unoccupied"):
        _block_schedule(opening=[(parse_timestamp(f"{DAY}T10:00:00Z"), 1.0)])
    with pytest.raises(SimConfigError, match="outside"):
        _block_schedule(opening=[(T8 + 60, 1.5)])
    with pytest.raises(SimConfigError, match="negative"):
        Schedule(days=[DAY], occupancy=[(T8, -1)])
    # closing at the moment the class leaves is allowed
    s = _block_schedule(opening=[(T8 + 60, 1.0), (parse_timestamp(f"{DAY}T09:30:00Z"), 0.0)])
    assert s.opening_at(T8 + 120) == 1.0
    assert Schedule.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


@pytest.mark.parametrize("seed", range(5))
def test_school_schedule_is_valid_and_seasonal(seed):
    days = ["2021-12-13", "2022-06-13", "2022-06-14"]
    s = school_schedule(days, seed=seed)
    assert s.seasons == ["winter", "summer", "summer"]
    assert all(0 <= o <= 1 for _, o in s.opening)
    assert school_schedule(days, seed=seed).to_dict() == s.to_dict()
