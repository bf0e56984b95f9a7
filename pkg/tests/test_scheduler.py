import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from bspsearch.search.scheduler import (
    W1,
    W2,
    W3,
    SchedulerState,
    SimulatedPipeline,
    TickRecord,
    forecast,
    fuzz_ticks,
    move_i_to_r,
    region,
    schedule_tick,
    write_tick_log,
)


def test_initial_lanes():
    s = SchedulerState.initial(6)
    assert (s.lanes_r, s.lanes_i, s.lanes_k, s.pool_size) == (2, 4, 2, 8)
    s = SchedulerState.initial(1)
    assert (s.lanes_r, s.lanes_i) == (1, 1)
    s.check()


def test_regions():
    assert [region(q) for q in (0, 4, 5, 14, 15, 20)] == [W1, W1, W2, W2, W3, W3]


def test_slow_loader_moves_lane_to_r():
    s = SchedulerState.initial(6, t_min=0.1, t_max=4.0)
    s.t_cum, s.t_fct = 3.0, 2.0
    assert move_i_to_r(s, 0.2, W2)
    s = SchedulerState.initial(6, t_min=0.1, t_max=4.0, t_cum=4.8, level=0.2)
    d = schedule_tick(s, W2, False, False, 0.2)
    assert d.action == "I->R" and d.c_ir
    assert (s.lanes_r, s.lanes_i) == (3, 3)
    assert s.t_cum == 0.0


def test_short_wait_does_not_trigger():
    s = SchedulerState.initial(6, t_min=0.1, t_max=4.0)
    s.t_cum, s.t_fct = 10.0, 10.0
    assert not move_i_to_r(s, 0.05, W2)


def test_full_queue_moves_lane_back_to_i():
    s = SchedulerState.initial(6)
    d = schedule_tick(s, W3, False, False, 0.0)
    assert d.action == "R->I"
    assert (s.lanes_r, s.lanes_i) == (1, 5)
    d = schedule_tick(s, W3, False, False, 0.0)
    assert d.action == ""  # the last loader stays


def test_quiet_w1_makes_no_move():
    s = SchedulerState.initial(6)
    d = schedule_tick(s, W1, False, False, 0.01)
    assert d.action == "" and (s.lanes_r, s.lanes_i) == (2, 4)


def test_starved_w1_recruits_loader():
    s = SchedulerState.initial(6)
    s.lanes_i += s.lanes_r
    s.lanes_r = 0
    d = schedule_tick(s, W1, False, False, 0.0)
    assert d.action == "I->R" and s.lanes_r == 1


def test_release_on_full_or_exhausted():
    for q_full, exhausted in ((True, False), (False, True)):
        s = SchedulerState.initial(6)
        d = schedule_tick(s, W3, q_full, exhausted, 0.0)
        assert d.action == "release"
        assert (s.lanes_r, s.lanes_i) == (0, 6)


def test_forecast_constant_series():
    level, trend = 3.0, 0.0
    for _ in range(10):
        level, trend, f = forecast(level, trend, 3.0, 0.4, 0.3)
    assert f == 3.0


def test_forecast_unit_smoothing_extrapolates():
    level = trend = 0.0
    for x in (1.0, 2.0, 3.0):
        level, trend, f = forecast(level, trend, x, 1.0, 1.0)
    assert f == 4.0


def test_forecast_rejects_bad_parameters():
    with pytest.raises(ValueError):
        forecast(0, 0, 1, 0.0, 0.5)
    with pytest.raises(ValueError):
        forecast(0, 0, 1, 0.5, 1.5)


@given(
    st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=50),
    st.floats(0.01, 1.0),
    st.floats(0.01, 1.0),
)
@settings(max_examples=200, deadline=None)
def test_forecast_matches_error_correction_form(xs, alpha, beta):
    level = trend = 0.0
    got = []
    for x in xs:
        level, trend, f = forecast(level, trend, x, alpha, beta)
        got.append(f)
    assert got == pytest.approx(oracles.holt(xs, alpha, beta), abs=1e-12, rel=1e-12)


def _slow_producer_run():
    state = SchedulerState.initial(6, t_min=0.05, t_max=1.0)
    return SimulatedPipeline(state, 200, lambda n: 1.0 if n >= 30 else 0.05, lambda n: 0.2).run(400)


def test_simulated_pipeline_reacts_to_slow_producer():
    records = _slow_producer_run()
    onset = next(i for i, r in enumerate(records) if r.c_ir)
    before = records[onset - 1].lanes_r
    assert any(r.lanes_r == before + 1 for r in records[onset : onset + 3])


def test_simulated_pipeline_is_deterministic():
    a = [r.tsv() for r in _slow_producer_run()]
    b = [r.tsv() for r in _slow_producer_run()]
    assert a == b


def test_simulated_pipeline_consumes_everything():
    state = SchedulerState.initial(4)
    records = SimulatedPipeline(state, 50, lambda n: 0.01, lambda n: 0.05).run()
    assert len(records) == 50
    assert all(r.lanes_r + r.lanes_i + 2 == state.pool_size for r in records)


def test_tick_log(tmp_path):
    path = tmp_path / "twait_0.tsv"
    write_tick_log(path, _slow_producer_run()[:5])
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema=TickRecord version=1"
    assert lines[1] == TickRecord.HEADER
    assert len(lines) == 7 and len(lines[2].split("\t")) == 7


@given(st.integers(0, 2**31), st.integers(1, 32))
@settings(max_examples=50, deadline=None)
def test_fuzz_preserves_lanes(seed, cores):
    state = fuzz_ticks(500, seed, cores)
    assert state.lanes_r + state.lanes_i + state.lanes_k == state.pool_size
    assert state.ticks == 500

