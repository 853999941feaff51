import numpy as np
import pytest

from dexhand.session import (DISABLED, ENGAGED, EVENT_KINDS, FAULT,
                             FAULT_SIGNAL, HOLD, MODES, PEDAL_DOWN, PEDAL_UP,
                             RESET, TRACKING_LOST, TRACKING_OK, SessionConfig,
                             SessionError, SessionEvent, SessionState,
                             format_event, parse_event, reengage_blend,
                             replay, step)

CFG = SessionConfig()


def ev(kind, t, cmd=None):
    return SessionEvent(kind, t, cmd)


def state_in(mode, t=0.0, held=None):
    held = np.zeros(CFG.n_joints) if held is None else np.asarray(held, float)
    s = SessionState(mode, held, t)
    if mode == ENGAGED:
        s = SessionState(mode, held, t, blend_start=t - 1.0,
                         blend_until=t - 0.5, blend_from=held.copy())
    return s


# documented transition table: (mode, event) -> mode after; commands aside.
# TrackingOk rows assume a live command and a lapsed blend window; the Hold
# row assumes the hold has not timed out yet.
TABLE = {
    (DISABLED, PEDAL_DOWN): ENGAGED,
    (DISABLED, PEDAL_UP): DISABLED,
    (DISABLED, TRACKING_OK): DISABLED,
    (DISABLED, TRACKING_LOST): DISABLED,
    (DISABLED, FAULT_SIGNAL): FAULT,
    (DISABLED, RESET): DISABLED,
    (ENGAGED, PEDAL_DOWN): ENGAGED,
    (ENGAGED, PEDAL_UP): DISABLED,
    (ENGAGED, TRACKING_OK): ENGAGED,
    (ENGAGED, TRACKING_LOST): HOLD,
    (ENGAGED, FAULT_SIGNAL): FAULT,
    (ENGAGED, RESET): ENGAGED,
    (HOLD, PEDAL_DOWN): HOLD,
    (HOLD, PEDAL_UP): DISABLED,
    (HOLD, TRACKING_OK): ENGAGED,
    (HOLD, TRACKING_LOST): HOLD,
    (HOLD, FAULT_SIGNAL): FAULT,
    (HOLD, RESET): HOLD,
    (FAULT, PEDAL_DOWN): FAULT,
    (FAULT, PEDAL_UP): FAULT,
    (FAULT, TRACKING_OK): FAULT,
    (FAULT, TRACKING_LOST): FAULT,
    (FAULT, FAULT_SIGNAL): FAULT,
    (FAULT, RESET): DISABLED,
}


def test_exhaustive_transition_table():
    for mode in MODES:
        for kind in EVENT_KINDS:
            s = state_in(mode, t=10.0)
            cmd = np.full(CFG.n_joints, 0.001) if kind == TRACKING_OK else None
            new, _ = step(s, ev(kind, 10.1, cmd), CFG)
            assert new.mode == TABLE[(mode, kind)], (mode, kind, new.mode)


def test_every_emitted_step_within_clamp():
    s = state_in(ENGAGED, t=0.0)
    prev = s.held.copy()
    target = np.full(CFG.n_joints, 5.0)
    new, out = step(s, ev(TRACKING_OK, 0.01, target), CFG)
    assert out is not None
    assert np.max(np.abs(out - prev)) <= CFG.clamp * CFG.dt


def test_hold_short_dropout_resumes_within_clamp():
    # engage, track, lose tracking for 0.2 s, recover: the first command
    # after recovery may move at most clamp * dt from the held value
    s = SessionState.initial(CFG)
    s, _ = step(s, ev(PEDAL_DOWN, 0.0), CFG)
    held = None
    for k in range(1, 80):
        s, out = step(s, ev(TRACKING_OK, k * 0.01, np.full(16, 0.8)), CFG)
        held = out
    s, out = step(s, ev(TRACKING_LOST, 0.80), CFG)
    assert s.mode == HOLD
    assert np.array_equal(out, held)
    s, out = step(s, ev(TRACKING_OK, 1.00, np.full(16, 0.8)), CFG)
    assert s.mode == ENGAGED
    assert np.max(np.abs(out - held)) <= CFG.clamp * CFG.dt + 1e-15
    # the recovery blends rather than snapping: next commands creep
    s2, out2 = step(s, ev(TRACKING_OK, 1.01, np.full(16, 0.8)), CFG)
    assert np.max(np.abs(out2 - out)) <= CFG.clamp * CFG.dt


def test_hold_timeout_drops_to_disabled():
    s = SessionState.initial(CFG)
    s, _ = step(s, ev(PEDAL_DOWN, 0.0), CFG)
    s, _ = step(s, ev(TRACKING_OK, 0.01, np.full(16, 0.01)), CFG)
    s, _ = step(s, ev(TRACKING_LOST, 0.02), CFG)
    assert s.mode == HOLD
    s, out = step(s, ev(TRACKING_OK, 1.6, np.full(16, 0.01)), CFG)
    assert s.mode == DISABLED
    assert out is None


def test_fault_is_absorbing_until_reset():
    s = state_in(ENGAGED, t=0.0)
    s, out = step(s, ev(FAULT_SIGNAL, 0.1), CFG)
    assert s.mode == FAULT and out is None
    for kind in (PEDAL_DOWN, PEDAL_UP, TRACKING_OK, TRACKING_LOST):
        cmd = np.zeros(16) if kind == TRACKING_OK else None
        s, out = step(s, ev(kind, 0.2, cmd), CFG)
        assert s.mode == FAULT and out is None
    s, out = step(s, ev(RESET, 0.3), CFG)
    assert s.mode == DISABLED and out is None


def test_non_decreasing_timestamps_enforced():
    s = state_in(ENGAGED, t=5.0)
    with pytest.raises(SessionError):
        step(s, ev(PEDAL_UP, 4.0), CFG)


def test_fuzz_clamp_never_violated():
    rng = np.random.default_rng(0)
    cfg = SessionConfig(n_joints=4)
    s = SessionState.initial(cfg)
    t = 0.0
    prev = s.held.copy()
    lim = cfg.clamp * cfg.dt
    kinds = list(EVENT_KINDS)
    for _ in range(100_000):
        t += cfg.dt
        kind = kinds[rng.integers(len(kinds))]
        cmd = rng.uniform(-3, 3, 4) if kind == TRACKING_OK else None
        s, out = step(s, SessionEvent(kind, t, cmd), cfg)
        if out is not None:
            assert np.max(np.abs(out - prev)) <= lim
            prev = out.copy()


def test_reengage_blend_endpoints_and_peak():
    held = np.zeros(3)
    live = np.full(3, 0.12)
    dt = 0.01
    T = 0.5
    sched = reengage_blend(held, live, T, dt)
    assert np.max(np.abs(sched[0] - held)) < 1e-12
    assert np.max(np.abs(sched[-1] - live)) < 1e-12
    # rest-to-rest quintic: peak velocity 15 * delta / (8 * T)
    vel = np.abs(np.diff(sched, axis=0)).max() / dt
    want = 15 * 0.12 / (8 * T)
    assert abs(vel - want) < 0.01 * want
    # monotone approach for a monotone target
    assert np.all(np.diff(sched[:, 0]) >= -1e-12)


def test_reengage_blend_constant_is_flat():
    sched = reengage_blend(np.full(5, 0.3), np.full(5, 0.3), 0.5, 0.01)
    assert np.max(np.abs(sched - 0.3)) < 1e-12


def test_event_wire_round_trip():
    e1 = SessionEvent(TRACKING_OK, 1.25, np.array([0.1, -0.2]))
    back = parse_event(format_event(e1))
    assert back.kind == e1.kind and back.timestamp == e1.timestamp
    assert np.array_equal(back.command, e1.command)
    e2 = SessionEvent(PEDAL_UP, 2.0)
    back2 = parse_event(format_event(e2))
    assert back2.command is None


def test_replay_trace():
    events = [ev(PEDAL_DOWN, 0.0),
              ev(TRACKING_OK, 0.01, np.full(16, 0.005)),
              ev(TRACKING_LOST, 0.02),
              ev(PEDAL_UP, 0.03)]
    rows = replay(events, CFG)
    assert [m for _, m, _ in rows] == [ENGAGED, ENGAGED, HOLD, DISABLED]
    assert rows[3][2] is None


def test_unknown_event_kind_rejected():
    with pytest.raises(SessionError):
        SessionEvent("Jump", 0.0)
