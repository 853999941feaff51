"""Teleoperation safety state machine.

Modes: Disabled, Engaged, Hold, Fault. The pedal engages and disengages,
tracking loss parks the session on the last command, recovery blends back
instead of snapping, and no emitted command ever steps more than
clamp * dt per joint.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .smoothing import quintic_coeffs, quintic_eval

DISABLED = "Disabled"
ENGAGED = "Engaged"
HOLD = "Hold"
FAULT = "Fault"
MODES = (DISABLED, ENGAGED, HOLD, FAULT)

PEDAL_DOWN = "PedalDown"
PEDAL_UP = "PedalUp"
TRACKING_OK = "TrackingOk"
TRACKING_LOST = "TrackingLost"
FAULT_SIGNAL = "FaultSignal"
RESET = "Reset"
EVENT_KINDS = (PEDAL_DOWN, PEDAL_UP, TRACKING_OK, TRACKING_LOST,
               FAULT_SIGNAL, RESET)


class SessionError(ValueError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    n_joints: int = 16
    hold_timeout: float = 1.0     # s in Hold before dropping to Disabled
    blend_duration: float = 0.5   # s of quintic re-engagement
    clamp: float = 2.0            # rad/s per joint
    dt: float = 0.01              # control period


@dataclass(frozen=True)
class SessionEvent:
    kind: str
    timestamp: float
    command: Optional[np.ndarray] = None  # live target for TrackingOk

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise SessionError(f"unknown event kind {self.kind!r}")
        if self.command is not None:
            object.__setattr__(self, "command",
                               np.asarray(self.command, float))


@dataclass(frozen=True)
class SessionState:
    mode: str
    held: np.ndarray              # last emitted command
    entered: float                # time the mode was entered
    blend_start: float = -np.inf  # active re-engagement window
    blend_until: float = -np.inf
    blend_from: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, cfg: SessionConfig, t0: float = 0.0) -> "SessionState":
        return cls(DISABLED, np.zeros(cfg.n_joints), t0)


def _clamp_step(prev: np.ndarray, target: np.ndarray,
                cfg: SessionConfig) -> np.ndarray:
    lim = cfg.clamp * cfg.dt
    cmd = prev + np.clip(target - prev, -lim, lim)
    # addition can round a hair past the limit; nudge offenders back
    over = np.abs(cmd - prev) > lim
    while np.any(over):
        cmd = np.where(over, np.nextafter(cmd, prev), cmd)
        over = np.abs(cmd - prev) > lim
    return cmd


def step(state: SessionState, event: SessionEvent,
         cfg: SessionConfig = SessionConfig()):
    """Advance the machine by one event. Returns (new state, emitted
    command or None when the session is not emitting)."""
    t = event.timestamp
    if t < state.entered:
        raise SessionError("event timestamps must be non-decreasing")
    mode = state.mode

    if event.kind == FAULT_SIGNAL:
        return replace(state, mode=FAULT, entered=t), None
    if mode == FAULT:
        if event.kind == RESET:
            return replace(state, mode=DISABLED, entered=t), None
        return replace(state, entered=t), None

    if mode == DISABLED:
        if event.kind == PEDAL_DOWN:
            new = SessionState(ENGAGED, state.held, t, blend_start=t,
                               blend_until=t + cfg.blend_duration,
                               blend_from=state.held.copy())
            return new, state.held.copy()
        return replace(state, entered=t), None

    if mode == ENGAGED:
        if event.kind == PEDAL_UP:
            return replace(state, mode=DISABLED, entered=t), None
        if event.kind == TRACKING_LOST:
            new = replace(state, mode=HOLD, entered=t)
            return new, state.held.copy()
        if event.kind == TRACKING_OK and event.command is not None:
            target = event.command
            if t < state.blend_until:
                # quintic re-engagement schedule toward the live command
                u = (t - state.blend_start) / (state.blend_until
                                               - state.blend_start)
                co = quintic_coeffs(state.blend_from, 0.0, 0.0,
                                    target, 0.0, 0.0, 1.0)
                target = quintic_eval(co, np.array([u]))[0]
            cmd = _clamp_step(state.held, target, cfg)
            return replace(state, held=cmd, entered=t), cmd
        return replace(state, entered=t), None

    if mode == HOLD:
        if event.kind == PEDAL_UP:
            return replace(state, mode=DISABLED, entered=t), None
        if t - state.entered > cfg.hold_timeout:
            # stale hold: drop out regardless of the event
            return replace(state, mode=DISABLED, entered=t), None
        if event.kind == TRACKING_OK:
            new = SessionState(ENGAGED, state.held, t, blend_start=t,
                               blend_until=t + cfg.blend_duration,
                               blend_from=state.held.copy())
            if event.command is not None:
                cmd = _clamp_step(state.held, state.held, cfg)
                return replace(new, held=cmd), cmd
            return new, state.held.copy()
        return replace(state, entered=state.entered), state.held.copy()

    raise SessionError(f"unknown mode {mode!r}")


def reengage_blend(held: np.ndarray, live: np.ndarray,
                   duration: float, dt: float) -> np.ndarray:
    """Quintic command schedule from the held command to the live one;
    rest-to-rest, C2, endpoints exact."""
    if duration <= 0:
        raise SessionError("blend duration must be positive")
    held = np.asarray(held, float)
    live = np.asarray(live, float)
    n = max(2, int(round(duration / dt)) + 1)
    t = np.linspace(0.0, duration, n)
    co = quintic_coeffs(held, 0.0, 0.0, live, 0.0, 0.0, duration)
    return quintic_eval(co, t)


# -------------------------------------------------------------- replay
def format_event(ev: SessionEvent) -> str:
    parts = [repr(float(ev.timestamp)), ev.kind]
    if ev.command is not None:
        parts.extend(repr(float(v)) for v in ev.command)
    return " ".join(parts)


def parse_event(line: str) -> SessionEvent:
    parts = line.split()
    if len(parts) < 2:
        raise SessionError("event line needs timestamp and kind")
    cmd = np.array([float(x) for x in parts[2:]]) if len(parts) > 2 else None
    return SessionEvent(parts[1], float(parts[0]), cmd)


def replay(events, cfg: SessionConfig = SessionConfig(),
           t0: float = 0.0):
    """Run an event log through the machine; yields one trace row per
    event: (event, mode after, emitted command or None)."""
    state = SessionState.initial(cfg, t0)
    rows = []
    for ev in events:
        state, out = step(state, ev, cfg)
        rows.append((ev, state.mode, out))
    return rows
