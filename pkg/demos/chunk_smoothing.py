"""Stitch noisy policy action chunks into one continuous command stream.

Three consecutive 25-step chunks with disagreeing boundaries are blended
and spline-smoothed; the printed table shows the boundary jumps before
and after, and the per-group kinematic diagnostics of the last chunk.
"""

import numpy as np

from dexhand.smoothing import (DEFAULT_LAYOUT, ActionChunk, SmootherState,
                               blend_boundary, enforce_limits, fit_chunk)


def main():
    rng = np.random.default_rng(0)
    k, dt = 25, 0.01
    state = SmootherState.rest(vel_limit=3.0, acc_limit=100.0)
    print("chunk  raw_jump   blended_jump   dilation")
    traj = None
    for c in range(3):
        # a noisy ramp that deliberately starts away from where the last
        # chunk ended
        target = 0.2 * rng.standard_normal(88)
        target[17:20] = 0.0
        target[23:26] = 0.0
        ramp = np.linspace(0.0, 1.0, k)[:, None] * target
        ramp += 0.35 * state.value + 0.003 * rng.standard_normal((k, 88))
        ramp[:, 17:20] = 0.0
        ramp[:, 23:26] = 0.0
        chunk = ActionChunk(k, dt, ramp)
        raw_jump = np.max(np.abs(chunk.values[0] - state.value))
        blended = blend_boundary(state, chunk)
        blended_jump = np.max(np.abs(blended.values[0] - state.value))
        traj, state = fit_chunk(blended, state)
        traj = enforce_limits(traj, state.vel_limit, state.acc_limit)
        print(f"{c:>5}  {raw_jump:9.5f}  {blended_jump:12.2e}  "
              f"{traj.dilation:8.3f}")

    print("\nlast chunk diagnostics (per group):")
    print(f"{'group':<18} {'max_vel':>9} {'max_acc':>9} {'max_jerk':>10}")
    for g, a, b in DEFAULT_LAYOUT.groups:
        print(f"{g:<18} {traj.max_vel[a:b].max():9.3f} "
              f"{traj.max_acc[a:b].max():9.1f} "
              f"{traj.max_jerk[a:b].max():10.0f}")


if __name__ == "__main__":
    main()
