"""Retarget a synthetic glove stream and watch the safety behaviors.

A slow grasp is interrupted by a tracking dropout (zero-confidence
frames) and a half-second gap; the stream solver holds the last command
through the dropout and re-anchors at the rest pose after the gap.
"""

import numpy as np

from dexhand.geometry import Pose
from dexhand.kinematics import forward_kinematics
from dexhand.model import FINGERS, load_reference_model
from dexhand.retarget import (HumanHandObservation, RetargetConfig,
                              observation_from_tips, retarget_stream)


def grasp_configs(model, n):
    """Rest pose closing toward a light grasp."""
    q0 = model.rest_config.copy()
    q1 = q0.copy()
    for j, name in enumerate(model.active_joints):
        if name.endswith("mcp_flex"):
            q1[j] = 0.7
        elif name.endswith("_pip"):
            q1[j] = 0.8
    return [q0 + (q1 - q0) * k / (n - 1) for k in range(n)]


def main():
    model = load_reference_model()
    dt = 0.05
    frames = []
    t = 0.0
    for q in grasp_configs(model, 20):
        fk = forward_kinematics(model, q)
        tips = {f: np.asarray(fk.fingertips_wrist[f]) for f in FINGERS}
        frames.append(observation_from_tips(t, Pose.identity(), tips))
        t += dt

    # two dark frames: every keypoint at zero confidence
    for _ in range(2):
        frames.append(HumanHandObservation(t, Pose.identity(),
                                           np.zeros((21, 3)), np.zeros(21)))
        t += dt

    # a gap longer than gap_threshold, then one more good frame
    t += 0.6
    fk = forward_kinematics(model, model.rest_config)
    tips = {f: np.asarray(fk.fingertips_wrist[f]) for f in FINGERS}
    frames.append(observation_from_tips(t, Pose.identity(), tips))

    cfg = RetargetConfig(scale=1.0)
    sols = retarget_stream(model, frames, cfg)
    print("frame  t      status     |q|        residual_mm")
    for k, (obs, sol) in enumerate(zip(frames, sols)):
        resid = "-" if np.isnan(sol.residual) else f"{sol.residual * 1e3:.3f}"
        print(f"{k:>5}  {obs.timestamp:5.2f}  {sol.status:<9}  "
              f"{np.linalg.norm(sol.q):8.4f}  {resid}")


if __name__ == "__main__":
    main()
