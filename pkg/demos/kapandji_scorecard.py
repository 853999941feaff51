"""Score the reference hand on the ten-landmark thumb opposition test.

The thumb tip is asked to reach each palm landmark in turn while the
other fingers sit in a flexion preset; a landmark counts when the solved
fingertip lands within 5 mm.
"""

import numpy as np

from dexhand.geometry import Pose
from dexhand.kinematics import forward_kinematics, kapandji_targets
from dexhand.model import load_reference_model
from dexhand.retarget import (RetargetConfig, observation_from_tips,
                              retarget_frame)


def main():
    model = load_reference_model()
    targets = kapandji_targets(model)
    cfg = RetargetConfig(fingers=("thumb",), scale=1.0, d_min=0.0,
                         collisions=False)
    print(f"model: {model.name}")
    print("landmark  error_mm  verdict")
    score = 0
    for i, target in enumerate(targets):
        obs = observation_from_tips(float(i), Pose.identity(),
                                    {"thumb": target})
        sol = retarget_frame(model, obs, cfg, model.kapandji_flexion)
        fk = forward_kinematics(model, sol.q)
        err = np.linalg.norm(fk.fingertips_wrist["thumb"] - target)
        reached = err <= 0.005
        score += reached
        print(f"{i + 1:>8}  {err * 1e3:8.3f}  "
              f"{'reached' if reached else 'missed'}")
    print(f"score: {score}/10")


if __name__ == "__main__":
    main()
