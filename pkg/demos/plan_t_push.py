"""Plan pushes that bring a T-shaped block to a goal pose and report each push.

Run: python demos/plan_t_push.py
"""

import numpy as np

from digitwin.planner import GoalPose, plan_sequence
from digitwin.scene import ObjectSpec, PusherSpec, SceneSpec, build_scene, t_shape


def main():
    spec = SceneSpec(objects=[ObjectSpec("t", t_shape(), position=[0, 0, 0.015])],
                     pusher=PusherSpec([0.0], [[0.3, 0.3, 0.015]]), grid_pitch=0.015, sphere_radius=0.0075)
    world = build_scene(spec).world
    goal = GoalPose([0.06, 0.04], 0.4)
    res = plan_sequence(world, goal, seed=0)
    print(f"start: {100 * res.initial_position_error:.2f} cm, {res.initial_yaw_error:.3f} rad from the goal")
    for p in res.pushes:
        a = p.action
        print(f"push {p.index + 1}: start r={a.start_radius:.3f} m at {np.rad2deg(a.start_angle):6.1f} deg, "
              f"end offset ({a.end_dx:+.3f}, {a.end_dy:+.3f}) m -> {100 * p.position_error:.2f} cm, "
              f"{p.yaw_error:.3f} rad")
    print(f"final: {100 * res.final_position_error:.2f} cm, {res.final_yaw_error:.3f} rad after "
          f"{len(res.pushes)} pushes")


if __name__ == "__main__":
    main()
