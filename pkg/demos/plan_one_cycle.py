"""Walk through one planning cycle on the bundled corridor scenario.

Samples the heuristic trajectory cluster, prunes it with the Frenet
pre-score, screens kinematics and collisions, and prints the cost table
for the surviving candidates.

Run from the repository root:  python3 demos/plan_one_cycle.py
"""

import os

import numpy as np

import mhhtof
from mhhtof.evaluation import (Scene, WeightVector, collision_check,
                               cost_terms, kinematic_check, prune_stage1,
                               select_trajectory, weighted_cost)
from mhhtof.geometry import cartesian_to_frenet
from mhhtof.sampling import SamplingGrid, generate_htsc
from mhhtof.simenv import Planner, load_scenario

scenario_path = os.path.join(os.path.dirname(mhhtof.__file__),
                             "scenarios", "corridor_3obs.json")
scn = load_scenario(scenario_path)
print(f"scenario: {scn.name}  (lane {scn.lane_width} m, v_law {scn.v_law})")

planner = Planner(scn, horizons=(2.0, 3.0, 4.0, 5.0))
frenet = cartesian_to_frenet(planner.ref, scn.ego_start)
grid = SamplingGrid.default(max(scn.ego_start.v, 0.3), scn.v_law,
                            lateral_bound=0.5 * scn.lane_width - scn.ego_radius,
                            horizons=(2.0, 3.0, 4.0, 5.0))
cluster = generate_htsc(frenet, grid, planner.ref, dt=scn.dt)
print(f"sampled {len(cluster)} candidates "
      f"({len(grid.lateral_offsets)} offsets x {len(grid.horizons)} horizons "
      f"x {len(grid.terminal_speeds)} speeds)")

wv = WeightVector()
keep = prune_stage1(cluster, wv, v_desire=scn.v_law, n1=20)
print(f"stage 1 keeps {len(keep)} candidates")

scene = Scene(obstacles=scn.obstacles, v_desire=scn.v_law)
rows = []
for i in keep:
    cand = cluster[i]
    if not kinematic_check(cand, planner.limits).passed:
        continue
    ok, clearance = collision_check(cand, scn.obstacles, scn.ego_radius)
    if not ok:
        continue
    cv = cost_terms(cand, scene)
    rows.append((i, cand, cv, clearance))

print(f"{len(rows)} candidates survive screening\n")
print(" idx   T     J      clearance   ae    vo    opp   sc")
for i, cand, cv, clearance in rows[:12]:
    print(f"{i:4d}  {cand.horizon:3.1f}  {weighted_cost(cv, wv):6.2f}"
          f"   {clearance:6.2f}     {cv.ae:5.2f} {cv.vo:5.2f}"
          f" {cv.opp:5.2f} {cv.sc:5.2f}")

sel, best = select_trajectory([r[1] for r in rows], [r[2] for r in rows], wv)
print(f"\nselected candidate #{rows[sel][0]} "
      f"(horizon {best.horizon} s, terminal speed "
      f"{best.cartesian['v'][-1]:.2f} m/s)")
xy = np.stack([best.cartesian["x"], best.cartesian["y"]], axis=1)
print("first waypoints:")
print(np.array2string(xy[:5], precision=3))
