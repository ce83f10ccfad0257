"""Scoop one object with the scripted expert, then with the runtime loop.

Runs in a few seconds and needs no trained model:

    python3 tutorials/01_scoop_basics.py
"""
import numpy as np

from ladle.demonstrator import DemoMode, run_demo, sample_prescoop_candidate
from ladle.geometry import ScoopParams, arc_waypoint, prescoop_pose
from ladle.runtime import ArcFollowerPolicy, Models, RolloutConfig, run_episode
from ladle.sim import ContainerSpec, LadleSpec, spawn_scene

# A scoop is parameterised by (rho, h, v, azimuth): horizontal stand-off,
# depth below the target and rise above it, plus the approach direction.
target = np.array([0.0, 0.0, 0.0])
params = ScoopParams(rho=0.10, h=0.012, v=0.02, azimuth=0.0)
start = prescoop_pose(target, params)
print("pre-scoop position", np.round(start.position, 4))
for t in (0.0, 0.5, 1.0):
    print(f"arc t={t:.1f}", np.round(arc_waypoint(target, params, t).position, 4))

# A seeded scene: one target among floating distractors.
world = spawn_scene(ContainerSpec(), LadleSpec.of_size(), 1, "normal", rng_seed=2)
tid = world.target_ids()[0]
print(f"{len(world.radius)} objects, target {tid} radius {world.radius[world.index_of(tid)]:.3f}")

# The expert samples a collision-free pre-scoop pose and follows the arc.
rng = np.random.default_rng(0)
params = sample_prescoop_candidate(world, tid, rng)
traj, report, collisions = run_demo(world.copy(), tid, params, DemoMode("baseline"))
print(f"expert: success={report.success} steps={len(traj)} collisions={collisions}")

# The runtime loop transits from the spawn pose, asks f_phi for (h, v) and
# then queries the policy.  Here both are deterministic stand-ins.
class FixedPrescoop:
    def generate(self, r, rho, rng):
        return 0.012, 0.02

models = Models(FixedPrescoop(), ArcFollowerPolicy())
fresh = spawn_scene(ContainerSpec(), LadleSpec.of_size(), 1, "normal", rng_seed=2)
outcome, trace = run_episode(fresh, models, tid, RolloutConfig(), rng=0)
print(f"runtime: {outcome.termination} after {outcome.ticks_used} ticks, "
      f"{len(trace)} trace rows")
