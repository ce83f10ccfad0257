"""Motion-adaptive heuristic scooping expert.

The expert follows the circular arc under the target, shifting the whole arc
by the target's per-tick displacement, steps away from the wall on contact,
optionally backs off the target after a collision, and lifts once the bowl is
close enough underneath.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SamplingExhausted, TargetLost
from .geometry import (IDENTITY_QUAT, Pose, ScoopParams, arc_waypoint, lift_trigger,
                       prescoop_pose)
from .sim import (SimConfig, SuccessReport, WorldState, _hull_contacts, bowl_sphere_center,
                  scoop_success, step)
from .vectors import ActionVec, ObservationVec, decompose_motion, make_observation

__all__ = [
    "APPROACH_ARC", "WALL_AVOID", "OFFSET_RECOVERY", "LIFT", "DONE",
    "DemoMode", "DemonstratorState", "HeuristicConfig", "LadleCommand", "DemoStep",
    "heuristic_step", "sample_prescoop_candidate", "run_demo", "LEGAL_TRANSITIONS",
]

APPROACH_ARC = "APPROACH_ARC"
WALL_AVOID = "WALL_AVOID"
OFFSET_RECOVERY = "OFFSET_RECOVERY"
LIFT = "LIFT"
DONE = "DONE"

LEGAL_TRANSITIONS = {
    (APPROACH_ARC, WALL_AVOID), (WALL_AVOID, APPROACH_ARC),
    (APPROACH_ARC, OFFSET_RECOVERY), (OFFSET_RECOVERY, APPROACH_ARC),
    (APPROACH_ARC, LIFT), (LIFT, DONE),
}

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class DemoMode:
    kind: str = "baseline"

    def __post_init__(self):
        if self.kind not in ("prescoop_collection", "policy_collection", "baseline"):
            raise ValueError(f"unknown demo mode {self.kind!r}")

    @property
    def recovery(self) -> bool:
        return self.kind != "prescoop_collection"


@dataclass(frozen=True)
class HeuristicConfig:
    horiz_tol: float = 0.01
    vert_window: float = 0.15
    lift_clearance: float = 0.02   # success height above the water plane
    recovery_ticks: int = 3
    max_collisions: int = 2
    reanchor: bool = False
    rho_margin: float = 0.01
    rho_max: float = 0.13
    h_min: float = 0.004
    h_fit: float = 0.9   # h_max = h_fit * (bowl_radius - r_target)
    v_range: tuple = (0.0, 0.05)
    sample_attempts: int = 200

    def success_height(self, world: WorldState) -> float:
        return world.container.water_level + self.lift_clearance

    def rho_range(self, r_target: float, bowl_radius: float) -> tuple:
        return (r_target + bowl_radius + self.rho_margin, self.rho_max)

    def h_range(self, r_target: float, bowl_radius: float) -> tuple:
        # keeps the target inside the opening column along the nominal arc
        return (self.h_min, max(self.h_min, self.h_fit * (bowl_radius - r_target)))


@dataclass
class DemonstratorState:
    phase: str = APPROACH_ARC
    arc_t: float = 0.0
    shift_accum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    recovery_ticks_left: int = 0
    anchor: np.ndarray | None = None
    prev_target: np.ndarray | None = None
    recovery_normal: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "DemonstratorState":
        return DemonstratorState(self.phase, self.arc_t, self.shift_accum.copy(),
                                 self.recovery_ticks_left,
                                 None if self.anchor is None else self.anchor.copy(),
                                 None if self.prev_target is None else self.prev_target.copy(),
                                 self.recovery_normal.copy())


@dataclass
class LadleCommand:
    motion: np.ndarray
    orientation: np.ndarray
    action: ActionVec


@dataclass
class DemoStep:
    tick: int
    phase: str
    observation: ObservationVec
    action: ActionVec
    command: LadleCommand
    ladle: Pose
    target_pos: np.ndarray
    contact: bool
    wall_contact: bool
    contained: bool


def _arc_delta(params: ScoopParams, s: float) -> float:
    """Arc fraction whose chord is exactly one step length."""
    r = params.r_arc
    dtheta = 2.0 * math.asin(min(1.0, s / (2.0 * r)))
    return dtheta / params.theta0


def _command(motion, orientation, v_target, s) -> LadleCommand:
    d, delta = decompose_motion(motion, v_target, s)
    return LadleCommand(np.asarray(motion, dtype=float), np.asarray(orientation, dtype=float),
                        ActionVec(d, orientation, delta))


def heuristic_step(world: WorldState, target_id: int, params: ScoopParams,
                   state: DemonstratorState, mode: DemoMode,
                   config: SimConfig | None = None, hcfg: HeuristicConfig | None = None):
    """One expert decision.  Returns ``(LadleCommand, new_state)``."""
    config = config or SimConfig()
    hcfg = hcfg or HeuristicConfig()
    s = config.step_length_s
    st = state.copy()
    i = world.index_of(target_id)
    p = world.pos[i].copy()
    target_free = not world.contained[i]
    cont = world.container
    if target_free and (math.hypot(*(p[:2] - cont.center_xy))
                        > cont.radius - world.radius[i] + 1e-9):
        raise TargetLost(target_id)

    # v is the observed target displacement; d is the part the arc follows
    v = np.zeros(3) if st.prev_target is None else p - st.prev_target
    d = v if target_free else np.zeros(3)
    st.prev_target = p
    if st.anchor is None:
        st.anchor = p.copy()
    ladle = world.ladle
    events = world.last_events

    if st.phase == DONE:
        return _command(np.zeros(3), IDENTITY_QUAT, v, s), st
    if st.phase == LIFT:
        if ladle.position[2] >= hcfg.success_height(world):
            st.phase = DONE
            return _command(np.zeros(3), IDENTITY_QUAT, v, s), st
        return _command(s * UP + d, IDENTITY_QUAT, v, s), st
    if st.phase == OFFSET_RECOVERY and st.recovery_ticks_left > 0:
        st.recovery_ticks_left -= 1
        st.shift_accum = st.shift_accum + d
        return _command(-s * st.recovery_normal + d, ladle.orientation, v, s), st

    fresh = st.phase != APPROACH_ARC
    st.phase = APPROACH_ARC
    if not fresh and events.ladle_wall_contact:
        st.phase = WALL_AVOID
        c = bowl_sphere_center(ladle, world.ladle_spec)
        inward = np.array([cont.center[0] - c[0], cont.center[1] - c[1], 0.0])
        n = np.linalg.norm(inward)
        inward = inward / n if n > 1e-12 else np.zeros(3)
        st.shift_accum = st.shift_accum + d
        return _command(s * inward, ladle.orientation, v, s), st
    if not fresh and mode.recovery and target_id in events.contact_ids():
        nrm = dict(events.ladle_object_contacts)[target_id]
        st.phase = OFFSET_RECOVERY
        st.recovery_normal = np.asarray(nrm, dtype=float)
        st.recovery_ticks_left = hcfg.recovery_ticks - 1
        st.shift_accum = st.shift_accum + d
        return _command(-s * st.recovery_normal + d, ladle.orientation, v, s), st
    if lift_trigger(p, ladle, hcfg.horiz_tol, hcfg.vert_window):
        st.phase = LIFT
        return _command(s * UP + d, IDENTITY_QUAT, v, s), st

    st.shift_accum = st.shift_accum + d
    if st.arc_t < 1.0:
        t_new = min(1.0, st.arc_t + _arc_delta(params, s))
        if hcfg.reanchor:
            goal = arc_waypoint(p, params, t_new)
            motion = goal.position - ladle.position
        else:
            old = arc_waypoint(st.anchor, params, st.arc_t)
            goal = arc_waypoint(st.anchor, params, t_new)
            motion = (goal.position - old.position) + d
        st.arc_t = t_new
        return _command(motion, goal.orientation, v, s), st
    # arc exhausted without triggering: close in on the point under the target
    goal = p + np.array([0.0, 0.0, params.h - params.r_arc])
    delta = goal - ladle.position
    n = float(np.linalg.norm(delta))
    if n > s:
        delta = delta * (s / n)
    return _command(delta, IDENTITY_QUAT, v, s), st


def _pose_collides(world: WorldState, pose: Pose) -> bool:
    saved = world.ladle
    world.ladle = pose
    try:
        free = np.flatnonzero(~world.contained)
        touching, _ = _hull_contacts(world, free)
        c = bowl_sphere_center(pose, world.ladle_spec)
        radial = math.hypot(*(c[:2] - world.container.center_xy))
        wall = radial + world.ladle_spec.bowl_radius >= world.container.radius
        return bool(touching.any()) or wall
    finally:
        world.ladle = saved


def sample_prescoop_candidate(world: WorldState, target_id: int, rng: np.random.Generator,
                              hcfg: HeuristicConfig | None = None) -> ScoopParams:
    """Rejection-sample (rho, h, v, azimuth) until the pre-scoop pose is clear
    of every object and the wall."""
    hcfg = hcfg or HeuristicConfig()
    i = world.index_of(target_id)
    p = world.pos[i]
    r, rb = float(world.radius[i]), world.ladle_spec.bowl_radius
    lo, hi = hcfg.rho_range(r, rb)
    h_lo, h_hi = hcfg.h_range(r, rb)
    for _ in range(hcfg.sample_attempts):
        params = ScoopParams(float(rng.uniform(lo, hi)), float(rng.uniform(h_lo, h_hi)),
                             float(rng.uniform(*hcfg.v_range)),
                             float(rng.uniform(0.0, 2.0 * math.pi)))
        if not _pose_collides(world, prescoop_pose(p, params)):
            return params
    raise SamplingExhausted(f"no collision-free pre-scoop pose for object {target_id}")


def run_demo(world: WorldState, target_id: int, params: ScoopParams, mode: DemoMode,
             config: SimConfig | None = None, hcfg: HeuristicConfig | None = None,
             teleport: bool = True):
    """Closed-loop expert rollout from the pre-scoop pose.

    Returns ``(trajectory, SuccessReport, collision_count)``; ``world`` is
    advanced in place.
    """
    config = config or SimConfig()
    hcfg = hcfg or HeuristicConfig()
    traj: list = []
    target_ids = [target_id]
    if teleport:
        world.ladle = prescoop_pose(world.position_of(target_id), params)
    state = DemonstratorState()
    collisions = 0
    prescoop = np.array([params.rho, params.h, params.v])
    r_target = float(world.radius[world.index_of(target_id)])
    height = hcfg.success_height(world)
    for _ in range(config.max_steps):
        prev = state.prev_target
        try:
            cmd, new_state = heuristic_step(world, target_id, params, state, mode, config, hcfg)
        except TargetLost:
            break
        p = new_state.prev_target
        obs = make_observation(p, world.ladle.position, r_target, prescoop, prev)
        ladle_before = world.ladle.copy()
        _, events = step(world, cmd.motion, cmd.orientation, config)
        contact = target_id in events.contact_ids()
        if contact and new_state.phase not in (LIFT, DONE):
            collisions += 1
        traj.append(DemoStep(world.tick, new_state.phase, obs, cmd.action, cmd, ladle_before,
                             p.copy(), contact, events.ladle_wall_contact,
                             bool(world.contained[world.index_of(target_id)])))
        state = new_state
        report = scoop_success(world, target_ids, height)
        if report.success or state.phase == DONE:
            break
    report = scoop_success(world, target_ids, height)
    return traj, report, collisions
