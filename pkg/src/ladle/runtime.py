"""Closed-loop policy execution.

An episode has two phases per target: a transit that steps the ladle
(length ``s`` per tick) along a few straight legs toward the pre-scoop pose
generated for the target, then the policy loop that feeds two-step observation
histories to the action model and executes ``exec_horizon`` of each
three-action chunk.  Several episodes can be advanced in lockstep so the
action model is queried once per tick for all of them.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ddpm import postprocess_actions
from .demonstrator import HeuristicConfig, _pose_collides
from .errors import DegenerateCloud, InvalidParams, StateUnavailable
from .geometry import (IDENTITY_QUAT, UP, Pose, RegionRotation, ScoopParams,
                       prescoop_pose, quat_from_axis_angle, quat_mul, quat_normalize,
                       quat_rotate,
                       region_of, rotate_about_axis, rotate_direction)
from .pointnet import ShapeSpec, gpsi_predict, synth_partial_cloud
from .sim import SimConfig, WorldState, scoop_success, step
from .vectors import ACT_DIM, ActionVec, ObservationVec, compose_motion, make_observation

log = logging.getLogger(__name__)

TRANSIT = "transit"
POLICY = "policy"
SETUP = "setup"
FINISHED = "finished"

RISE, CROSS, DESCEND, TILT, SLIDE = "rise", "cross", "descend", "tilt", "slide"

SUCCESS, TIMEOUT, TARGET_LOST = "success", "timeout", "target_lost"


@dataclass(frozen=True)
class RolloutConfig:
    exec_horizon: int = 1
    max_steps: int = 80                 # policy ticks per target
    height_threshold: float | None = None   # default: water level + lift clearance
    state_source: str = "privileged"
    rho: float = 0.10
    transit_max_steps: int = 200
    transit_clearance: float = 0.06     # ladle origin above water while crossing
    tilt_step_deg: float = 6.0
    transit_standoff: float = 0.04      # tilt this far beyond the goal, then slide in
    azimuth_sweep_deg: float = 20.0
    base_azimuth: float = 0.0           # container centre -> robot base, radians
    near_span_deg: float = 60.0
    cloud_points: int = 128
    cloud_noise: float = 0.0005
    sim: SimConfig = field(default_factory=SimConfig)
    heuristic: HeuristicConfig = field(default_factory=HeuristicConfig)

    def __post_init__(self):
        if self.exec_horizon not in (1, 2, 3):
            raise InvalidParams(f"exec_horizon must be 1, 2 or 3, got {self.exec_horizon}")
        if self.state_source not in ("privileged", "gpsi"):
            raise InvalidParams(f"unknown state source {self.state_source!r}")
        if self.max_steps < 1 or self.rho <= 0:
            raise InvalidParams("max_steps and rho must be positive")

    def height(self, world: WorldState) -> float:
        if self.height_threshold is not None:
            return self.height_threshold
        return self.heuristic.success_height(world)


@dataclass
class Models:
    fphi: object             # .generate(r, rho, rng) -> (h, v)
    pi: object               # .predict_raw((B, 2, 10), rngs) -> (B, 3, 10)
    gpsi: object = None


@dataclass
class EpisodeOutcome:
    success: bool
    ticks_used: int
    n_targets_scooped: int
    n_obstacles_scooped: int
    termination: str

    def __post_init__(self):
        if self.success and self.termination != SUCCESS:
            raise ValueError("a successful episode must terminate with 'success'")


@dataclass
class TraceRow:
    tick: int
    phase: str
    target_index: int
    ladle: Pose           # pose after the tick
    target_pos: np.ndarray
    motion: np.ndarray    # commanded displacement before actuation noise
    contact: bool
    wall_contact: bool
    newly_contained: list
    spilled: list


# ------------------------------------------------------------------ #
# observation / state
# ------------------------------------------------------------------ #
def observe_target(world: WorldState, target_id: int, state_source: str = "privileged",
                   gpsi=None, rng=None, n_points: int = 128, noise: float = 0.0005):
    """Target ``(position, radius)`` from ground truth or from the point-cloud
    regressor applied to a top-view partial cloud of the target sphere."""
    i = world.index_of(target_id)
    pos, r = world.pos[i].copy(), float(world.radius[i])
    if state_source == "privileged":
        return pos, r
    if gpsi is None:
        raise StateUnavailable("state_source=gpsi needs a regressor")
    try:
        cloud = synth_partial_cloud(ShapeSpec("sphere", pos, (r,)), np.array([0.0, 0.0, -1.0]),
                                    n_points, noise, rng).cloud
        pred = gpsi_predict(gpsi, cloud)
    except (DegenerateCloud, FloatingPointError, ValueError) as exc:
        raise StateUnavailable(str(exc)) from exc
    if not (np.isfinite(pred.center).all() and pred.longest_radius > 0):
        raise StateUnavailable("regressor produced an unusable estimate")
    return pred.center, pred.longest_radius


def build_observation(world: WorldState, target_id: int, prescoop, prev_target_pos=None,
                      state_source: str = "privileged", gpsi=None, rng=None,
                      estimate=None) -> ObservationVec:
    """Policy observation for ``target_id``.  ``prescoop`` is a ScoopParams or
    a ``(rho, h, v)`` triple; ``estimate`` skips re-observing the target."""
    if isinstance(prescoop, ScoopParams):
        prescoop = (prescoop.rho, prescoop.h, prescoop.v)
    if estimate is None:
        estimate = observe_target(world, target_id, state_source, gpsi, rng)
    pos, r = estimate
    return make_observation(pos, world.ladle.position, r, prescoop, prev_target_pos)


def choose_azimuth(world: WorldState, target_pos, rho: float, h: float, v: float,
                   yaw: int, sweep_deg: float) -> float:
    """Approach from the container-centre side of the target; if that pose
    collides, sweep alternately left/right.  The sweep runs in the canonical
    frame so that rotated scenes pick rotated azimuths."""
    c = np.array(world.container.center, dtype=float)
    d = np.array([c[0] - target_pos[0], c[1] - target_pos[1], 0.0])
    n = math.hypot(d[0], d[1])
    u_c = rotate_direction(d / n, yaw) if n > 1e-12 else np.array([1.0, 0.0, 0.0])
    back = RegionRotation(yaw).inverse()
    steps = int(180.0 // sweep_deg)
    offsets = [0.0] + [sgn * k * sweep_deg for k in range(1, steps + 1) for sgn in (1, -1)]
    first = None
    for off in offsets:
        a = math.radians(off)
        ca, sa = math.cos(a), math.sin(a)
        u = np.array([ca * u_c[0] - sa * u_c[1], sa * u_c[0] + ca * u_c[1], 0.0])
        u_w = rotate_direction(u, back)
        az = math.atan2(u_w[1], u_w[0])
        if first is None:
            first = az
        if not _pose_collides(world, prescoop_pose(target_pos, ScoopParams(rho, h, v, az))):
            return az
    return first


def rotate_world(world: WorldState, yaw) -> WorldState:
    """Copy of ``world`` rotated about the container axis, with its noise
    stream rotated the same way (the generator state is shared)."""
    yaw = int(RegionRotation(yaw))
    out = world.copy()
    c = np.array(world.container.center, dtype=float)
    out.ladle = rotate_about_axis(world.ladle, yaw, c)
    out.pos = np.array([rotate_about_axis(p, yaw, c) for p in world.pos]).reshape(-1, 3)
    out.vel = np.array([rotate_direction(p, yaw) for p in world.vel]).reshape(-1, 3)
    out.noise_yaw = (world.noise_yaw + yaw) % 360
    return out


def _toward(src, dst, s):
    d = dst - src
    n = float(np.linalg.norm(d))
    return (d, True) if n <= s else (d * (s / n), False)


def _turn(q, goal_q, max_deg):
    """Swing the bowl axis of ``q`` toward that of ``goal_q`` by at most
    ``max_deg``; the bowl is axisymmetric, so twist is ignored until the goal
    is reached.  Second value tells whether it was."""
    n0, n1 = quat_rotate(q, UP), quat_rotate(goal_q, UP)
    ang = math.degrees(math.acos(float(np.clip(np.dot(n0, n1), -1.0, 1.0))))
    if ang <= max_deg:
        return np.array(goal_q, dtype=float), True
    axis = np.cross(n0, n1)
    if np.linalg.norm(axis) < 1e-12:
        axis = np.cross(n0, [1.0, 0.0, 0.0])
    swing = quat_from_axis_angle(axis, math.radians(max_deg))
    return quat_normalize(quat_mul(swing, q)), False


def _upright(q) -> np.ndarray:
    """``q`` with its tilt removed but its twist about the bowl axis kept, so
    that straightening the bowl commutes with yaw rotations."""
    n = quat_rotate(q, UP)
    c = float(np.clip(n[2], -1.0, 1.0))
    axis = np.cross(n, UP)
    if np.linalg.norm(axis) < 1e-12:
        return q.copy() if c > 0 else IDENTITY_QUAT.copy()
    swing = quat_from_axis_angle(axis, math.acos(c))
    return quat_normalize(quat_mul(swing, q))


def transit_step(ladle: Pose, goal: Pose, leg: str, s: float, z_safe: float, tilt_deg: float,
                 standoff=(0.0, 0.0, 0.0)):
    """One tick of the transit to ``goal``.

    Straight legs: rise to ``z_safe``, cross above the water, descend upright
    to ``goal + standoff``, tilt there, then slide onto the goal.  Each leg
    keeps re-aiming at the (moving) goal.  Returns ``(motion, orientation,
    leg, arrived)``.
    """
    p, q = ladle.position, ladle.orientation
    up = _upright(q)
    hover = goal.position + np.asarray(standoff, dtype=float)
    if leg == RISE:
        if p[2] < z_safe:
            m, _ = _toward(p, np.array([p[0], p[1], z_safe]), s)
            return m, _turn(q, up, tilt_deg)[0], RISE, False
        leg = CROSS
    if leg == CROSS:
        dst = np.array([hover[0], hover[1], p[2]])
        m, done = _toward(p, dst, s)
        return m, _turn(q, up, tilt_deg)[0], DESCEND if done else CROSS, False
    if leg == DESCEND:
        m, done = _toward(p, hover, s)
        return m, _turn(q, up, tilt_deg)[0], TILT if done else DESCEND, False
    if leg == TILT:
        m, _ = _toward(p, hover, s)
        q_new, turned = _turn(q, goal.orientation, tilt_deg)
        return m, q_new, SLIDE if turned else TILT, False
    m, at = _toward(p, goal.position, s)
    return m, goal.orientation.copy(), SLIDE, at


# ------------------------------------------------------------------ #
# scripted action model
# ------------------------------------------------------------------ #
class ArcFollowerPolicy:
    """Deterministic stand-in for the learned policy: follows the scooping arc
    implied by the latest observation and lifts once under the target."""

    def __init__(self, s: float = 0.005, horiz_tol: float = 0.01, chunk: int = 3):
        self.s, self.horiz_tol, self.chunk = s, horiz_tol, chunk

    def _action(self, obs: np.ndarray) -> np.ndarray:
        o = ObservationVec.from_array(obs)
        rel = -o.p_relative                      # ladle relative to target
        rho_cur = math.hypot(rel[0], rel[1])
        h = o.prescoop[1]
        if rho_cur <= self.horiz_tol and rel[2] < 0:
            return np.concatenate([[0.0, 0.0, 1.0], IDENTITY_QUAT, np.zeros(3)])
        u = np.array([rel[0], rel[1], 0.0]) / max(rho_cur, 1e-12)
        r = math.hypot(rho_cur, h - rel[2])
        theta = math.atan2(rho_cur, h - rel[2])
        theta_new = max(0.0, theta - 2.0 * math.asin(min(1.0, self.s / (2.0 * r))))
        goal = np.array([0.0, 0.0, h]) + r * (math.sin(theta_new) * u
                                              - math.cos(theta_new) * np.array([0.0, 0.0, 1.0]))
        main = goal - rel
        n = float(np.linalg.norm(main))
        d = main / n if n > 1e-8 else np.zeros(3)
        q = quat_from_axis_angle(np.array([u[1], -u[0], 0.0]), theta_new)
        if q[3] < 0:
            q = -q
        return np.concatenate([d, q, main - self.s * d])

    def predict_raw(self, obs_hist, rng=None) -> np.ndarray:
        obs_hist = np.asarray(obs_hist, dtype=float)
        out = np.zeros((len(obs_hist), self.chunk, ACT_DIM))
        for b, hist in enumerate(obs_hist):
            out[b, :] = self._action(hist[-1])
        return out


# ------------------------------------------------------------------ #
# episode state machine
# ------------------------------------------------------------------ #
class _Episode:
    def __init__(self, world, target_ids, models, cfg, rng, wrap):
        self.world, self.targets, self.models, self.cfg = world, list(target_ids), models, cfg
        self.rng = rng
        self.cloud_rng = np.random.default_rng(rng.integers(2 ** 63))
        self.wrap = wrap
        self.k = 0
        self.phase = SETUP
        self.trace: list = []
        self.ticks = 0
        self.lost = False
        self.outcome: EpisodeOutcome | None = None
        self.height = cfg.height(world)

    @property
    def tid(self):
        return self.targets[self.k]

    # -- per tick ----------------------------------------------------
    def observe(self):
        cfg = self.cfg
        try:
            est = observe_target(self.world, self.tid, cfg.state_source, self.models.gpsi,
                                 self.cloud_rng, cfg.cloud_points, cfg.cloud_noise)
        except StateUnavailable:
            self._finish(lost=True)
            return
        if self.phase == SETUP:
            self._setup(est)
        self.v = np.zeros(3) if self.prev is None else est[0] - self.prev
        self.est = est
        if self.phase == POLICY:
            prev = self.prev if self.fresh_policy is False else None
            obs = make_observation(est[0], self.world.ladle.position, est[1],
                                   (self.params.rho, self.params.h, self.params.v), prev)
            obs_c = rotate_about_axis(obs, self.yaw).to_array()
            if self.fresh_policy:
                self.v = np.zeros(3)
                self.hist = [obs_c, obs_c]
                self.fresh_policy = False
            else:
                self.hist = [self.hist[-1], obs_c]
        self.prev = est[0]

    def _setup(self, est):
        cfg, world = self.cfg, self.world
        pos, r = est
        self.yaw = int(region_of(pos, world.container.center, cfg.base_azimuth,
                                 cfg.near_span_deg)) if self.wrap else 0
        h, v = self.models.fphi.generate(r, cfg.rho, self.rng)
        az = choose_azimuth(world, pos, cfg.rho, h, v, self.yaw, cfg.azimuth_sweep_deg)
        self.params = ScoopParams(cfg.rho, h, v, az)
        self.phase = TRANSIT
        self.leg = RISE
        self.z_safe = world.container.water_level + cfg.transit_clearance
        self.transit_ticks = 0
        self.policy_ticks = 0
        self.prev = None
        self.queue: list = []
        self.fresh_policy = True

    def needs_prediction(self) -> bool:
        return self.outcome is None and self.phase == POLICY and not self.queue

    def act(self):
        if self.outcome is not None:
            return
        cfg, world = self.cfg, self.world
        s = cfg.sim.step_length_s
        if self.phase == TRANSIT:
            goal = prescoop_pose(self.est[0], self.params)
            motion, q, self.leg, arrived = transit_step(
                world.ladle, goal, self.leg, s, self.z_safe, cfg.tilt_step_deg,
                cfg.transit_standoff * self.params.direction)
            self._step(motion, q)
            self.transit_ticks += 1
            if arrived:
                self.phase = POLICY
            elif self.transit_ticks >= cfg.transit_max_steps:
                self._next_target(timed_out=True)
            return
        a = ActionVec.from_array(self.queue.pop(0))
        back = RegionRotation(self.yaw).inverse()
        a = rotate_about_axis(a, back)
        motion = compose_motion(a, self.v, s)
        self._step(motion, quat_normalize(a.q_ladle))
        self.policy_ticks += 1
        i = world.index_of(self.tid)
        if world.contained[i] and world.ladle.position[2] >= self.height:
            self._next_target(timed_out=False)
        elif self.policy_ticks >= cfg.max_steps:
            self._next_target(timed_out=True)

    def _step(self, motion, q):
        _, ev = step(self.world, motion, q, self.cfg.sim)
        self.ticks += 1
        self.trace.append(TraceRow(self.ticks, self.phase, self.k, self.world.ladle.copy(),
                                   self.world.position_of(self.tid), np.array(motion, dtype=float),
                                   self.tid in ev.contact_ids(), ev.ladle_wall_contact,
                                   list(ev.newly_contained), list(ev.spilled)))

    def _next_target(self, timed_out: bool):
        if self.k + 1 < len(self.targets):
            self.k += 1
            self.phase = SETUP
            return
        self._finish(lost=False)

    def _finish(self, lost: bool):
        rep = scoop_success(self.world, self.targets, self.height)
        term = SUCCESS if rep.success and not lost else (TARGET_LOST if lost else TIMEOUT)
        self.outcome = EpisodeOutcome(rep.success and not lost, self.ticks,
                                      rep.n_targets_scooped, rep.n_obstacles_scooped, term)
        self.phase = FINISHED


def run_lockstep(jobs, models: Models, config: RolloutConfig):
    """Advance several episodes together.  ``jobs`` holds ``(world,
    target_ids, rng, wrap)`` tuples; returns ``[(outcome, trace), ...]``.
    Worlds are advanced in place."""
    eps = [_Episode(w, t, models, config, rng, wrap) for w, t, rng, wrap in jobs]
    active = list(eps)
    while active:
        for ep in active:
            ep.observe()
        need = [ep for ep in active if ep.needs_prediction()]
        if need:
            raw = models.pi.predict_raw(np.stack([np.stack(ep.hist) for ep in need]),
                                        [ep.rng for ep in need])
            for ep, chunk in zip(need, raw):
                acts = postprocess_actions(chunk)[:config.exec_horizon]
                ep.queue = [a.to_array() for a in acts]
        for ep in active:
            ep.act()
        active = [ep for ep in active if ep.outcome is None]
    return [(ep.outcome, ep.trace) for ep in eps]


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def run_episode(world: WorldState, models: Models, target_id: int, config: RolloutConfig,
                rng=0):
    """Single-target episode in the world frame; returns ``(outcome, trace)``."""
    return run_lockstep([(world, [target_id], _rng(rng), False)], models, config)[0]


def region_wrapped_episode(world: WorldState, models: Models, target_id: int,
                           config: RolloutConfig, rng=0):
    """As :func:`run_episode`, but observations are rotated into the canonical
    sector (yaw latched from the target's position at episode start) and
    actions rotated back before execution."""
    return run_lockstep([(world, [target_id], _rng(rng), True)], models, config)[0]


def multi_object_episode(world: WorldState, models: Models, target_ids, config: RolloutConfig,
                         rng=0, wrap: bool = False):
    """Scoop targets in order, keeping earlier ones in the bowl."""
    if len(target_ids) < 1:
        raise InvalidParams("need at least one target")
    return run_lockstep([(world, list(target_ids), _rng(rng), wrap)], models, config)[0]


# ------------------------------------------------------------------ #
# trace export
# ------------------------------------------------------------------ #
TRACE_FIELDS = ["tick", "phase", "target_index", "ladle_x", "ladle_y", "ladle_z",
                "q_x", "q_y", "q_z", "q_w", "target_x", "target_y", "target_z",
                "motion_x", "motion_y", "motion_z", "contact", "wall_contact",
                "newly_contained", "spilled"]


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([r.tick, r.phase, r.target_index,
                        *(repr(float(x)) for x in r.ladle.position),
                        *(repr(float(x)) for x in r.ladle.orientation),
                        *(repr(float(x)) for x in r.target_pos),
                        *(repr(float(x)) for x in r.motion),
                        int(r.contact), int(r.wall_contact),
                        " ".join(map(str, r.newly_contained)), " ".join(map(str, r.spilled))])


def trace_svg(world: WorldState, trace, size: int = 400) -> str:
    """Top-down view: container outline, final object positions, the ladle
    path (transit dashed) and the target path."""
    cont = world.container
    R = cont.radius
    cx, cy = cont.center[0], cont.center[1]
    k = (size / 2 - 10) / R

    def xy(p):
        return f"{size / 2 + k * (p[0] - cx):.2f},{size / 2 - k * (p[1] - cy):.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<circle cx="{size / 2:.2f}" cy="{size / 2:.2f}" r="{k * R:.2f}" fill="#eef5fb" '
           'stroke="#555" stroke-width="1.5"/>']
    for i in range(world.n_objects):
        colour = "#d9534f" if world.is_target[i] else "#999999"
        px, py = xy(world.pos[i]).split(",")
        out.append(f'<circle cx="{px}" cy="{py}" r="{k * world.radius[i]:.2f}" fill="{colour}" '
                   'fill-opacity="0.6"/>')
    for phase, style in ((TRANSIT, ' stroke-dasharray="4,3"'), (POLICY, "")):
        pts = " ".join(xy(r.ladle.position) for r in trace if r.phase == phase)
        if pts:
            out.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" '
                       f'stroke-width="1.5"{style}/>')
    tpts = " ".join(xy(r.target_pos) for r in trace)
    if tpts:
        out.append(f'<polyline points="{tpts}" fill="none" stroke="#d9534f" stroke-width="1"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_trace_svg(world: WorldState, trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_svg(world, trace))
