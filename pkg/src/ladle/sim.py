"""Deterministic floating-object world: a cylindrical water container, a rigid
hemispherical ladle bowl, contact pushes, containment and spilling.

Fluid is not simulated.  Free objects are pinned to the water plane and
move with overdamped horizontal dynamics; the only couplings are contact
pushes from the bowl hull, pairwise separation between objects, the wall and
seeded positional noise.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParams, PackingFailure, UnknownId
from .geometry import (IDENTITY_QUAT, Pose, bowl_normal, quat_normalize,
                       quat_to_matrix, rotate_direction, tilt_angle)

__all__ = [
    "ContainerSpec", "LadleSpec", "SimConfig", "SceneConfig", "FloatingObject",
    "WorldState", "TickEvents", "SuccessReport", "LADLE_SIZES",
    "spawn_scene", "step", "containment_test", "scoop_success",
    "query_ladle_wall_contact", "bowl_sphere_center", "export_snapshot",
    "place_object",
]

LADLE_SIZES = {"small": 0.03, "standard": 0.045, "large": 0.06}


@dataclass(frozen=True)
class ContainerSpec:
    radius: float = 0.2
    wall_height: float = 0.2
    water_level: float = 0.12
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        depth = self.water_level - self.center[2]
        if self.radius <= 0 or not (0 < depth < self.wall_height):
            raise InvalidParams(f"bad container {self}")

    @property
    def center_xy(self) -> np.ndarray:
        return np.array(self.center[:2], dtype=float)

    @property
    def surface_area(self) -> float:
        return math.pi * self.radius ** 2


@dataclass(frozen=True)
class LadleSpec:
    bowl_radius: float = 0.045
    rim_plane_offset: float = 0.036
    size_class: str = "standard"

    def __post_init__(self):
        if self.bowl_radius <= 0 or not (0 < self.rim_plane_offset <= self.bowl_radius):
            raise InvalidParams(f"bad ladle {self}")
        if self.size_class not in LADLE_SIZES:
            raise InvalidParams(f"unknown ladle size {self.size_class!r}")

    @classmethod
    def of_size(cls, size_class: str = "standard") -> "LadleSpec":
        r = LADLE_SIZES[size_class]
        return cls(r, 0.8 * r, size_class)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    step_length_s: float = 0.005
    drag_gamma: float = 0.85
    push_gain: float = 0.8
    noise_sigma: float = 0.001
    ladle_noise_sigma: float = 0.0005
    spill_tilt_deg: float = 40.0
    max_steps: int = 80
    max_motion: float = 0.03
    separation_passes: int = 2

    def __post_init__(self):
        if not (0 <= self.drag_gamma < 1) or self.noise_sigma < 0 or self.step_length_s <= 0:
            raise InvalidParams(f"bad sim config {self}")


@dataclass(frozen=True)
class SceneConfig:
    """Randomisation ranges used by :func:`spawn_scene`."""

    target_radius: tuple = (0.01, 0.035)
    target_label: str = "poolball"
    target_push: float = 1.0
    distractor_radius: tuple = (0.012, 0.03)
    distractor_count: tuple = (2, 5)
    normal_max_fill: float = 0.30
    severe_fill: float = 0.60
    severe_min_radius: float = 0.01
    wall_margin: float = 0.0
    target_sector: tuple | None = None  # (centre azimuth, half width) in radians
    ladle_start_height: float = 0.06
    max_attempts: int = 20000


@dataclass
class FloatingObject:
    id: int
    label: str
    is_target: bool
    radius: float
    position: np.ndarray
    velocity: np.ndarray
    contained: bool = False
    push_scale: float = 1.0


@dataclass
class TickEvents:
    ladle_object_contacts: list = field(default_factory=list)  # (id, normal)
    ladle_wall_contact: bool = False
    newly_contained: list = field(default_factory=list)
    spilled: list = field(default_factory=list)

    def contact_ids(self) -> list:
        return [i for i, _ in self.ladle_object_contacts]


@dataclass
class SuccessReport:
    success: bool
    n_targets_scooped: int
    n_obstacles_scooped: int


@dataclass
class WorldState:
    """Full simulation state.  Object data is stored column-wise."""

    container: ContainerSpec
    ladle_spec: LadleSpec
    ladle: Pose
    ids: np.ndarray
    labels: list
    is_target: np.ndarray
    radius: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    contained: np.ndarray
    local: np.ndarray
    push_scale: np.ndarray
    rng: np.random.Generator
    tick: int = 0
    last_events: TickEvents = field(default_factory=TickEvents)
    noise_yaw: int = 0  # rotates the drawn noise stream (equivariance harness)

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    @property
    def n_objects(self) -> int:
        return len(self.ids)

    def index_of(self, object_id: int) -> int:
        hits = np.flatnonzero(self.ids == object_id)
        if len(hits) == 0:
            raise UnknownId(object_id)
        return int(hits[0])

    def object(self, object_id: int) -> FloatingObject:
        i = self.index_of(object_id)
        return FloatingObject(int(self.ids[i]), self.labels[i], bool(self.is_target[i]),
                              float(self.radius[i]), self.pos[i].copy(), self.vel[i].copy(),
                              bool(self.contained[i]), float(self.push_scale[i]))

    @property
    def objects(self) -> list:
        return [self.object(int(i)) for i in self.ids]

    def target_ids(self) -> list:
        return [int(i) for i in self.ids[self.is_target]]

    def position_of(self, object_id: int) -> np.ndarray:
        return self.pos[self.index_of(object_id)].copy()

    def contained_ids(self) -> list:
        return [int(i) for i in self.ids[self.contained]]


def _empty_world(container, ladle_spec, ladle, rng) -> WorldState:
    return WorldState(container, ladle_spec, ladle,
                      ids=np.zeros(0, dtype=int), labels=[], is_target=np.zeros(0, dtype=bool),
                      radius=np.zeros(0), pos=np.zeros((0, 3)), vel=np.zeros((0, 3)),
                      contained=np.zeros(0, dtype=bool), local=np.zeros((0, 3)),
                      push_scale=np.zeros(0), rng=rng)


def place_object(world: WorldState, label: str, is_target: bool, radius: float, xy,
                 push_scale: float = 1.0, velocity=(0.0, 0.0, 0.0)) -> int:
    """Append a free object on the water plane and return its id."""
    new_id = int(world.ids.max()) + 1 if world.n_objects else 0
    p = np.array([xy[0], xy[1], world.container.water_level], dtype=float)
    world.ids = np.append(world.ids, new_id)
    world.labels = world.labels + [label]
    world.is_target = np.append(world.is_target, bool(is_target))
    world.radius = np.append(world.radius, float(radius))
    world.pos = np.vstack([world.pos, p])
    world.vel = np.vstack([world.vel, np.asarray(velocity, dtype=float).reshape(1, 3)])
    world.contained = np.append(world.contained, False)
    world.local = np.vstack([world.local, np.zeros(3)])
    world.push_scale = np.append(world.push_scale, float(push_scale))
    return new_id


def make_world(container: ContainerSpec | None = None, ladle_spec: LadleSpec | None = None,
               ladle: Pose | None = None, seed: int = 0) -> WorldState:
    """An empty world; handy for scripted scenes."""
    container = container or ContainerSpec()
    ladle_spec = ladle_spec or LadleSpec.of_size("standard")
    if ladle is None:
        c = container.center
        ladle = Pose((c[0], c[1], container.water_level + 0.06))
    return _empty_world(container, ladle_spec, ladle, np.random.default_rng(seed))


# ------------------------------------------------------------------ #
# scene generation
# ------------------------------------------------------------------ #
def _free_radius(xy: np.ndarray, centers: np.ndarray, radii: np.ndarray,
                 container: ContainerSpec) -> np.ndarray:
    """Largest radius a disk at each row of ``xy`` can take without overlap."""
    wall = container.radius - np.linalg.norm(xy - container.center_xy, axis=1)
    if len(centers) == 0:
        return wall
    d = np.linalg.norm(xy[:, None, :] - centers[None, :, :], axis=2) - radii[None, :]
    return np.minimum(wall, d.min(axis=1))


def _uniform_disk(rng, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    a = 2 * math.pi * rng.random(n)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def spawn_scene(container: ContainerSpec, ladle_spec: LadleSpec, n_targets: int,
                severity: str, rng_seed: int, scene: SceneConfig | None = None,
                target_radius: float | None = None, n_distractors: int | None = None,
                target_profile: tuple | None = None) -> WorldState:
    """Place targets and distractors on the water plane without overlap.

    ``normal`` scenes keep total distractor area under ``normal_max_fill`` of
    the surface; ``severe`` scenes fill to ``severe_fill`` by dart throwing
    with candidates that shrink to fit the free space around them.
    """
    if n_targets < 1:
        raise InvalidParams("need at least one target")
    if severity not in ("normal", "severe"):
        raise InvalidParams(f"unknown severity {severity!r}")
    scene = scene or SceneConfig()
    rng = np.random.default_rng(rng_seed)
    world = _empty_world(container, ladle_spec, Pose(np.zeros(3)), rng)
    cxy = container.center_xy
    R = container.radius

    label, push = scene.target_label, scene.target_push
    if target_profile is not None:
        label, target_radius, push = target_profile
    for _ in range(n_targets):
        r = target_radius if target_radius is not None else rng.uniform(*scene.target_radius)
        for _attempt in range(scene.max_attempts):
            if scene.target_sector is not None:
                az0, half = scene.target_sector
                a = az0 + rng.uniform(-half, half)
                rr = (R - r - scene.wall_margin) * math.sqrt(rng.random())
                xy = np.array([math.cos(a), math.sin(a)]) * rr
            else:
                xy = _uniform_disk(rng, 1, R - r - scene.wall_margin)[0]
            if _free_radius(xy[None] + cxy, world.pos[:, :2], world.radius, container)[0] >= r:
                break
        else:
            raise PackingFailure("could not place target")
        place_object(world, label, True, r, xy + cxy, push)

    area_cap = container.surface_area
    if severity == "normal":
        count = n_distractors if n_distractors is not None else int(
            rng.integers(scene.distractor_count[0], scene.distractor_count[1] + 1))
        area = 0.0
        for k in range(count):
            r = rng.uniform(*scene.distractor_radius)
            if area + math.pi * r * r >= scene.normal_max_fill * area_cap:
                break
            for _attempt in range(scene.max_attempts):
                xy = _uniform_disk(rng, 1, R - r)[0] + cxy
                if _free_radius(xy[None], world.pos[:, :2], world.radius, container)[0] >= r:
                    break
            else:
                raise PackingFailure(f"could not place distractor {k}")
            place_object(world, "distractor", False, r, xy)
            area += math.pi * r * r
    else:
        goal = scene.severe_fill * area_cap
        area = 0.0
        attempts = 0
        batch = 64
        while area < goal:
            if attempts > scene.max_attempts:
                raise PackingFailure(f"severe fill stalled at {area / area_cap:.3f}")
            xy = _uniform_disk(rng, batch, R) + cxy
            want = rng.uniform(*scene.distractor_radius, size=batch)
            free = _free_radius(xy, world.pos[:, :2], world.radius, container)
            ok = np.flatnonzero(free >= scene.severe_min_radius)
            attempts += batch
            if len(ok) == 0:
                continue
            j = ok[0]
            r = float(min(want[j], free[j]))
            place_object(world, "distractor", False, r, xy[j])
            area += math.pi * r * r

    start = _uniform_disk(rng, 1, R - ladle_spec.bowl_radius)[0] + cxy
    world.ladle = Pose((start[0], start[1], container.water_level + scene.ladle_start_height),
                       IDENTITY_QUAT)
    return world


# ------------------------------------------------------------------ #
# predicates
# ------------------------------------------------------------------ #
def bowl_sphere_center(ladle: Pose, ladle_spec: LadleSpec) -> np.ndarray:
    return ladle.position + ladle_spec.bowl_radius * bowl_normal(ladle.orientation)


def _rim_height(ladle: Pose, ladle_spec: LadleSpec) -> float:
    return float(ladle.position[2] + ladle_spec.rim_plane_offset * bowl_normal(ladle.orientation)[2])


def _inside_bowl(local: np.ndarray, ladle_spec: LadleSpec) -> np.ndarray:
    rb = ladle_spec.bowl_radius
    off = local - np.array([0.0, 0.0, rb])
    return (np.einsum("ij,ij->i", off, off) < rb * rb) & (local[:, 2] < ladle_spec.rim_plane_offset)


def _to_local(ladle: Pose, pts: np.ndarray) -> np.ndarray:
    return (pts - ladle.position) @ quat_to_matrix(ladle.orientation)


def containment_test(world: WorldState, object_id: int) -> bool:
    """Object centre strictly inside the bowl hemisphere and under its rim plane."""
    i = world.index_of(object_id)
    local = world.ladle.to_local(world.pos[i])[None]
    return bool(_inside_bowl(local, world.ladle_spec)[0])


def query_ladle_wall_contact(world: WorldState) -> bool:
    c = bowl_sphere_center(world.ladle, world.ladle_spec)
    radial = math.hypot(c[0] - world.container.center[0], c[1] - world.container.center[1])
    return world.container.radius - (radial + world.ladle_spec.bowl_radius) <= 0.0


def scoop_success(world: WorldState, target_ids, height_threshold: float) -> SuccessReport:
    contained = set(world.contained_ids())
    targets = set(int(t) for t in target_ids)
    n_t = len(contained & targets)
    n_o = len(contained - targets)
    ok = bool(contained) and contained == targets and world.ladle.position[2] >= height_threshold
    return SuccessReport(ok, n_t, n_o)


def _hull_contacts(world: WorldState, idx: np.ndarray):
    """Free objects (indices ``idx``) touching the outside of the bowl.

    Objects that fit through the opening (centre within ``bowl_radius - r``
    of the bowl axis, on the open side) are not contacts; they are
    candidates for containment instead.
    """
    spec = world.ladle_spec
    c = bowl_sphere_center(world.ladle, spec)
    n = bowl_normal(world.ladle.orientation)
    rel = world.pos[idx] - c
    dist = np.linalg.norm(rel, axis=1)
    along = (world.pos[idx] - world.ladle.position) @ n
    radial_vec = rel - np.outer(rel @ n, n)
    fits = np.maximum(spec.bowl_radius - world.radius[idx], 0.0)
    in_column = (along > 0.0) & (np.linalg.norm(radial_vec, axis=1) < fits)
    touching = (dist < spec.bowl_radius + world.radius[idx]) & ~in_column
    return touching, c


def _horizontal_normal(vec: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    h = np.array([vec[0], vec[1], 0.0])
    n = math.hypot(h[0], h[1])
    if n > 1e-12:
        return h / n
    h = np.array([fallback[0], fallback[1], 0.0])
    n = math.hypot(h[0], h[1])
    if n > 1e-12:
        return h / n
    return np.array([1.0, 0.0, 0.0])


# ------------------------------------------------------------------ #
# dynamics
# ------------------------------------------------------------------ #
def _clamp_ladle(world: WorldState, pos: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Keep the bowl sphere inside the cylinder (touching is allowed)."""
    spec, cont = world.ladle_spec, world.container
    c = pos + spec.bowl_radius * bowl_normal(q)
    d = c[:2] - cont.center_xy
    radial = math.hypot(d[0], d[1])
    limit = cont.radius - spec.bowl_radius
    if radial > limit:
        pos = pos.copy()
        pos[:2] -= (radial - limit) * d / radial
    return pos


def _clamp_footprint(world: WorldState, idx: np.ndarray) -> None:
    cont = world.container
    d = world.pos[idx, :2] - cont.center_xy
    radial = np.linalg.norm(d, axis=1)
    limit = cont.radius - world.radius[idx]
    over = radial > limit
    if over.any():
        j = idx[over]
        world.pos[j, :2] = cont.center_xy + d[over] * (limit[over] / radial[over])[:, None]


def _separate(world: WorldState, idx: np.ndarray, passes: int) -> None:
    if len(idx) < 2:
        return
    for _ in range(passes):
        p = world.pos[idx, :2]
        r = world.radius[idx]
        diff = p[:, None, :] - p[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        overlap = (r[:, None] + r[None, :]) - dist
        np.fill_diagonal(overlap, 0.0)
        mask = overlap > 0
        if not mask.any():
            return
        safe = np.where(dist > 1e-12, dist, 1.0)
        unit = diff / safe[:, :, None]
        shift = 0.5 * (np.where(mask, overlap, 0.0)[:, :, None] * unit).sum(axis=1)
        world.pos[idx, :2] = p + shift


def step(world: WorldState, ladle_motion, ladle_orientation, config: SimConfig):
    """Advance ``world`` by one tick in place; returns ``(world, events)``."""
    q = np.asarray(ladle_orientation, dtype=float)
    if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
        raise InvalidParams("ladle orientation must be a unit quaternion")
    q = quat_normalize(q)
    motion = np.asarray(ladle_motion, dtype=float).reshape(3)
    # both noise streams are drawn every tick so the generator stays aligned
    jitter = world.rng.normal(0.0, 1.0, size=3) * config.ladle_noise_sigma
    noise = world.rng.normal(0.0, 1.0, size=(world.n_objects, 2)) * config.noise_sigma
    if world.noise_yaw:
        jitter = rotate_direction(jitter, world.noise_yaw)
        noise = np.column_stack([noise, np.zeros(len(noise))])
        noise = np.array([rotate_direction(v, world.noise_yaw)[:2] for v in noise]).reshape(-1, 2)
    motion = motion + jitter
    speed = float(np.linalg.norm(motion))
    if speed > config.max_motion:
        motion = motion * (config.max_motion / speed)
        speed = config.max_motion
    events = TickEvents()
    spec = world.ladle_spec
    wl = world.container.water_level

    old_ladle = world.ladle
    new_pos = _clamp_ladle(world, old_ladle.position + motion, q)
    world.ladle = Pose(new_pos, q)
    moved = float(np.linalg.norm(new_pos - old_ladle.position))

    was_contained = world.contained.copy()
    if was_contained.any():
        j = np.flatnonzero(was_contained)
        world.pos[j] = new_pos + world.local[j] @ quat_to_matrix(q).T

    free = np.flatnonzero(~world.contained)
    if len(free):
        touching, c = _hull_contacts(world, free)
        world.vel[free] *= config.drag_gamma
        for k in np.flatnonzero(touching):
            i = free[k]
            nrm = _horizontal_normal(world.pos[i] - c, world.pos[i] - new_pos)
            world.vel[i] += config.push_gain * world.push_scale[i] * moved * nrm
            events.ladle_object_contacts.append((int(world.ids[i]), nrm))
        world.pos[free, :2] += world.vel[free, :2] + noise[free]
        _push_out_of_hull(world, free)
        _separate(world, free, config.separation_passes)
        _clamp_footprint(world, free)
        world.pos[free, 2] = wl
        world.vel[free, 2] = 0.0

    tilt = math.degrees(tilt_angle(q))
    rim = _rim_height(world.ladle, spec)
    if len(free):
        local = _to_local(world.ladle, world.pos[free])
        inside = _inside_bowl(local, spec)
        if rim > wl and tilt <= config.spill_tilt_deg and inside.any():
            for k in np.flatnonzero(inside):
                i = free[k]
                world.contained[i] = True
                world.local[i] = local[k]
                world.vel[i] = 0.0
                events.newly_contained.append(int(world.ids[i]))
    if was_contained.any() and tilt > config.spill_tilt_deg and rim <= wl:
        j = np.flatnonzero(was_contained)
        world.contained[j] = False
        world.pos[j, 2] = wl
        world.vel[j] = 0.0
        _clamp_footprint(world, j)
        events.spilled.extend(int(world.ids[i]) for i in j)

    events.ladle_wall_contact = query_ladle_wall_contact(world)
    world.tick += 1
    world.last_events = events
    return world, events


def _push_out_of_hull(world: WorldState, free: np.ndarray) -> None:
    """Project free objects that ended up overlapping the hull back onto it."""
    touching, c = _hull_contacts(world, free)
    if not touching.any():
        return
    rb = world.ladle_spec.bowl_radius
    for k in np.flatnonzero(touching):
        i = free[k]
        reach = rb + world.radius[i]
        dz = world.pos[i, 2] - c[2]
        if abs(dz) >= reach:
            continue
        need = math.sqrt(reach * reach - dz * dz)
        nrm = _horizontal_normal(world.pos[i] - c, world.pos[i] - world.ladle.position)
        world.pos[i, :2] = c[:2] + need * nrm[:2]


# ------------------------------------------------------------------ #
# snapshot export
# ------------------------------------------------------------------ #
def export_snapshot(world: WorldState) -> str:
    """Line-delimited text: one ladle line then one line per object."""
    g = lambda x: format(float(x), ".9g")  # noqa: E731
    p, q = world.ladle.position, world.ladle.orientation
    lines = ["ladle," + ",".join(g(x) for x in (*p, *q))]
    for i in range(world.n_objects):
        x, y, z = world.pos[i]
        lines.append(",".join([str(int(world.ids[i])), world.labels[i],
                               str(int(world.is_target[i])), g(world.radius[i]),
                               g(x), g(y), g(z), str(int(world.contained[i]))]))
    return "\n".join(lines) + "\n"
