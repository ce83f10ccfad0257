"""Ladle poses, the circular scooping arc and region rotations.

Frames are right-handed with z pointing up.  Quaternions are stored as
``(x, y, z, w)``.  The ladle frame origin is the bottom centre of the bowl and
its +z axis is the bowl opening normal, so the identity orientation is
"bowl up".
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParams, OutOfRange

__all__ = [
    "Pose", "ScoopParams", "RegionRotation",
    "quat_mul", "quat_conj", "quat_rotate", "quat_from_axis_angle",
    "quat_normalize", "quat_slerp", "quat_to_matrix", "yaw_quat", "bowl_normal", "tilt_angle",
    "arc_radius", "arc_center", "prescoop_pose", "arc_waypoint",
    "rotate_about_axis", "region_of", "lift_trigger",
]

UP = np.array([0.0, 0.0, 1.0])
IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


# ------------------------------------------------------------------ #
# quaternion helpers
# ------------------------------------------------------------------ #
def quat_mul(q1, q2) -> np.ndarray:
    """Hamilton product ``q1 * q2`` in (x, y, z, w) order."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]], dtype=float)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise InvalidParams(f"cannot normalize quaternion {q}")
    return q / n


def quat_rotate(q, v) -> np.ndarray:
    """Rotate 3-vector ``v`` by unit quaternion ``q``."""
    x, y, z, w = q
    u = np.array([x, y, z])
    v = np.asarray(v, dtype=float)
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-15:
        return IDENTITY_QUAT.copy()
    s = math.sin(0.5 * angle) / n
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, math.cos(0.5 * angle)])


def quat_slerp(q0, q1, frac: float) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + frac * (q1 - q0))
    th = math.acos(min(d, 1.0))
    s = math.sin(th)
    return (math.sin((1.0 - frac) * th) * q0 + math.sin(frac * th) * q1) / s


def yaw_quat(yaw_deg: float) -> np.ndarray:
    return quat_from_axis_angle(UP, math.radians(yaw_deg))


def bowl_normal(q) -> np.ndarray:
    """Opening direction of the bowl (ladle +z) in the world frame."""
    return quat_rotate(q, UP)


def tilt_angle(q) -> float:
    """Angle in radians between the bowl opening normal and world up."""
    return math.acos(max(-1.0, min(1.0, float(bowl_normal(q)[2]))))


# ------------------------------------------------------------------ #
# value types
# ------------------------------------------------------------------ #
@dataclass
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).reshape(3)
        self.orientation = quat_normalize(np.array(self.orientation, dtype=float).reshape(4))

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())

    def to_world(self, local) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, local)

    def to_local(self, world) -> np.ndarray:
        return quat_rotate(quat_conj(self.orientation), np.asarray(world, dtype=float) - self.position)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))


@dataclass(frozen=True)
class ScoopParams:
    """Pre-scoop parameterisation.

    ``rho`` is the horizontal distance from target centre to the ladle origin,
    ``h`` the height of the arc centre above the target, ``v`` the depth of
    the ladle origin below the target at the arc start and ``azimuth`` the
    horizontal direction from the target toward the ladle start.
    """

    rho: float
    h: float
    v: float
    azimuth: float = 0.0

    def validate(self) -> "ScoopParams":
        vals = (self.rho, self.h, self.v, self.azimuth)
        if not all(math.isfinite(x) for x in vals):
            raise InvalidParams(f"non-finite scoop params {self}")
        if self.rho <= 0 or self.h <= 0 or self.v < 0:
            raise InvalidParams(f"need rho > 0, h > 0, v >= 0; got {self}")
        return self

    @property
    def r_arc(self) -> float:
        return math.hypot(self.rho, self.h + self.v)

    @property
    def theta0(self) -> float:
        return math.atan2(self.rho, self.h + self.v)

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.azimuth), math.sin(self.azimuth), 0.0])


class RegionRotation(enum.IntEnum):
    R0 = 0
    R90 = 90
    R180 = 180
    R270 = 270

    def compose(self, other: "RegionRotation") -> "RegionRotation":
        return RegionRotation((int(self) + int(other)) % 360)

    def inverse(self) -> "RegionRotation":
        return RegionRotation((360 - int(self)) % 360)


# exact cos/sin for the four representable yaws
_COS_SIN = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}


# ------------------------------------------------------------------ #
# arc geometry
# ------------------------------------------------------------------ #
def arc_radius(params: ScoopParams) -> float:
    return params.r_arc


def arc_center(target_pos, params: ScoopParams) -> np.ndarray:
    return np.asarray(target_pos, dtype=float) + np.array([0.0, 0.0, params.h])


def _arc_pose(target_pos, params: ScoopParams, theta: float) -> Pose:
    u = params.direction
    c = arc_center(target_pos, params)
    r = params.r_arc
    pos = c + r * (math.sin(theta) * u - math.cos(theta) * UP)
    axis = np.array([u[1], -u[0], 0.0])  # u x z, tilts +z toward -u
    return Pose(pos, quat_from_axis_angle(axis, theta))


def prescoop_pose(target_pos, params: ScoopParams) -> Pose:
    """Ladle pose at the start of the arc, bowl opening facing the arc centre."""
    params.validate()
    # explicit form keeps the start point exact rather than via sin/cos
    pos = (np.asarray(target_pos, dtype=float) + params.rho * params.direction
           - np.array([0.0, 0.0, params.v]))
    pose = _arc_pose(target_pos, params, params.theta0)
    return Pose(pos, pose.orientation)


def arc_waypoint(target_pos, params: ScoopParams, t: float) -> Pose:
    """Pose at fraction ``t`` of the arc; ``t=1`` is bowl-up under the target."""
    params.validate()
    if not (0.0 <= t <= 1.0):
        raise OutOfRange(f"arc fraction {t} outside [0, 1]")
    if t == 0.0:
        return prescoop_pose(target_pos, params)
    return _arc_pose(target_pos, params, (1.0 - t) * params.theta0)


# ------------------------------------------------------------------ #
# region canonicalisation
# ------------------------------------------------------------------ #
def _rot_xy(vec, yaw: int) -> np.ndarray:
    c, s = _COS_SIN[yaw]
    x, y, z = vec
    return np.array([c * x - s * y, s * x + c * y, z])


def rotate_about_axis(value, yaw, center=(0.0, 0.0, 0.0)):
    """Rotate ``value`` by a region yaw about the vertical axis through ``center``.

    Positions (plain 3-vectors and pose positions) rotate about ``center``;
    displacement-like fields of observation/action vectors rotate about the
    origin; quaternions are left-multiplied by the yaw rotation.
    """
    from .vectors import ActionVec, ObservationVec

    yaw = int(RegionRotation(yaw))
    center = np.asarray(center, dtype=float)
    if isinstance(value, Pose):
        if yaw == 0:
            return value.copy()
        pos = center + _rot_xy(value.position - center, yaw)
        return Pose(pos, quat_mul(yaw_quat(yaw), value.orientation))
    if isinstance(value, ObservationVec):
        if yaw == 0:
            return value.copy()
        return ObservationVec(_rot_xy(value.p_relative, yaw), value.r_target,
                              value.prescoop.copy(), _rot_xy(value.v_target, yaw))
    if isinstance(value, ActionVec):
        if yaw == 0:
            return value.copy()
        return ActionVec(_rot_xy(value.d_ladle, yaw),
                         quat_mul(yaw_quat(yaw), value.q_ladle),
                         _rot_xy(value.d_delta, yaw))
    vec = np.asarray(value, dtype=float)
    if vec.shape != (3,):
        raise TypeError(f"cannot rotate value of shape {vec.shape}")
    if yaw == 0:
        return vec.copy()
    return center + _rot_xy(vec - center, yaw)


def rotate_direction(vec, yaw) -> np.ndarray:
    """Rotate a free vector (no translation) by a region yaw."""
    return _rot_xy(np.asarray(vec, dtype=float), int(RegionRotation(yaw)))


def region_of(target_pos, container_center, base_azimuth: float,
              near_span_deg: float = 60.0) -> RegionRotation:
    """Yaw that maps the target's container sector onto the canonical one.

    ``base_azimuth`` points from the container centre toward the robot base.
    The sector around it (``near_span_deg`` wide) needs 180, the sector
    opposite needs none, and the counter-clockwise / clockwise lateral sectors
    need 90 and 270.  A target on the axis resolves to 0.
    """
    d = np.asarray(target_pos, dtype=float)[:2] - np.asarray(container_center, dtype=float)[:2]
    if math.hypot(d[0], d[1]) < 1e-12:
        return RegionRotation.R0
    rel = math.degrees(math.atan2(d[1], d[0]) - base_azimuth)
    rel = (rel + 180.0) % 360.0 - 180.0  # [-180, 180)
    half_near = 0.5 * near_span_deg
    lateral = (360.0 - near_span_deg) / 3.0
    if abs(rel) <= half_near:
        return RegionRotation.R180
    if half_near < rel <= half_near + lateral:
        return RegionRotation.R90
    if -(half_near + lateral) <= rel < -half_near:
        return RegionRotation.R270
    return RegionRotation.R0


def lift_trigger(target_pos, ladle: Pose, horiz_tol: float, vert_window: float) -> bool:
    """True when the bowl sits close enough under the target to start lifting."""
    target_pos = np.asarray(target_pos, dtype=float)
    dx = target_pos[0] - ladle.position[0]
    dy = target_pos[1] - ladle.position[1]
    dz = target_pos[2] - ladle.position[2]
    return math.hypot(dx, dy) <= horiz_tol and 0.0 < dz <= vert_window
