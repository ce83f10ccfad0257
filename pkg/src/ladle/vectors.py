"""The 10-component policy observation and action vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OBS_DIM = 10
ACT_DIM = 10
ZERO_DIRECTION_EPS = 1e-8

OBS_FIELDS = ("p_rel_x", "p_rel_y", "p_rel_z", "r_target", "rho", "h", "v",
              "v_target_x", "v_target_y", "v_target_z")
ACT_FIELDS = ("d_x", "d_y", "d_z", "q_x", "q_y", "q_z", "q_w",
              "delta_x", "delta_y", "delta_z")


def _vec3(x) -> np.ndarray:
    return np.array(x, dtype=float).reshape(3)


def _unit_or_zero(x: np.ndarray, eps: float) -> np.ndarray:
    n = float(np.linalg.norm(x))
    if n < eps:
        return np.zeros_like(x)
    if abs(n - 1.0) <= 4e-16:
        # already unit: dividing again could flip the last bit
        return x.copy()
    return x / n


@dataclass
class ObservationVec:
    """Target position relative to the ladle, target radius, pre-scoop
    (rho, h, v) and the target displacement over the previous tick."""

    p_relative: np.ndarray
    r_target: float
    prescoop: np.ndarray
    v_target: np.ndarray

    def __post_init__(self):
        self.p_relative = _vec3(self.p_relative)
        self.r_target = float(self.r_target)
        self.prescoop = _vec3(self.prescoop)
        self.v_target = _vec3(self.v_target)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.p_relative, [self.r_target], self.prescoop, self.v_target])

    @classmethod
    def from_array(cls, a) -> "ObservationVec":
        a = np.asarray(a, dtype=float).reshape(OBS_DIM)
        return cls(a[0:3], a[3], a[4:7], a[7:10])

    def copy(self) -> "ObservationVec":
        return ObservationVec.from_array(self.to_array())


@dataclass
class ActionVec:
    """Main-motion direction, bowl orientation quaternion (x, y, z, w) and
    offset movement."""

    d_ladle: np.ndarray
    q_ladle: np.ndarray
    d_delta: np.ndarray

    def __post_init__(self):
        self.d_ladle = _vec3(self.d_ladle)
        self.q_ladle = np.array(self.q_ladle, dtype=float).reshape(4)
        self.d_delta = _vec3(self.d_delta)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.d_ladle, self.q_ladle, self.d_delta])

    @classmethod
    def from_array(cls, a) -> "ActionVec":
        a = np.asarray(a, dtype=float).reshape(ACT_DIM)
        return cls(a[0:3], a[3:7], a[7:10])

    def copy(self) -> "ActionVec":
        return ActionVec.from_array(self.to_array())

    @property
    def direction_is_zero(self) -> bool:
        return float(np.linalg.norm(self.d_ladle)) < ZERO_DIRECTION_EPS

    def postprocess(self) -> "ActionVec":
        """Unit direction (or exact zero below the flag threshold) and a unit
        quaternion with non-negative w."""
        d = _unit_or_zero(self.d_ladle, ZERO_DIRECTION_EPS)
        q = _unit_or_zero(self.q_ladle, 1e-12)
        if not q.any():
            q = np.array([0.0, 0.0, 0.0, 1.0])
        if q[3] < 0:
            q = -q
        return ActionVec(d, q, self.d_delta.copy())


def make_observation(target_pos, ladle_pos, r_target: float, prescoop,
                     prev_target_pos=None) -> ObservationVec:
    """Observation from raw positions; the first tick (no previous target
    position) has zero target motion."""
    target_pos = np.asarray(target_pos, dtype=float)
    v = np.zeros(3) if prev_target_pos is None else target_pos - np.asarray(prev_target_pos, dtype=float)
    return ObservationVec(target_pos - np.asarray(ladle_pos, dtype=float), r_target, prescoop, v)


def decompose_motion(motion, v_target, s: float):
    """Split a ladle displacement into ``(d_ladle, d_delta)`` such that
    ``s * d_ladle + d_delta + v_target == motion``."""
    main = np.asarray(motion, dtype=float) - np.asarray(v_target, dtype=float)
    n = float(np.linalg.norm(main))
    if n < ZERO_DIRECTION_EPS:
        return np.zeros(3), main.copy()
    d = main / n
    return d, main - s * d


def compose_motion(action: ActionVec, v_target, s: float) -> np.ndarray:
    """Executed ladle displacement ``s * d_ladle + d_delta + v_target``.

    A zero-flagged direction contributes nothing."""
    d = np.zeros(3) if action.direction_is_zero else action.d_ladle
    return s * d + action.d_delta + np.asarray(v_target, dtype=float)
