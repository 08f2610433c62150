"""Kinematic simulators: 7-DOF single-point, 7-DOF multi-point and 2-DOF planar."""
from __future__ import annotations

from dataclasses import dataclass
import enum
import math

import numpy as np

from .kinematics import (
    MULTI_POINTS, SINGLE_POINT, ChainKinematics, DhChain, PlanarArm2, PlanarKinematics,
    kinova_chain,
)


class EnvKind(str, enum.Enum):
    SINGLE_POINT7 = "single_point7"
    MULTI_POINT7 = "multi_point7"
    PLANAR2 = "planar2"

    @property
    def dims(self) -> tuple[int, int]:
        """(feature dim m, joint dim n)."""
        return {"single_point7": (3, 7), "multi_point7": (12, 7), "planar2": (2, 2)}[self.value]


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    initial_q: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class EnvState:
    q: np.ndarray
    x: np.ndarray
    q_dot: np.ndarray
    x_star: np.ndarray

    @property
    def cos_q(self) -> np.ndarray:
        return np.cos(self.q)

    @property
    def sin_q(self) -> np.ndarray:
        return np.sin(self.q)

    def packed(self) -> np.ndarray:
        """Observation vector (x, cos q, sin q, q_dot, x*)."""
        return np.concatenate([self.x, self.cos_q, self.sin_q, self.q_dot, self.x_star])


class Env:
    """Euler-integrated joint-velocity simulator around a kinematic model."""

    def __init__(self, kind: EnvKind | str, sim: SimConfig | None = None,
                 chain: DhChain | None = None, arm: PlanarArm2 | None = None):
        self.kind = EnvKind(kind)
        self.sim = sim or SimConfig()
        if self.kind is EnvKind.PLANAR2:
            self.kinematics = PlanarKinematics(arm)
        else:
            pts = MULTI_POINTS if self.kind is EnvKind.MULTI_POINT7 else SINGLE_POINT
            self.kinematics = ChainKinematics(chain or kinova_chain(), pts)
        self.m, self.n = self.kinematics.m, self.kinematics.n
        if (self.m, self.n) != self.kind.dims:
            raise ValueError(f"kinematics dims {(self.m, self.n)} do not match {self.kind.value}")
        if self.sim.initial_q is None:
            self.initial_q = np.zeros(self.n)
        else:
            self.initial_q = np.asarray(self.sim.initial_q, dtype=np.float64)
            if self.initial_q.shape != (self.n,):
                raise ValueError(f"initial_q must have {self.n} entries")
        self._q = self.initial_q.copy()
        self._q_dot = np.zeros(self.n)
        self._x = self.kinematics.features(self._q)
        self._x_star = self._x.copy()

    @property
    def state(self) -> EnvState:
        return EnvState(self._q.copy(), self._x.copy(), self._q_dot.copy(), self._x_star.copy())

    @property
    def q(self) -> np.ndarray:
        return self._q.copy()

    @property
    def x(self) -> np.ndarray:
        return self._x.copy()

    def home_features(self) -> np.ndarray:
        return self.kinematics.features(self.initial_q)

    def reset(self, target) -> EnvState:
        target = np.asarray(target, dtype=np.float64)
        if target.shape != (self.m,):
            raise ValueError(f"target must have {self.m} entries, got {target.shape}")
        self._q = self.initial_q.copy()
        self._q_dot = np.zeros(self.n)
        self._x = self.kinematics.features(self._q)
        self._x_star = target.copy()
        return self.state

    def step(self, q_dot) -> EnvState:
        q_dot = np.asarray(q_dot, dtype=np.float64)
        if q_dot.shape != (self.n,):
            raise ValueError(f"command must have {self.n} entries, got {q_dot.shape}")
        if not np.all(np.isfinite(q_dot)):
            raise ValueError("non-finite joint velocity command")
        self._q = self._q + self.sim.dt * q_dot
        self._q_dot = q_dot.copy()
        self._x = self.kinematics.features(self._q)
        return self.state

    def set_joints(self, q) -> EnvState:
        """Move directly to ``q`` (used by probing estimators); clears q_dot."""
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.n,):
            raise ValueError(f"q must have {self.n} entries")
        self._q = q.copy()
        self._q_dot = np.zeros(self.n)
        self._x = self.kinematics.features(self._q)
        return self.state

    def true_jacobian(self, q=None) -> np.ndarray:
        return self.kinematics.jacobian(self._q if q is None else q)

    def sample_joint_target(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind is EnvKind.PLANAR2:
            return np.array([rng.uniform(-2.0, 2.0), rng.uniform(-1.5, 1.5)])
        return rng.uniform(-math.pi, math.pi, size=self.n)

    def sample_target(self, rng: np.random.Generator) -> np.ndarray:
        """Features of uniformly drawn joint angles."""
        return self.kinematics.features(self.sample_joint_target(rng))

    def distance(self, x, x_star) -> float:
        diff = (np.asarray(x) - np.asarray(x_star)).reshape(self.kinematics.n_points, -1)
        return float(np.sum(np.linalg.norm(diff, axis=1)))

    def distance_to_target(self, state: EnvState | None = None) -> float:
        """Euclidean distance; summed over tracked points for multi-point."""
        s = state or self.state
        return self.distance(s.x, s.x_star)


def make_env(kind: EnvKind | str, dt: float = 0.05, initial_q=None) -> Env:
    iq = None if initial_q is None else tuple(float(v) for v in initial_q)
    return Env(kind, SimConfig(dt=dt, initial_q=iq))
