"""Forward kinematics for DH chains, multi-point features, the planar 2-link
arm, and exact geometric Jacobians."""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DhRow:
    alpha: float
    a: float
    d: float
    theta_offset: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.a, self.d, self.theta_offset)):
            raise ValueError(f"non-finite DH parameter in {self}")


@dataclass(frozen=True)
class DhChain:
    rows: tuple[DhRow, ...]
    actuated: tuple[bool, ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("DH chain must have at least one row")
        if len(self.actuated) != len(self.rows):
            raise ValueError("actuated flags must match the number of rows")

    @property
    def n_joints(self) -> int:
        return sum(self.actuated)

    @classmethod
    def from_dicts(cls, rows: Sequence[dict]) -> "DhChain":
        """Build a chain from config rows with keys alpha/a/d/theta_offset[/actuated]."""
        parsed = []
        flags = []
        for r in rows:
            parsed.append(DhRow(float(r["alpha"]), float(r["a"]), float(r["d"]),
                                float(r.get("theta_offset", 0.0))))
            flags.append(bool(r.get("actuated", True)))
        return cls(tuple(parsed), tuple(flags))


def kinova_chain() -> DhChain:
    """The 7-DOF Kinova Gen3 chain; row 0 is the fixed base transform."""
    pi = math.pi
    rows = (
        DhRow(pi, 0.0, 0.0, 0.0),
        DhRow(pi / 2, 0.0, -(0.1564 + 0.1284), 0.0),
        DhRow(pi / 2, 0.0, -(0.0054 + 0.0064), pi),
        DhRow(pi / 2, 0.0, -(0.2104 + 0.2104), pi),
        DhRow(pi / 2, 0.0, -(0.0064 + 0.0064), pi),
        DhRow(pi / 2, 0.0, -(0.2084 + 0.1059), pi),
        DhRow(pi / 2, 0.0, 0.0, pi),
        DhRow(pi, 0.0, -(0.1059 + 0.0615), pi),
    )
    return DhChain(rows, (False,) + (True,) * 7)


SINGLE_POINT = np.array([[0.0, 0.0, 0.0, 1.0]])
MULTI_POINTS = np.array([
    [0.0, 0.0, 0.0, 1.0],
    [0.1, 0.0, 0.0, 1.0],
    [0.0, 0.1, 0.0, 1.0],
    [0.0, 0.0, 0.1, 1.0],
])


def dh_transform(row: DhRow, q: float) -> np.ndarray:
    theta = q + row.theta_offset
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    return np.array([
        [ct, -ca * st, sa * st, row.a * ct],
        [st, ca * ct, -sa * ct, row.a * st],
        [0.0, sa, ca, row.d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _joint_values(chain: DhChain, q) -> list[float]:
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != chain.n_joints:
        raise ValueError(f"expected {chain.n_joints} joint values, got {q.shape[0]}")
    it = iter(q.tolist())
    return [next(it) if act else 0.0 for act in chain.actuated]


def _frames(chain: DhChain, q) -> list[np.ndarray]:
    # frames[i] is the base-to-frame transform before row i is applied
    frames = [np.eye(4)]
    for row, qi in zip(chain.rows, _joint_values(chain, q)):
        frames.append(frames[-1] @ dh_transform(row, qi))
    return frames


def forward_kinematics(chain: DhChain, q) -> np.ndarray:
    return _frames(chain, q)[-1]


def _check_points(pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.shape[1] != 4 or not np.all(pts[:, 3] == 1.0):
        raise ValueError("points must be homogeneous 4-vectors with last component 1")
    return pts


def point_features(chain: DhChain, q, pts=SINGLE_POINT) -> np.ndarray:
    pts = _check_points(pts)
    t = forward_kinematics(chain, q)
    return (pts @ t.T)[:, :3].ravel()


def true_jacobian(chain: DhChain, q, pts=SINGLE_POINT) -> np.ndarray:
    """Position Jacobian of every tracked point, stacked to (3*len(pts), n_joints).

    Each revolute joint turns about the z axis of the frame preceding its row, so
    the column for joint j and point p is z_j x (p - o_j).
    """
    pts = _check_points(pts)
    frames = _frames(chain, q)
    world = (pts @ frames[-1].T)[:, :3]
    cols = []
    for i, act in enumerate(chain.actuated):
        if not act:
            continue
        z = frames[i][:3, 2]
        o = frames[i][:3, 3]
        cols.append(np.cross(z, world - o).ravel())
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class PlanarArm2:
    l1: float = 0.3143
    l2: float = 0.1774

    def __post_init__(self):
        if not (self.l1 > 0 and self.l2 > 0):
            raise ValueError("link lengths must be positive")

    def as_chain(self) -> DhChain:
        return DhChain((DhRow(0.0, self.l1, 0.0), DhRow(0.0, self.l2, 0.0)), (True, True))


def planar_fk(arm: PlanarArm2, q) -> np.ndarray:
    q1, q2 = (float(v) for v in q)
    return np.array([
        arm.l1 * math.cos(q1) + arm.l2 * math.cos(q1 + q2),
        arm.l1 * math.sin(q1) + arm.l2 * math.sin(q1 + q2),
    ])


def planar_jacobian(arm: PlanarArm2, q) -> np.ndarray:
    q1, q2 = (float(v) for v in q)
    s1, c1 = math.sin(q1), math.cos(q1)
    s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
    return np.array([
        [-arm.l1 * s1 - arm.l2 * s12, -arm.l2 * s12],
        [arm.l1 * c1 + arm.l2 * c12, arm.l2 * c12],
    ])


class ChainKinematics:
    """Feature map and Jacobian for a DH chain tracking a fixed point set."""

    def __init__(self, chain: DhChain, points=SINGLE_POINT):
        self.chain = chain
        self.points = _check_points(points)
        self.n = chain.n_joints
        self.m = 3 * self.points.shape[0]
        self.n_points = self.points.shape[0]

    def features(self, q) -> np.ndarray:
        return point_features(self.chain, q, self.points)

    def jacobian(self, q) -> np.ndarray:
        return true_jacobian(self.chain, q, self.points)


class PlanarKinematics:
    def __init__(self, arm: PlanarArm2 | None = None):
        self.arm = arm or PlanarArm2()
        self.n = 2
        self.m = 2
        self.n_points = 1

    def features(self, q) -> np.ndarray:
        return planar_fk(self.arm, q)

    def jacobian(self, q) -> np.ndarray:
        return planar_jacobian(self.arm, q)


def finite_difference_jacobian(f, q, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``q``; used as a test oracle."""
    q = np.asarray(q, dtype=np.float64)
    cols = []
    for j in range(q.shape[0]):
        e = np.zeros_like(q)
        e[j] = h
        cols.append((np.asarray(f(q + e)) - np.asarray(f(q - e))) / (2 * h))
    return np.stack(cols, axis=1)
