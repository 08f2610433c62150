"""Inverse-Jacobian set-point controller and the closed-loop evaluation loop."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from . import linalg
from .environments import Env

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    gain: float = 1.0
    max_steps: int = 200
    null_space: bool = False
    y: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("controller gain must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def control_step(j, x, x_star, cfg: ControllerConfig) -> np.ndarray:
    """Joint-velocity command ``gain * (pinv(J) (x* - x) + (I - pinv(J) J) y)``.

    The null-space term is only added when ``cfg.null_space`` is set.
    """
    j = linalg.as_mat(j, "jacobian")
    err = np.asarray(x_star, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    if err.shape != (j.shape[0],):
        raise ValueError(f"task error has shape {err.shape}, Jacobian is {j.shape}")
    jp = linalg.pinv(j)
    dq = jp @ err
    if cfg.null_space:
        y = np.zeros(j.shape[1]) if cfg.y is None else np.asarray(cfg.y, dtype=np.float64)
        if y.shape != (j.shape[1],):
            raise ValueError("null-space vector has the wrong length")
        dq = dq + (np.eye(j.shape[1]) - jp @ j) @ y
    return cfg.gain * dq


@dataclass
class EvalTrace:
    estimator: str
    seed: int
    target_id: int
    target: np.ndarray
    initial_distance: float
    distances: list[float] = field(default_factory=list)
    jacobians: list[np.ndarray] = field(default_factory=list)
    qs: list[np.ndarray] = field(default_factory=list)
    xs: list[np.ndarray] = field(default_factory=list)
    failure: str | None = None

    @property
    def steps(self) -> int:
        return len(self.distances)

    @property
    def final_distance(self) -> float:
        return self.distances[-1] if self.distances else self.initial_distance


def run_trajectory(env: Env, estimator, target, cfg: ControllerConfig | None = None,
                   seed: int = 0, target_id: int = 0) -> EvalTrace:
    """Reset to ``target`` and run the controller for ``cfg.max_steps`` steps.

    ``qs[t]`` is the configuration where the Jacobian ``jacobians[t]`` was
    evaluated and ``distances[t]`` the distance after applying its command.
    """
    from .estimators import EstimatorContext

    cfg = cfg or ControllerConfig()
    state = env.reset(target)
    trace = EvalTrace(getattr(estimator, "name", type(estimator).__name__), seed, target_id,
                      state.x_star.copy(), env.distance_to_target(state))
    try:
        estimator.begin(env)
        state = env.state
        for _ in range(cfg.max_steps):
            j_hat = estimator.estimate(EstimatorContext.from_state(state))
            cmd = control_step(j_hat, state.x, state.x_star, cfg)
            new = env.step(cmd)
            estimator.feedback(new.q - state.q, new.x - state.x)
            trace.jacobians.append(np.array(j_hat, dtype=np.float64))
            trace.qs.append(state.q)
            trace.xs.append(new.x)
            trace.distances.append(env.distance_to_target(new))
            state = new
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        trace.failure = f"{type(exc).__name__}: {exc}"
        log.warning("trajectory %s/%d/%d aborted: %s", trace.estimator, seed, target_id, exc)
    return trace
