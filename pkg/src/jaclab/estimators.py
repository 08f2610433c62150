"""Jacobian estimators behind a common begin/estimate/feedback interface.

``begin`` runs once per trajectory (after the environment reset), ``estimate``
returns an (m, n) Jacobian for the current context, and ``feedback`` receives
the observed joint and feature changes after each command.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .collection import knn_indices, ordered_pairs
from .environments import Env, EnvState
from .neural import Mlp, embed, forward, input_jacobian, joint_space_jacobian


@dataclass(frozen=True)
class EstimatorContext:
    q: np.ndarray
    x: np.ndarray
    x_star: np.ndarray
    q_dot: np.ndarray

    @classmethod
    def from_state(cls, s: EnvState) -> "EstimatorContext":
        return cls(s.q, s.x, s.x_star, s.q_dot)


class Estimator:
    name = "estimator"

    def begin(self, env: Env) -> None:
        pass

    def estimate(self, ctx: EstimatorContext) -> np.ndarray:
        raise NotImplementedError

    def feedback(self, dq: np.ndarray, dx: np.ndarray) -> None:
        pass


class TrueJacobian(Estimator):
    name = "TJ"

    def __init__(self, kinematics):
        self.kinematics = kinematics

    def estimate(self, ctx):
        return self.kinematics.jacobian(ctx.q)


# ---------------------------------------------------------------------------
# Broyden


@dataclass
class BroydenState:
    j_hat: np.ndarray
    alpha: float = 0.1
    gate: float = 0.01


def broyden_init(env: Env, probe_angle: float = 0.1) -> np.ndarray:
    """Finite-difference Jacobian from one probe per joint, all from the same pose.

    The environment is returned to the starting pose afterwards.
    """
    if abs(probe_angle) < 1e-12:
        raise ValueError("probe angle too small for a finite-difference estimate")
    q0 = env.q
    x0 = env.x
    cols = []
    for j in range(env.n):
        q = q0.copy()
        q[j] += probe_angle
        x = env.set_joints(q).x
        cols.append((x - x0) / (q[j] - q0[j]))
    env.set_joints(q0)
    return np.stack(cols, axis=1)


def broyden_update(state: BroydenState, dq, de) -> BroydenState:
    """Rank-one secant correction, skipped when ``|dq|^2`` is below the gate."""
    dq = np.asarray(dq, dtype=np.float64)
    de = np.asarray(de, dtype=np.float64)
    nrm2 = float(dq @ dq)
    if nrm2 < state.gate:
        return state
    resid = de - state.j_hat @ dq
    j_new = state.j_hat + state.alpha * np.outer(resid, dq) / nrm2
    return BroydenState(j_new, state.alpha, state.gate)


class Broyden(Estimator):
    name = "Broyden"

    def __init__(self, alpha: float = 0.1, gate: float = 0.01, probe_angle: float = 0.1,
                 init: np.ndarray | None = None):
        self.alpha = alpha
        self.gate = gate
        self.probe_angle = probe_angle
        self.state = None if init is None else BroydenState(np.array(init, dtype=float), alpha, gate)

    def begin(self, env):
        self.state = BroydenState(broyden_init(env, self.probe_angle), self.alpha, self.gate)

    def estimate(self, ctx):
        if self.state is None:
            raise RuntimeError("Broyden estimator used before initialisation")
        return self.state.j_hat.copy()

    def feedback(self, dq, dx):
        # features are tracked directly, so the secant uses the change in x
        self.state = broyden_update(self.state, dq, dx)


# ---------------------------------------------------------------------------
# Local linear k-NN


def llknn_estimate(dataset, q, k: int) -> np.ndarray:
    """Least-squares hyperplane through the pairwise differences of q's k-NN.

    ``dataset`` needs ``q`` and ``x`` sample arrays (a ``Dataset`` works).
    """
    q_data = np.asarray(dataset.q, dtype=np.float64)
    if q_data.shape[0] == 0:
        raise ValueError("empty neighbourhood: dataset has no samples")
    nb = knn_indices(q_data, np.asarray(q, dtype=np.float64)[None], k)[0]
    return fit_hyperplane(np.asarray(dataset.x)[nb], q_data[nb])


def fit_hyperplane(xs: np.ndarray, qs: np.ndarray) -> np.ndarray:
    pi, pj = ordered_pairs(xs.shape[0])
    dx = xs[pi] - xs[pj]
    dq = qs[pi] - qs[pj]
    return (dx.T @ dq) @ linalg.pinv(dq.T @ dq)


class LocalLinearKnn(Estimator):
    name = "LL-KNN"

    def __init__(self, dataset, k: int = 128):
        self.dataset = dataset
        self.k = k

    def estimate(self, ctx):
        return llknn_estimate(self.dataset, ctx.q, self.k)


# ---------------------------------------------------------------------------
# Neural


def neural_jacobian_estimate(model: Mlp, ctx: EstimatorContext, m: int, n: int) -> np.ndarray:
    if model.spec.output_dim != m * n:
        raise ValueError(f"model emits {model.spec.output_dim} values, need {m}x{n}")
    return forward(model, embed(ctx.q, model.spec.embedding)).reshape(m, n)


def neural_kinematics_estimate(model: Mlp, ctx: EstimatorContext) -> np.ndarray:
    if model.spec.output_dim != ctx.x.shape[0]:
        raise ValueError(f"model predicts {model.spec.output_dim} features, state has {ctx.x.shape[0]}")
    kind = model.spec.embedding
    jac_in = input_jacobian(model, embed(ctx.q, kind))
    return joint_space_jacobian(jac_in, ctx.q, kind)


class NeuralJacobian(Estimator):
    name = "NJ"

    def __init__(self, model: Mlp, m: int, n: int, name: str | None = None):
        self.model, self.m, self.n = model, m, n
        if name:
            self.name = name

    def estimate(self, ctx):
        return neural_jacobian_estimate(self.model, ctx, self.m, self.n)


class NeuralKinematics(Estimator):
    name = "NK"

    def __init__(self, model: Mlp, name: str | None = None):
        self.model = model
        if name:
            self.name = name

    def estimate(self, ctx):
        return neural_kinematics_estimate(self.model, ctx)
