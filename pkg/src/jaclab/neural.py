"""Numpy multilayer perceptron with backpropagation and Adam, plus the two
Jacobian-learning objectives: forward-model MSE and the k-NN hyperplane loss.

Weights are stored as ``(out, in)`` matrices so a layer computes ``W @ x + b``;
batched code works on row-stacked inputs, ``X @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from . import linalg

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")
EMBEDDINGS = ("raw", "trig")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int = 2
    hidden_width: int = 100
    activation: str = "relu"
    seed: int = 0
    embedding: str = "raw"

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0 or self.hidden_width <= 0:
            raise ValueError("layer dimensions must be positive")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"embedding must be one of {EMBEDDINGS}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = self.spec.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count does not match spec")
        for w, b, n_in, n_out in zip(self.weights, self.biases, sizes[:-1], sizes[1:]):
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise ValueError(f"layer shape {w.shape}/{b.shape} != ({n_out}, {n_in})")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: list[np.ndarray]) -> "Mlp":
        return Mlp(self.spec, [p.copy() for p in params[0::2]], [p.copy() for p in params[1::2]])

    def copy(self) -> "Mlp":
        return self.with_params(self.params)


def init_mlp(spec: MlpSpec) -> Mlp:
    """Glorot-uniform weights and zero biases drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    sizes = spec.layer_sizes
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(spec, weights, biases)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _as_batch(mlp: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != mlp.spec.input_dim:
        raise ValueError(f"expected input dim {mlp.spec.input_dim}, got {x.shape[1]}")
    return x, single


def _forward_cache(mlp: Mlp, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else _act(mlp.spec.activation, z)
        acts.append(h)
    return pre, acts


def forward(mlp: Mlp, x) -> np.ndarray:
    x, single = _as_batch(mlp, x)
    out = _forward_cache(mlp, x)[1][-1]
    return out[0] if single else out


def input_jacobian(mlp: Mlp, x) -> np.ndarray:
    """d(output)/d(input): (out, in) for one input, (batch, out, in) for a batch."""
    x, single = _as_batch(mlp, x)
    pre, acts = _forward_cache(mlp, x)
    jac = np.broadcast_to(mlp.weights[0], (x.shape[0],) + mlp.weights[0].shape)
    for i in range(1, len(mlp.weights)):
        d = _act_grad(mlp.spec.activation, pre[i - 1], acts[i])
        jac = mlp.weights[i] @ (d[:, :, None] * jac)
    return jac[0] if single else np.ascontiguousarray(jac)


def _backward(mlp: Mlp, pre, acts, dout: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = [None] * (2 * len(mlp.weights))  # type: ignore[list-item]
    delta = dout
    for i in range(len(mlp.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ mlp.weights[i]) * _act_grad(mlp.spec.activation, pre[i - 1], acts[i])
    return grads


def _add_weight_decay(mlp: Mlp, grads: list[np.ndarray], weight_decay: float) -> None:
    if weight_decay:
        for i, w in enumerate(mlp.weights):
            grads[2 * i] = grads[2 * i] + weight_decay * w


def mse_backprop(mlp: Mlp, inputs, targets, weight_decay: float = 0.0):
    """Mean-over-batch squared error and its parameter gradients.

    Returns ``(loss, grads)`` with grads ordered like ``mlp.params``. The decay
    term ``weight_decay * W`` is added to weight gradients but not to the loss.
    """
    x, _ = _as_batch(mlp, inputs)
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if t.shape != (x.shape[0], mlp.spec.output_dim):
        raise ValueError(f"targets shape {t.shape} does not match batch/output dims")
    pre, acts = _forward_cache(mlp, x)
    err = acts[-1] - t
    loss = float(np.sum(err * err) / x.shape[0])
    grads = _backward(mlp, pre, acts, 2.0 * err / x.shape[0])
    _add_weight_decay(mlp, grads, weight_decay)
    return loss, grads


# ---------------------------------------------------------------------------
# Hyperplane (secant) objective


def hyperplane_loss_and_grad(j_pred, dx, dq, beta: float = 0.0):
    """Sum of squared secant residuals for one Jacobian over its neighbour pairs.

    ``dx`` is (pairs, m) and ``dq`` is (pairs, n). With ``beta > 0`` the inverse
    residual ``dq - pinv(J) dx`` is added and differentiated through the
    pseudo-inverse, which requires a full-rank ``J``.
    """
    j = linalg.as_mat(j_pred, "j_pred")
    dx = np.atleast_2d(np.asarray(dx, dtype=np.float64))
    dq = np.atleast_2d(np.asarray(dq, dtype=np.float64))
    if dx.shape[0] == 0 or dx.shape[0] != dq.shape[0]:
        raise ValueError("pairs must be nonempty with matching counts")
    if dx.shape[1] != j.shape[0] or dq.shape[1] != j.shape[1]:
        raise ValueError(f"pair dims {dx.shape[1]}/{dq.shape[1]} do not match J {j.shape}")
    loss, grad, ok = hyperplane_batch(j[None], dx[None], dq[None], beta)
    if not ok[0]:
        raise linalg.RankDeficiencyError("J is rank deficient; inverse term has no gradient")
    return float(loss[0]), grad[0]


def hyperplane_batch(js: np.ndarray, dx: np.ndarray, dq: np.ndarray, beta: float):
    """Vectorised hyperplane loss over a stack of anchors.

    Shapes: ``js`` (B, m, n), ``dx`` (B, P, m), ``dq`` (B, P, n). Returns
    ``(loss (B,), grad (B, m, n), full_rank (B,))``. Anchors that are rank
    deficient keep their inverse term in the loss but get only the forward
    gradient; the caller decides what to do about them.
    """
    r = dx - dq @ np.swapaxes(js, 1, 2)
    loss = np.einsum("bpi,bpi->b", r, r)
    grad = -2.0 * np.swapaxes(r, 1, 2) @ dq
    ok = np.ones(js.shape[0], dtype=bool)
    if beta:
        res = linalg.svd_batched(js)
        shape = js.shape[1:]
        jp = linalg._pinv_from_svd(res, shape)
        smax = res.sigma[:, 0]
        ok = (smax > 0) & (res.sigma[:, -1] > 100.0 * linalg.default_tol(smax, shape))
        s = dq - dx @ np.swapaxes(jp, 1, 2)
        loss = loss + beta * np.einsum("bpi,bpi->b", s, s)
        g_pinv = -2.0 * np.swapaxes(s, 1, 2) @ dx
        inv_grad = linalg.pinv_adjoint(js, jp, g_pinv)
        grad = grad + beta * np.where(ok[:, None, None], inv_grad, 0.0)
    return loss, grad, ok


def hyperplane_backprop(mlp: Mlp, inputs, dx, dq, beta: float, weight_decay: float = 0.0):
    """Mean-over-anchors hyperplane loss and gradients w.r.t. network parameters.

    The network output for each anchor is read row-major as an (m, n) Jacobian.
    """
    x, _ = _as_batch(mlp, inputs)
    dx = np.asarray(dx, dtype=np.float64)
    dq = np.asarray(dq, dtype=np.float64)
    m, n = dx.shape[2], dq.shape[2]
    if mlp.spec.output_dim != m * n:
        raise ValueError(f"network output {mlp.spec.output_dim} != m*n = {m * n}")
    pre, acts = _forward_cache(mlp, x)
    js = acts[-1].reshape(-1, m, n)
    loss, grad, ok = hyperplane_batch(js, dx, dq, beta)
    bsz = x.shape[0]
    grads = _backward(mlp, pre, acts, grad.reshape(bsz, m * n) / bsz)
    _add_weight_decay(mlp, grads, weight_decay)
    return float(loss.mean()), grads, ok


# ---------------------------------------------------------------------------
# Optimisation


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    weight_decay: float = 0.0
    validation_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class TrainResult:
    model: Mlp
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")


def split_indices(n: int, cfg: TrainConfig, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(n * cfg.validation_fraction))), n - 1)
    return perm[: n - n_val], perm[n - n_val:]


def _fit(mlp: Mlp, n: int, cfg: TrainConfig, batch_loss, val_loss,
         on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    if n < 2:
        raise TrainingError("need at least 2 samples to split train/validation")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_indices(n, cfg, rng)
    result = TrainResult(model=mlp.copy())
    params = mlp.params
    state = AdamState.zeros_like(params)
    current = mlp
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(train_idx.shape[0])]
        total = 0.0
        for start in range(0, order.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_loss(current, idx, epoch)
            total += loss * idx.shape[0]
            params, state = adam_step(params, grads, state, cfg)
            current = current.with_params(params)
        train_loss = total / order.shape[0]
        vloss = val_loss(current, val_idx)
        result.history.append((epoch, train_loss, vloss))
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, vloss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, vloss)
        if epoch == 1 or vloss < result.best_val_loss:
            result.best_val_loss = vloss
            result.best_epoch = epoch
            result.model = current.copy()
    return result


def train_neural_kinematics(inputs, targets, spec: MlpSpec, cfg: TrainConfig,
                            on_epoch=None) -> TrainResult:
    """Fit ``x = f(input)`` by MSE and keep the best-validation snapshot."""
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise TrainingError("empty dataset")
    if x.shape[0] != t.shape[0]:
        raise ValueError("inputs and targets differ in length")
    mlp = init_mlp(spec)

    def batch_loss(net, idx, _epoch):
        return mse_backprop(net, x[idx], t[idx], cfg.weight_decay)

    def val_loss(net, idx):
        err = forward(net, x[idx]) - t[idx]
        return float(np.sum(err * err) / idx.shape[0])

    return _fit(mlp, x.shape[0], cfg, batch_loss, val_loss, on_epoch)


RANK_FAILURE_EPOCHS = 3


def train_neural_jacobian(inputs, pairs, spec: MlpSpec, cfg: TrainConfig, beta: float = 0.0,
                          on_epoch=None) -> TrainResult:
    """Fit a network emitting a flattened (m, n) Jacobian per anchor.

    ``pairs`` must provide ``pairs.deltas(idx) -> (dx, dq)`` with shapes
    (len(idx), P, m) and (len(idx), P, n), and ``len(pairs)`` anchors.
    """
    x = np.asarray(inputs, dtype=np.float64)
    n_anchor = len(pairs)
    if n_anchor == 0 or x.shape[0] == 0:
        raise TrainingError("empty pair set")
    if x.shape[0] != n_anchor:
        raise ValueError("one input row per anchor is required")
    mlp = init_mlp(spec)
    failing: dict[int, int] = {}
    last_fail_epoch: dict[int, int] = {}

    def batch_loss(net, idx, epoch):
        dx, dq = pairs.deltas(idx)
        loss, grads, ok = hyperplane_backprop(net, x[idx], dx, dq, beta, cfg.weight_decay)
        for a in idx[~ok]:
            a = int(a)
            if last_fail_epoch.get(a) == epoch:
                continue
            failing[a] = failing.get(a, 0) + 1 if last_fail_epoch.get(a) == epoch - 1 else 1
            last_fail_epoch[a] = epoch
            if failing[a] >= RANK_FAILURE_EPOCHS:
                raise TrainingError(
                    f"anchor {a}: predicted Jacobian rank deficient for "
                    f"{failing[a]} consecutive epochs with beta={beta}")
        return loss, grads

    def val_loss(net, idx):
        dx, dq = pairs.deltas(idx)
        js = forward(net, x[idx]).reshape(len(idx), dx.shape[2], dq.shape[2])
        r = dx - dq @ np.swapaxes(js, 1, 2)
        loss = np.einsum("bpi,bpi->b", r, r)
        if beta:
            s = dq - dx @ np.swapaxes(linalg.pinv_batched(js), 1, 2)
            loss = loss + beta * np.einsum("bpi,bpi->b", s, s)
        return float(loss.mean())

    return _fit(mlp, n_anchor, cfg, batch_loss, val_loss, on_epoch)


# ---------------------------------------------------------------------------
# Joint-angle embeddings


def embed(q, kind: str) -> np.ndarray:
    """Network input for joint angles: raw ``q`` or ``[cos q, sin q]``."""
    q = np.asarray(q, dtype=np.float64)
    if kind == "raw":
        return q
    if kind == "trig":
        return np.concatenate([np.cos(q), np.sin(q)], axis=-1)
    raise ValueError(f"unknown embedding {kind!r}")


def embed_input_dim(n_joints: int, kind: str) -> int:
    return 2 * n_joints if kind == "trig" else n_joints


def joint_space_jacobian(jac_in: np.ndarray, q, kind: str) -> np.ndarray:
    """Chain a Jacobian w.r.t. the embedding back to joint angles."""
    if kind == "raw":
        return jac_in
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[-1]
    d_cos = jac_in[..., :n]
    d_sin = jac_in[..., n:]
    return -np.sin(q)[..., None, :] * d_cos + np.cos(q)[..., None, :] * d_sin


# ---------------------------------------------------------------------------
# Serialisation

MODEL_MAGIC = b"NJLM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIBBQ")


def save_model(path, mlp: Mlp) -> None:
    s = mlp.spec
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, s.input_dim, s.output_dim,
                          s.hidden_layers, s.hidden_width, ACTIVATIONS.index(s.activation),
                          EMBEDDINGS.index(s.embedding), s.seed)
    body = b"".join(p.astype("<f8").tobytes() for p in mlp.params)
    Path(path).write_bytes(header + body)


def load_model(path) -> Mlp:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated model header")
    magic, version, n_in, n_out, layers, width, act, emb, seed = _HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    if act >= len(ACTIVATIONS) or emb >= len(EMBEDDINGS):
        raise ValueError(f"{path}: corrupt activation/embedding code")
    spec = MlpSpec(n_in, n_out, layers, width, ACTIVATIONS[act], seed, EMBEDDINGS[emb])
    sizes = spec.layer_sizes
    shapes = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        shapes += [(b, a), (b,)]
    expected = sum(int(np.prod(sh)) for sh in shapes) * 8
    if len(raw) - _HEADER.size != expected:
        raise ValueError(f"{path}: parameter block has wrong size")
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    params, pos = [], 0
    for sh in shapes:
        size = int(np.prod(sh))
        params.append(flat[pos:pos + size].reshape(sh).copy())
        pos += size
    return Mlp(spec, params[0::2], params[1::2])


__all__ = [
    "MlpSpec", "Mlp", "TrainConfig", "AdamState", "TrainResult", "TrainingError",
    "init_mlp", "forward", "input_jacobian", "mse_backprop", "adam_step",
    "hyperplane_loss_and_grad", "hyperplane_batch", "hyperplane_backprop",
    "train_neural_kinematics", "train_neural_jacobian", "embed", "embed_input_dim",
    "joint_space_jacobian", "save_model", "load_model",
]
