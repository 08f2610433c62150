"""Exploration data collection, dataset files, and k-NN finite-difference pairs."""
from __future__ import annotations

from dataclasses import dataclass, field
import csv
import struct
from pathlib import Path

import numpy as np

from .environments import Env, EnvKind

POLICIES = ("ou", "perturbed_true")


@dataclass(frozen=True)
class OuConfig:
    sigma: float = 1.0
    mu: float = 0.0
    theta: float = 0.15

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("OU sigma must be >= 0")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("OU theta must lie in [0, 1]")


def ou_step(state, cfg: OuConfig, rng: np.random.Generator) -> np.ndarray:
    """One unit-time Ornstein-Uhlenbeck step: mean reversion plus Gaussian kick."""
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ValueError("OU state must be finite")
    noise = rng.standard_normal(state.shape)
    return state + cfg.theta * (cfg.mu - state) + cfg.sigma * noise


@dataclass
class Dataset:
    kind: EnvKind
    traj: np.ndarray
    step: np.ndarray
    q: np.ndarray
    x: np.ndarray
    seed: int = 0
    ou: OuConfig = field(default_factory=OuConfig)
    n_traj: int = 0
    traj_len: int = 0
    policy: str = "ou"
    dt: float = 0.05
    initial_q: np.ndarray | None = None

    def __post_init__(self):
        m, n = self.kind.dims
        size = self.traj.shape[0]
        if self.q.shape != (size, n) or self.x.shape != (size, m) or self.step.shape != (size,):
            raise ValueError(f"dataset arrays do not match {self.kind.value} dims ({m}, {n})")
        if self.initial_q is None:
            self.initial_q = np.zeros(n)

    def __len__(self) -> int:
        return self.traj.shape[0]

    def check_contiguous(self) -> None:
        for t in np.unique(self.traj):
            steps = self.step[self.traj == t]
            if not np.array_equal(steps, np.arange(steps.shape[0])):
                raise ValueError(f"trajectory {t}: steps are not contiguous from 0")


def _perturbed_command(env: Env, rng: np.random.Generator, target: np.ndarray,
                       prob: float, std: float) -> np.ndarray:
    from .control import ControllerConfig, control_step

    cmd = control_step(env.true_jacobian(), env.x, target, ControllerConfig())
    if rng.uniform() < prob:
        cmd = cmd + rng.normal(0.0, std, size=cmd.shape)
    return cmd


def collect(env: Env, n_traj: int, traj_len: int = 100, ou: OuConfig | None = None,
            seed: int = 0, policy: str = "ou", perturb_prob: float = 0.05,
            perturb_std: float = 0.1) -> Dataset:
    """Roll out exploration trajectories from the initial pose and record (q, x).

    Each trajectory gets its own generator spawned from ``seed`` so trajectories
    can be produced independently. The sample is recorded before the command.
    """
    if n_traj < 1 or traj_len < 1:
        raise ValueError("n_traj and traj_len must be >= 1")
    if policy not in POLICIES:
        raise ValueError(f"unknown collection policy {policy!r}")
    ou = ou or OuConfig()
    children = np.random.SeedSequence(seed).spawn(n_traj)
    total = n_traj * traj_len
    qs = np.empty((total, env.n))
    xs = np.empty((total, env.m))
    row = 0
    for child in children:
        rng = np.random.default_rng(child)
        if policy == "perturbed_true":
            target = env.sample_target(rng)
            env.reset(target)
        else:
            env.reset(env.home_features())
        noise = np.zeros(env.n)
        for _ in range(traj_len):
            qs[row] = env.q
            xs[row] = env.x
            row += 1
            if policy == "ou":
                noise = ou_step(noise, ou, rng)
                cmd = noise
            else:
                cmd = _perturbed_command(env, rng, target, perturb_prob, perturb_std)
            env.step(cmd)
    traj = np.repeat(np.arange(n_traj, dtype=np.int64), traj_len)
    step = np.tile(np.arange(traj_len, dtype=np.int64), n_traj)
    return Dataset(env.kind, traj, step, qs, xs, seed=seed, ou=ou, n_traj=n_traj,
                   traj_len=traj_len, policy=policy, dt=env.sim.dt,
                   initial_q=env.initial_q.copy())


# ---------------------------------------------------------------------------
# Exact k-nearest neighbours

_CHUNK_BUDGET = 4_000_000


def knn_indices(points: np.ndarray, queries: np.ndarray, k: int,
                exclude_self: bool = False) -> np.ndarray:
    """Exact Euclidean k-NN by brute force, ties broken by lower index.

    With ``exclude_self`` the query rows are the point rows and each point's own
    index is never returned. Neighbours are ordered by (distance, index).
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n_pts = points.shape[0]
    avail = n_pts - 1 if exclude_self else n_pts
    if k < 1 or avail < k:
        raise ValueError(f"need more than k={k} samples, have {n_pts}")
    chunk = max(1, _CHUNK_BUDGET // max(1, n_pts * points.shape[1]))
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        qs = queries[start:start + chunk]
        diff = qs[:, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        if exclude_self:
            rows = np.arange(qs.shape[0])
            d2[rows, start + rows] = np.inf
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1:k]
        for r in range(qs.shape[0]):
            less = np.flatnonzero(d2[r] < kth[r])
            eq = np.flatnonzero(d2[r] == kth[r])
            chosen = np.concatenate([less, eq[: k - less.shape[0]]])
            order = np.lexsort((chosen, d2[r, chosen]))
            out[start + r] = chosen[order]
    return out


def ordered_pairs(k: int) -> tuple[np.ndarray, np.ndarray]:
    """All ordered index pairs (i, j), i != j, among k items."""
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    mask = i != j
    return i[mask], j[mask]


class PairSet:
    """k-NN neighbourhoods of every dataset sample and their finite differences."""

    def __init__(self, q: np.ndarray, x: np.ndarray, neighbors: np.ndarray):
        self.q = q
        self.x = x
        self.neighbors = neighbors
        self.k = neighbors.shape[1]
        self._pi, self._pj = ordered_pairs(self.k)

    def __len__(self) -> int:
        return self.neighbors.shape[0]

    @property
    def anchor_q(self) -> np.ndarray:
        return self.q

    def deltas(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """(dx, dq) of shape (len(idx), k(k-1), m) and (len(idx), k(k-1), n)."""
        nb = self.neighbors[np.asarray(idx)]
        a, b = nb[:, self._pi], nb[:, self._pj]
        return self.x[a] - self.x[b], self.q[a] - self.q[b]

    def pairs(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        dx, dq = self.deltas([i])
        return dx[0], dq[0]


def build_pairs(dataset: Dataset, k: int = 10) -> PairSet:
    if len(dataset) <= k:
        raise ValueError(f"dataset of {len(dataset)} samples is too small for k={k}")
    nb = knn_indices(dataset.q, dataset.q, k, exclude_self=True)
    return PairSet(dataset.q, dataset.x, nb)


# ---------------------------------------------------------------------------
# Files

DATASET_MAGIC = b"NJDS"
DATASET_VERSION = 1
_KINDS = [EnvKind.SINGLE_POINT7, EnvKind.MULTI_POINT7, EnvKind.PLANAR2]
_HEADER = struct.Struct("<4sIBBQIIQQQdddd")


def save_dataset(path, ds: Dataset) -> None:
    m, n = ds.kind.dims
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, _KINDS.index(ds.kind),
                          POLICIES.index(ds.policy), len(ds), n, m, ds.seed, ds.n_traj,
                          ds.traj_len, ds.ou.sigma, ds.ou.mu, ds.ou.theta, ds.dt)
    rec = np.empty(len(ds), dtype=_record_dtype(n, m))
    rec["traj"] = ds.traj
    rec["step"] = ds.step
    rec["q"] = ds.q
    rec["x"] = ds.x
    body = np.asarray(ds.initial_q, dtype="<f8").tobytes() + rec.tobytes()
    Path(path).write_bytes(header + body)


def _record_dtype(n: int, m: int) -> np.dtype:
    return np.dtype([("traj", "<i8"), ("step", "<i8"), ("q", "<f8", (n,)), ("x", "<f8", (m,))])


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    (magic, version, kind_code, policy_code, size, n, m, seed, n_traj, traj_len,
     sigma, mu, theta, dt) = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {version}")
    if kind_code >= len(_KINDS) or policy_code >= len(POLICIES):
        raise ValueError(f"{path}: corrupt env kind or policy code")
    kind = _KINDS[kind_code]
    if (m, n) != kind.dims:
        raise ValueError(f"{path}: header dims (m={m}, n={n}) do not match {kind.value}")
    dtype = _record_dtype(n, m)
    expected = _HEADER.size + 8 * n + size * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated?)")
    initial_q = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)
    rec = np.frombuffer(raw, dtype=dtype, count=size, offset=_HEADER.size + 8 * n)
    ds = Dataset(kind, rec["traj"].astype(np.int64), rec["step"].astype(np.int64),
                 rec["q"].astype(np.float64), rec["x"].astype(np.float64), seed=seed,
                 ou=OuConfig(sigma, mu, theta), n_traj=n_traj, traj_len=traj_len,
                 policy=POLICIES[policy_code], dt=dt, initial_q=initial_q)
    ds.check_contiguous()
    return ds


def export_csv(path, ds: Dataset) -> None:
    m, n = ds.kind.dims
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj", "step"] + [f"q{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(m)])
        for t, s, q, x in zip(ds.traj, ds.step, ds.q, ds.x):
            w.writerow([int(t), int(s)] + [repr(float(v)) for v in q] + [repr(float(v)) for v in x])
