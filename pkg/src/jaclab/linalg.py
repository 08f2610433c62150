"""Small dense linear algebra: Jacobi SVD, pseudo-inverse and its derivative,
condition numbers and positive-definiteness checks.

Matrices are plain 2-D float64 numpy arrays. The SVD routines also accept a
stack of matrices with shape ``(batch, m, n)`` so that training loops can
factor many small Jacobians at once.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

MAX_SWEEPS = 100
PD_MARGIN = 1e-10
INF = math.inf

_EPS = np.finfo(np.float64).eps


class SvdConvergenceError(ArithmeticError):
    """Raised when Jacobi sweeps fail to orthogonalize within the sweep cap."""


class RankDeficiencyError(ArithmeticError):
    """Raised when an operation needs a full-rank matrix and did not get one."""


def as_mat(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``a`` to a finite 2-D float64 array."""
    arr = np.array(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a nonempty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma[..., None, :]) @ np.swapaxes(self.v, -1, -2)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: every column pair meets once per sweep and each
    # round is a set of disjoint pairs that can be rotated simultaneously.
    size = n + (n % 2)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        if ps:
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of a (batch, m, n) stack with m >= n.

    Returns the rotated columns W = A V and the accumulated rotations V.
    """
    w = a.copy()
    batch, _, n = w.shape
    v = np.broadcast_to(np.eye(n), (batch, n, n)).copy()
    if n == 1:
        return w, v
    rounds = _round_robin(n)
    tol = _EPS * 4.0
    for _ in range(MAX_SWEEPS):
        rotated = False
        for ps, qs in rounds:
            ap = w[:, :, ps]
            aq = w[:, :, qs]
            alpha = np.einsum("bij,bij->bj", ap, ap)
            beta = np.einsum("bij,bij->bj", aq, aq)
            gamma = np.einsum("bij,bij->bj", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            safe_gamma = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[:, None, :]
            s = np.where(active, s, 0.0)[:, None, :]
            w[:, :, ps], w[:, :, qs] = c * ap - s * aq, s * ap + c * aq
            vp = v[:, :, ps]
            vq = v[:, :, qs]
            v[:, :, ps], v[:, :, qs] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return w, v
    raise SvdConvergenceError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    m, r = u.shape
    out = u.copy()
    basis = [out[:, j] for j in range(r) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(r):
        if keep[j]:
            continue
        while True:
            vec = next(candidates).copy()
            for b in basis:
                vec -= (b @ vec) * b
            for b in basis:
                vec -= (b @ vec) * b
            norm = np.linalg.norm(vec)
            if norm > 1e-6:
                break
        vec /= norm
        out[:, j] = vec
        basis.append(vec)
    return out


def svd_batched(a: np.ndarray) -> SvdResult:
    """Thin SVD of a stack of matrices, shape (batch, m, n)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] == 0 or a.shape[2] == 0:
        raise ValueError(f"expected a nonempty (batch, m, n) stack, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    _, m, n = a.shape
    transposed = m < n
    work = np.swapaxes(a, 1, 2) if transposed else a
    w, v = _jacobi_columns(np.ascontiguousarray(work))
    sigma = np.linalg.norm(w, axis=1)
    order = np.argsort(-sigma, axis=1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=1)
    w = np.take_along_axis(w, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    rows = w.shape[1]
    floor = (sigma[:, :1] * rows * _EPS * 8.0)
    keep = (sigma > floor) & (sigma > 0.0)
    u = np.divide(w, sigma[:, None, :], out=np.zeros_like(w), where=keep[:, None, :])
    for b in np.nonzero(~np.all(keep, axis=1))[0]:
        u[b] = _complete_basis(u[b], keep[b])
    if transposed:
        u, v = v, u
    return SvdResult(u=u, sigma=sigma, v=v)


def svd(a) -> SvdResult:
    """Thin SVD ``a = U diag(sigma) V^T`` by one-sided Jacobi rotations."""
    a = as_mat(a)
    res = svd_batched(a[None])
    return SvdResult(u=res.u[0], sigma=res.sigma[0], v=res.v[0])


def default_tol(sigma_max, shape: tuple[int, int]):
    return 1e-12 * sigma_max * max(shape)


def _pinv_from_svd(res: SvdResult, shape: tuple[int, int], tol=None) -> np.ndarray:
    sig = res.sigma
    if tol is None:
        tol = default_tol(sig[..., :1], shape)
    inv = np.divide(1.0, sig, out=np.zeros_like(sig), where=sig > tol)
    return (res.v * inv[..., None, :]) @ np.swapaxes(res.u, -1, -2)


def pinv(a, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with relative singular-value thresholding."""
    a = as_mat(a)
    if tol is not None and tol < 0:
        raise ValueError("tol must be nonnegative")
    return _pinv_from_svd(svd(a), a.shape, tol)


def pinv_batched(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return _pinv_from_svd(svd_batched(a), a.shape[1:])


def cond_from_sigma(sigma: np.ndarray, shape: tuple[int, int]) -> float:
    smax, smin = float(sigma[0]), float(sigma[-1])
    if smax == 0.0 or smin <= default_tol(smax, shape):
        return INF
    return smax / smin


def cond(a) -> float:
    """2-norm condition number; ``math.inf`` for rank-deficient input."""
    a = as_mat(a)
    return cond_from_sigma(svd(a).sigma, a.shape)


def cond_batched(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    sig = svd_batched(a).sigma
    return np.array([cond_from_sigma(s, a.shape[1:]) for s in sig])


def is_positive_definite(m) -> bool:
    """True iff x^T M x > 0 for all nonzero x, i.e. the symmetric part is PD."""
    m = as_mat(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"positive-definiteness needs a square matrix, got {m.shape}")
    sym = 0.5 * (m + m.T)
    return bool(np.linalg.eigvalsh(sym)[0] > PD_MARGIN)


def pinv_directional_derivative(j, dj) -> np.ndarray:
    """Derivative of ``pinv(J)`` along the direction ``dJ`` (full-rank J only)."""
    j = as_mat(j, "j")
    dj = as_mat(dj, "dj")
    if j.shape != dj.shape:
        raise ValueError(f"shape mismatch: {j.shape} vs {dj.shape}")
    res = svd(j)
    _check_full_rank(res.sigma, j.shape)
    jp = _pinv_from_svd(res, j.shape)
    m, n = j.shape
    left = np.eye(m) - j @ jp
    right = np.eye(n) - jp @ j
    return (
        -jp @ dj @ jp
        + jp @ jp.T @ dj.T @ left
        + right @ dj.T @ jp.T @ jp
    )


def _check_full_rank(sigma: np.ndarray, shape: tuple[int, int], label: str = "") -> None:
    smax = float(sigma[0])
    if smax == 0.0 or float(sigma[-1]) <= 100.0 * default_tol(smax, shape):
        raise RankDeficiencyError(f"matrix{label} is rank deficient; pinv derivative undefined")


def pinv_adjoint(j: np.ndarray, jp: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a gradient ``g = dL/dJ^+`` (n x m) back to ``dL/dJ`` (m x n).

    Works on single matrices or stacks; the caller must ensure J is full rank.
    """
    jpt = np.swapaxes(jp, -1, -2)
    gt = np.swapaxes(g, -1, -2)
    m, n = j.shape[-2:]
    left = np.eye(m) - j @ jp
    right = np.eye(n) - jp @ j
    return -jpt @ g @ jpt + left @ gt @ jp @ jpt + jpt @ jp @ gt @ right
