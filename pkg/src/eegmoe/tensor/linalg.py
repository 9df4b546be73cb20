"""Small dense kernels: radix-2 FFT and one-sided Jacobi SVD."""

from __future__ import annotations

import numpy as np


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")


_bitrev_cache: dict[int, np.ndarray] = {}


def _bitrev(n: int) -> np.ndarray:
    idx = _bitrev_cache.get(n)
    if idx is None:
        bits = n.bit_length() - 1
        idx = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            idx |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
        _bitrev_cache[n] = idx
    return idx


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey FFT along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    _check_pow2(n)
    lead = x.shape[:-1]
    a = x[..., _bitrev(n)].astype(complex)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(lead + (n // size, 2, half))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def ifft(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def rfft(x: np.ndarray) -> np.ndarray:
    """One-sided spectrum of a real signal: bins 0..n/2."""
    x = np.asarray(x, dtype=np.float64)
    return fft(x)[..., : x.shape[-1] // 2 + 1]


def rfft_magnitude(x) -> np.ndarray:
    from .core import Tensor

    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return np.abs(rfft(data))


# ---------------------------------------------------------------------------
# SVD

def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once per sweep (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([players[i] for i in range(n // 2)])
        q = np.array([players[n - 1 - i] for i in range(n // 2)])
        rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Orthogonalise the columns of ``a`` by plane rotations.

    Returns (rotated columns, accumulated orthogonal V) with a @ V == rotated.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    m, n = a.shape
    pad = n % 2
    if pad:
        a = np.concatenate([a, np.zeros((m, 1))], axis=1)
    nn = a.shape[1]
    v = np.eye(nn)
    schedule = _round_robin(nn)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in schedule:
            ap, aq = a[:, p], a[:, q]
            alpha = (ap * ap).sum(0)
            beta = (aq * aq).sum(0)
            gamma = (ap * aq).sum(0)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    if pad:
        a = a[:, :n]
        v = v[:n, :n]
    return a, v


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns where ``good`` is False by an orthonormal completion."""
    m = u.shape[0]
    out = u.copy()
    basis = [out[:, j] for j in range(out.shape[1]) if good[j]]
    cand = iter(np.eye(m))
    for j in range(out.shape[1]):
        if good[j]:
            continue
        while True:
            e = next(cand)
            for b in basis:
                e = e - (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e = e / nrm
                break
        out[:, j] = e
        basis.append(e)
    return out


def svd_topk(x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` left singular vectors and values of a 2-D matrix.

    Returns ``(U, S)`` with ``U`` of shape (rows, k), orthonormal columns, and
    ``S`` sorted in descending order.
    """
    from .core import Tensor

    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd_topk expects a 2-D matrix, got shape {a.shape}")
    m, n = a.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"k={k} out of range for a {m}x{n} matrix")

    if m <= n:
        # rotate the rows: a.T @ V = W  =>  a = V diag(s) (W / s).T
        w, v = _jacobi_columns(a.T)
        s = np.linalg.norm(w, axis=0)
        order = np.argsort(-s, kind="stable")
        return v[:, order[:k]], s[order[:k]]

    w, _ = _jacobi_columns(a)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")[:k]
    s = s[order]
    scale = s.max() if s.size else 0.0
    good = s > max(scale, 1.0) * 1e-13
    u = np.where(good, w[:, order] / np.where(good, s, 1.0), 0.0)
    if not good.all():
        u = _complete_basis(u, good)
    return u, s
