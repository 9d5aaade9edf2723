"""Dense float64 numerics used by the calibration fit and the toy model.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Products
go through numpy; the SVD is a one-sided (Hestenes) Jacobi iteration with a
fixed sweep order so that results do not depend on the LAPACK build.

Random numbers come from :class:`SeededRng`, a SplitMix64 counter generator::

    z_i  = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z_i  = (z_i ^ (z_i >> 30)) * 0xBF58476D1CE4E5B9
    z_i  = (z_i ^ (z_i >> 27)) * 0x94D049BB133111EB
    out  = z_i ^ (z_i >> 31)

where ``i`` is the draw counter. Uniforms are ``(out >> 11) * 2**-53`` and
standard normals use Box-Muller on consecutive uniform pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SeededRng",
    "SvdResult",
    "svd",
    "frobenius_norm",
    "row_mean",
    "matmul",
    "transpose",
    "inner_product",
    "as_matrix",
]

SVD_TOL = 1e-12
MAX_SWEEPS = 80

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SeededRng:
    """SplitMix64 stream. Identical seeds give identical draws everywhere."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, shape, low: float, high: float) -> np.ndarray:
        n = int(np.prod(shape))
        return (low + (high - low) * self.uniform(n)).reshape(shape)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty((m, 2))
        out[:, 0] = radius * np.cos(angle)
        out[:, 1] = radius * np.sin(angle)
        return out.reshape(-1)[:n]

    def normal_matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.normal(rows * cols).reshape(rows, cols)


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x k
    sigma: np.ndarray  # k, descending
    v: np.ndarray  # n x k

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_finite(a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite matrix")


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    # Replace the columns not flagged `good` with an orthonormal completion,
    # built by Gram-Schmidt over the standard basis in index order.
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if good[j]]
    out = u.copy()
    candidate = 0
    for j in range(k):
        if good[j]:
            continue
        while True:
            e = np.zeros(m)
            e[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e = e - (b @ e) * b
            norm = np.sqrt(e @ e)
            if norm > 1e-8:
                break
        e = e / norm
        basis.append(e)
        out[:, j] = e
    return out


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: every pair (i, j) appears once per sweep and
    # pairs within a round are disjoint, so a round can be applied at once.
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[k], players[size - 1 - k]) for k in range(size // 2)]
        pairs = sorted((min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0)
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    # Rows of `w` are the working columns of a; contiguous access is cheaper.
    w = a.T.copy()
    vt = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp = w[p]
            wq = w[q]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            active = (gamma != 0.0) & (np.abs(gamma) > SVD_TOL * np.sqrt(alpha * beta))
            if not active.any():
                continue
            rotated = True
            p = p[active]
            q = q[active]
            wp = wp[active]
            wq = wq[active]
            zeta = (beta[active] - alpha[active]) / (2.0 * gamma[active])
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            w[p] = c * wp - s * wq
            w[q] = s * wp + c * wq
            vp = vt[p]
            vq = vt[q]
            vt[p] = c * vp - s * vq
            vt[q] = s * vp + c * vq
        if not rotated:
            break

    sigma = np.sqrt(np.einsum("ij,ij->i", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[order]
    v = vt[order].T

    cutoff = sigma[0] * n * np.finfo(float).eps if sigma[0] > 0 else 0.0
    good = sigma > cutoff
    u = np.zeros((m, n))
    u[:, good] = (w[good] / sigma[good, None]).T
    sigma = np.where(good, sigma, 0.0)
    if not np.all(good):
        u = _complete_basis(u, good)

    # Largest-magnitude entry of each left vector is made non-negative.
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(n)] < 0, -1.0, 1.0)
    return SvdResult(u=u * signs, sigma=sigma, v=v * signs)


def svd(m) -> SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` with ``k = min(rows, cols)``.

    One-sided Jacobi sweeps visit every column pair once, in a fixed
    round-robin (circle method) order whose rounds hold disjoint pairs, and
    rotate a pair whenever ``|a_i . a_j| > 1e-12 * |a_i| |a_j|``;
    iteration stops after the first sweep with no rotation. Columns whose
    singular value is at roundoff level are replaced by a deterministic
    orthonormal completion so that ``u.T @ u = I`` always holds.
    """
    a = as_matrix(m)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"matrix must have at least one row and column, got {a.shape}")
    _check_finite(a)
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a)
    r = _jacobi_tall(a.T)
    # Re-apply the sign rule to the new left factor.
    pivots = np.argmax(np.abs(r.v), axis=0)
    signs = np.where(r.v[pivots, np.arange(r.v.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(u=r.v * signs, sigma=r.sigma, v=r.u * signs)


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def row_mean(m) -> np.ndarray:
    """Per-column mean over rows, accumulated row by row."""
    a = as_matrix(m)
    if a.shape[0] < 1:
        raise ValueError("row_mean needs at least one row")
    total = np.zeros(a.shape[1])
    for row in a:
        total = total + row
    return total / a.shape[0]


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} x {b.shape}")
    return a @ b


def transpose(m) -> np.ndarray:
    return as_matrix(m).T.copy()


def inner_product(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for inner product: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))
