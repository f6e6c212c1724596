"""Dense linear algebra and deterministic random numbers.

Matrices are plain 2-D ``float64`` numpy arrays. ``as_matrix`` is the single
validation gate: anything handed to the routines below goes through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

MASK64 = (1 << 64) - 1


def as_matrix(data, copy: bool = False) -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array, raising on anything else."""
    m = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix extents must be positive, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains NaN or Inf")
    return m


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, purpose: str) -> int:
    """Child seed for a named purpose (``"data"``, ``"init"``, ...)."""
    state = seed & MASK64
    for byte in purpose.encode("utf-8"):
        state, out = splitmix64(state ^ byte)
        state = out
    _, out = splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256++ seeded through splitmix64 expansion of a 64-bit seed.

    Single-owner mutable state; hand concurrent workers their own instance
    built from :func:`derive_seed`.
    """

    def __init__(self, seed: int = 0):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self.s = s
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_range(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ArgumentError("integer bound must be positive")
        return int(self.uniform() * n)

    def normal(self) -> float:
        """Standard normal via Box-Muller; the second variate is cached."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = ((self.next_u64() >> 11) + 1) * (1.0 / (1 << 53))  # (0, 1]
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = 2.0 * math.pi * u2
        self._spare = radius * math.sin(angle)
        return radius * math.cos(angle)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)], dtype=np.float64)


def gaussian_matrix(rows: int, cols: int, stddev: float, rng: Rng) -> np.ndarray:
    """I.i.d. N(0, stddev^2) entries drawn row-major from ``rng``."""
    if rows < 1 or cols < 1:
        raise ArgumentError(f"matrix extents must be positive, got ({rows}, {cols})")
    if not stddev > 0:
        raise ArgumentError("stddev must be positive")
    return (stddev * rng.normals(rows * cols)).reshape(rows, cols)


# ---------------------------------------------------------------------------
# Products and norms
# ---------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    Row ``i`` of the result is built as ``sum_p a[i, p] * b[p, :]`` with ``p``
    increasing, one rounded multiply and one rounded add per term. This is
    the order of the textbook triple loop, so results are reproducible
    bit-for-bit independent of any BLAS.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def frobenius(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


# ---------------------------------------------------------------------------
# SVD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdResult:
    """Full SVD ``w = u @ diag(sigma) @ v.T``; ``u`` is d x d and ``v`` is k x k."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[0], self.v.shape[0]

    def reconstruct(self) -> np.ndarray:
        n = self.sigma.size
        return (self.u[:, :n] * self.sigma) @ self.v[:, :n].T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle-method schedule: n-1 rounds of disjoint column pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(g: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi on the columns of ``g`` (rows >= cols).

    Returns ``(g_rotated, v)`` where the columns of ``g_rotated`` are mutually
    orthogonal and ``g = g_rotated @ v.T``.
    """
    n = g.shape[1]
    v = np.eye(n)
    if n == 1:
        return g, v
    schedule = _round_robin(n)
    off = math.inf
    for _ in range(max_sweeps):
        off = 0.0
        rotated = False
        for ps, qs in schedule:
            if ps.size == 0:
                continue
            gp, gq = g[:, ps], g[:, qs]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            norm = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(norm > 0, np.abs(gamma) / norm, 0.0)
            off = max(off, float(rel.max()))
            act = rel > tol
            if not act.any():
                continue
            rotated = True
            ps, qs = ps[act], qs[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, ps], g[:, qs]
            g[:, ps] = c * gp - s * gq
            g[:, qs] = s * gp + c * gq
            vp, vq = v[:, ps], v[:, qs]
            v[:, ps] = c * vp - s * vq
            v[:, qs] = s * vp + c * vq
        if not rotated:
            return g, v
    raise NumericError(
        f"Jacobi SVD did not converge in {max_sweeps} sweeps "
        f"(max relative off-diagonal {off:.3e})",
        off_diagonal=off,
    )


def _complete_basis(q: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill the invalid columns of ``q`` so it becomes a square orthogonal matrix."""
    d = q.shape[0]
    out = np.zeros((d, d))
    out[:, : q.shape[1]] = q
    have = [j for j in range(q.shape[1]) if valid[j]]
    need = [j for j in range(d) if j >= q.shape[1] or not valid[j]]
    if not need:
        return out
    basis = q[:, have] if have else np.zeros((d, 0))
    # Gram-Schmidt against the standard basis, twice for stability.
    for e in range(d):
        if not need:
            break
        cand = np.zeros(d)
        cand[e] = 1.0
        for _ in range(2):
            cand -= basis @ (basis.T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm > 1e-8:
            cand /= nrm
            out[:, need.pop(0)] = cand
            basis = np.column_stack([basis, cand])
    return out


def svd(w, tol: float = 1e-12, max_sweeps: int = 60) -> SvdResult:
    """Full SVD by one-sided Jacobi rotations on the thinner side.

    Tall inputs are first reduced with a Householder QR so the rotations act
    on a k x k triangle; wide inputs are handled through the transpose.
    """
    w = as_matrix(w)
    d, k = w.shape
    if d < k:
        t = svd(w.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(u=t.v, sigma=t.sigma, v=t.u)

    if d > k:
        q, r = np.linalg.qr(w, mode="reduced")
    else:
        q, r = None, w.copy()
    g, v = _jacobi_columns(r.copy(), tol, max_sweeps)
    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]
    scale = sigma[0] if sigma[0] > 0 else 1.0
    valid = sigma > scale * 1e-15 * max(d, k)
    u_small = np.zeros_like(g)
    u_small[:, valid] = g[:, valid] / sigma[valid]
    sigma = np.where(valid, sigma, 0.0)
    u_thin = u_small if q is None else q @ u_small
    u = _complete_basis(u_thin, valid)
    return SvdResult(u=u, sigma=sigma, v=v)


def truncate_svd(s: SvdResult, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep the top-``r`` singular triplets: ``(U[:, :r], diag(sigma[:r]), V.T[:r, :])``."""
    n = s.sigma.size
    if not 1 <= r <= n:
        raise ArgumentError(f"rank {r} outside [1, {n}]")
    return s.u[:, :r].copy(), np.diag(s.sigma[:r]), s.v[:, :r].T.copy()


def spectral_norm(m) -> float:
    m = as_matrix(m)
    if not np.any(m):
        return 0.0
    return float(svd(m).sigma[0])


def approx_error(w, w_bar, metric: str = "frobenius") -> float:
    """Distance between a matrix and its approximation.

    ``metric`` is ``"frobenius"`` (default) or ``"spectral"`` (largest
    singular value of the difference).
    """
    w = as_matrix(w)
    w_bar = as_matrix(w_bar)
    if w.shape != w_bar.shape:
        raise ShapeError(f"shape mismatch {w.shape} vs {w_bar.shape}")
    diff = w - w_bar
    if metric == "frobenius":
        return frobenius(diff)
    if metric == "spectral":
        return spectral_norm(diff)
    raise ArgumentError(f"unknown metric {metric!r}")
