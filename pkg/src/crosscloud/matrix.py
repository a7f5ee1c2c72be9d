"""Dense matrices and a one-sided Jacobi SVD with rank truncation.

Matrices are plain 2-D ``float64`` numpy arrays; :func:`as_matrix` is the
single place where shape and finiteness are enforced.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_SWEEPS = 60
# pairs with |a_p . a_q| below this fraction of |a_p||a_q| count as orthogonal
ORTHO_TOL = 1e-12
# columns whose norm falls below ZERO_TOL * ||A||_F are treated as numerically zero
ZERO_TOL = 1e-12


class SvdConvergenceError(RuntimeError):
    def __init__(self, shape, residual, sweeps):
        self.shape = shape
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(
            f"Jacobi SVD of a {shape[0]}x{shape[1]} matrix did not converge after "
            f"{sweeps} sweeps (max relative off-diagonal {residual:.3e})"
        )


def as_matrix(a) -> np.ndarray:
    """Validate ``a`` as an m x n finite real matrix and return a float64 copy."""
    m = np.array(a, dtype=np.float64, order="C")
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"matrix must be at least 1x1, got {m.shape}")
    if not np.all(np.isfinite(m)):
        bad = np.argwhere(~np.isfinite(m))[0]
        raise ValueError(f"non-finite entry at {tuple(int(i) for i in bad)}")
    return m


@dataclass(frozen=True)
class SvdFactors:
    """Thin factors: ``A = U @ diag(sigma) @ V.T`` with k = min(m, n)."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def k(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True)
class TruncatedFactors:
    Ur: np.ndarray
    sigma_r: np.ndarray
    Vr: np.ndarray

    def __post_init__(self):
        r = self.sigma_r.shape[0]
        if self.Ur.ndim != 2 or self.Vr.ndim != 2 or self.sigma_r.ndim != 1:
            raise ValueError("truncated factors must be (m x r, r, n x r)")
        if self.Ur.shape[1] != r or self.Vr.shape[1] != r:
            raise ValueError(
                f"rank mismatch: Ur {self.Ur.shape}, sigma_r {self.sigma_r.shape}, Vr {self.Vr.shape}"
            )
        if not 1 <= r <= min(self.Ur.shape[0], self.Vr.shape[0]):
            raise ValueError(f"rank {r} out of range for {self.shape}")

    @property
    def r(self) -> int:
        return self.sigma_r.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.Ur.shape[0], self.Vr.shape[0]


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Cyclic tournament ordering: n-1 rounds of disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _householder_r(A: np.ndarray):
    """Upper-triangular R of A = QR, plus the reflectors that define Q."""
    R = A.copy()
    n = R.shape[1]
    reflectors = []
    for k in range(n):
        v = R[k:, k].copy()
        norm = np.sqrt(v @ v)
        v[0] += np.copysign(norm, v[0]) if v[0] != 0 else norm
        vv = v @ v
        if vv > 0:
            R[k:, k:] -= np.outer(v, (2.0 / vv) * (v @ R[k:, k:]))
        reflectors.append((v, vv))
    return np.triu(R[:n]), reflectors


def _apply_q(reflectors, X: np.ndarray, m: int) -> np.ndarray:
    """Q @ [X; 0] for the Q of :func:`_householder_r`."""
    Y = np.zeros((m, X.shape[1]))
    Y[: X.shape[0]] = X
    for k in reversed(range(len(reflectors))):
        v, vv = reflectors[k]
        if vv > 0:
            Y[k:] -= np.outer(v, (2.0 / vv) * (v @ Y[k:]))
    return Y


def _jacobi_tall(A: np.ndarray):
    """Jacobi on the triangular factor of A when A is clearly tall.

    A = QR and R = W' V^T give A V = Q W', so only n x n rows are rotated.
    """
    m, n = A.shape
    if m < 2 * n:
        return _jacobi_columns(A)
    R, reflectors = _householder_r(A)
    W, V, _ = _jacobi_columns(R)
    return _apply_q(reflectors, W, m), V, float(np.sqrt(np.sum(A * A)))


def _jacobi_columns(A: np.ndarray):
    """Orthogonalise the columns of a tall (m >= n) matrix.

    Returns (W, V, ||A||_F) with W = A @ V and mutually orthogonal columns of W.
    Column j of W and of V is held as row j of one C-ordered array ``Z`` so a
    single pair update rotates both.
    """
    m, n = A.shape
    Z = np.empty((n, m + n))
    Z[:, :m] = A.T
    Z[:, m:] = np.eye(n)
    fro = float(np.sqrt(np.sum(A * A)))
    floor = (ZERO_TOL * fro) ** 2
    rounds = [(p, q) for p, q in _round_robin(n) if p.size]
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            zp = Z[p]
            zq = Z[q]
            wp = zp[:, :m]
            wq = zq[:, :m]
            alpha = np.einsum("ij,ij->i", wp, wp)
            beta = np.einsum("ij,ij->i", wq, wq)
            gamma = np.einsum("ij,ij->i", wp, wq)
            active = (np.abs(gamma) > ORTHO_TOL * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not active.any():
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * np.where(active, gamma, 1.0))
            t = np.where(active, np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = (c * t)[:, None]
            c = c[:, None]
            Z[p] = c * zp - s * zq
            Z[q] = s * zp + c * zq
        # a sweep that rotated may already have left every pair orthogonal
        if not rotated or _residual(Z[:, :m], floor) <= ORTHO_TOL:
            return Z[:, :m].T.copy(), Z[:, m:].T.copy(), fro
    raise SvdConvergenceError(A.shape, _residual(Z[:, :m], floor), MAX_SWEEPS)


def _residual(Wt: np.ndarray, floor: float) -> float:
    """Largest relative inner product between distinct non-negligible columns."""
    G = Wt @ Wt.T
    d = np.diag(G).copy()
    live = d > floor
    scale = np.sqrt(np.outer(d, d))
    rel = np.abs(G) / np.where(scale > 0, scale, 1.0)
    np.fill_diagonal(rel, 0.0)
    rel[~live] = 0.0
    rel[:, ~live] = 0.0
    return float(rel.max()) if rel.size else 0.0


def _complete_basis(U: np.ndarray, missing: np.ndarray) -> None:
    """Fill columns ``missing`` of U with unit vectors orthogonal to the rest."""
    m = U.shape[0]
    have = np.ones(U.shape[1], dtype=bool)
    have[missing] = False
    for j in missing:
        Q = U[:, have]
        # residual of each standard basis vector after projecting out Q
        resid = 1.0 - np.einsum("ij,ij->i", Q, Q)
        e = np.zeros(m)
        e[int(np.argmax(resid))] = 1.0
        for _ in range(2):
            e -= Q @ (Q.T @ e)
        U[:, j] = e / np.linalg.norm(e)
        have[j] = True


def svd(A) -> SvdFactors:
    """Thin SVD by cyclic one-sided Jacobi.

    Singular values come back descending (ties keep original column order)
    and each U column is signed so its largest-magnitude entry is positive.
    """
    A = as_matrix(A)
    m, n = A.shape
    wide = m < n
    try:
        W, V, fro = _jacobi_tall(A.T if wide else A)
    except SvdConvergenceError as exc:
        # report the caller's matrix, not the triangular factor that was rotated
        raise SvdConvergenceError(A.shape, exc.residual, exc.sweeps) from None
    sigma = np.sqrt(np.einsum("ij,ij->j", W, W))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    W = W[:, order]
    V = V[:, order]
    U = np.zeros_like(W)
    good = sigma > ZERO_TOL * fro
    U[:, good] = W[:, good] / sigma[good]
    if not good.all():
        _complete_basis(U, np.flatnonzero(~good))
    if wide:
        U, V = V, U
    flip = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    V[:, flip] *= -1.0
    return SvdFactors(U=U, sigma=sigma, V=V)


def truncate(f: SvdFactors, r: int) -> TruncatedFactors:
    if not 1 <= r <= f.k:
        raise ValueError(f"rank {r} outside [1, {f.k}]")
    return TruncatedFactors(
        Ur=f.U[:, :r].copy(), sigma_r=f.sigma[:r].copy(), Vr=f.V[:, :r].copy()
    )


def reconstruct(t: TruncatedFactors) -> np.ndarray:
    return (t.Ur * t.sigma_r) @ t.Vr.T


def compression_ratio(m: int, n: int, r: int) -> float:
    """Transmitted element count of (U_r, S_r, V_r) over the dense m*n count.

    Values above 1 mean the factors are larger than the matrix itself; see
    :func:`is_compressive`.
    """
    if m < 1 or n < 1 or r < 1 or r > min(m, n):
        raise ValueError(f"invalid (m, n, r) = ({m}, {n}, {r})")
    return (m * r + r + r * n) / (m * n)


def is_compressive(m: int, n: int, r: int) -> bool:
    return compression_ratio(m, n, r) < 1.0


def rank_for_fraction(m: int, n: int, rho: float) -> int:
    """Kept rank for a singular-value fraction: max(1, round(rho * min(m, n)))."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"keep fraction must lie in (0, 1], got {rho}")
    return max(1, int(round(rho * min(m, n))))
