"""Deterministic thin SVD, truncated factorization and least-squares solves.

All arithmetic runs in float64 regardless of the input dtype.  The LAPACK
kernel behind :func:`numpy.linalg.svd` does the heavy lifting; this module
pins the sign convention so repeated runs produce identical bytes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jointsvd.errors import ConvergenceError, RankDeficiencyError, RankError
from jointsvd.tensor import as_matrix

RCOND = 1e-12


@dataclass(frozen=True)
class SvdResult:
    left: np.ndarray  # (m, k)
    singulars: np.ndarray  # (k,)
    right_t: np.ndarray  # (k, n)

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singulars) @ self.right_t


@dataclass(frozen=True)
class TruncatedPair:
    u: np.ndarray  # (m, r), left vectors scaled by singular values
    v: np.ndarray  # (r, n)
    rank: int
    singulars: np.ndarray  # full spectrum of the source matrix

    @property
    def residual_sq(self) -> float:
        """Squared Frobenius error of ``u @ v``: sum of discarded sigma^2."""
        tail = self.singulars[self.rank:]
        return float(np.dot(tail, tail))


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    # largest-magnitude entry of each left vector made nonnegative; argmax
    # returns the lowest index on ties
    if u.shape[1] == 0:
        return
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    vt[flip, :] *= -1.0


def svd(a) -> SvdResult:
    a = np.asarray(as_matrix(a), dtype=np.float64)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        # the transposed problem takes a different reduction path
        try:
            v, s, ut = np.linalg.svd(a.T, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"SVD of {a.shape} matrix did not converge") from exc
        u, vt = ut.T.copy(), v.T.copy()
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(s)) and np.all(np.isfinite(vt))):
        raise ConvergenceError(f"SVD of {a.shape} matrix produced non-finite factors")
    _fix_signs(u, vt)
    return SvdResult(u, s, vt)


def svd_truncated(a, r: int) -> TruncatedPair:
    a = as_matrix(a)
    k = min(a.shape)
    if not 1 <= r <= k:
        raise RankError(f"rank {r} outside [1, {k}] for a {a.shape[0]}x{a.shape[1]} matrix")
    return _truncate(svd(a), r)


def _truncate(res: SvdResult, r: int) -> TruncatedPair:
    u = res.left[:, :r] * res.singulars[:r]
    v = res.right_t[:r, :].copy()
    return TruncatedPair(u, v, r, res.singulars)


def truncate_allow_zero(a, r: int) -> TruncatedPair:
    """Like :func:`svd_truncated` but ``r == 0`` yields empty factors.

    Used by the dual decomposition where one half may carry no rank.
    """
    a = np.asarray(a, dtype=np.float64)
    if r == 0:
        s = svd(a).singulars if a.size else np.zeros(0)
        return TruncatedPair(np.zeros((a.shape[0], 0)), np.zeros((0, a.shape[1])), 0, s)
    return svd_truncated(a, r)


def solve_least_squares(a, b, side: str = "left") -> np.ndarray:
    """Minimise ``||A X - B||_F`` (``side="left"``) or ``||X A - B||_F`` (``side="right"``).

    Raises :class:`RankDeficiencyError` when ``A`` is numerically rank
    deficient (smallest singular value at or below ``1e-12`` times the largest).
    """
    a = np.asarray(as_matrix(a), dtype=np.float64)
    b = np.asarray(as_matrix(b), dtype=np.float64)
    if side == "right":
        return solve_least_squares(a.T, b.T, side="left").T
    if side != "left":
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row mismatch: A is {a.shape}, B is {b.shape}")
    if a.shape[0] < a.shape[1]:
        raise RankDeficiencyError(
            f"A is {a.shape}: fewer rows than columns, condition number inf", np.inf
        )
    s = np.linalg.svd(a, compute_uv=False)
    cond = np.inf if s[-1] == 0 else s[0] / s[-1]
    if s[-1] <= RCOND * s[0]:
        raise RankDeficiencyError(
            f"A is numerically rank deficient (condition number {cond:.3e})", cond
        )
    q, rr = np.linalg.qr(a)
    return np.linalg.solve(rr, q.T @ b)
