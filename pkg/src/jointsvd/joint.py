"""Joint decompositions of layer groups sharing a right factor, a left factor, or both.

A group holds N weight tensors that are unfolded to matrices ``W^n``.

* :func:`rjsvd` shares the right factor: ``W^n ~ U^n V`` via one truncated
  SVD of the vertical stack ``[W^1; ...; W^N]``.
* :func:`ljsvd` shares the left factor: ``W^n ~ U V^n`` via one truncated SVD
  of the horizontal stack ``[W^1, ..., W^N]``.
* :func:`bijsvd` combines the two, ``W^n ~ U^n V + U V^n``, alternating
  right-shared and left-shared SVD steps on the residuals for K iterations.
* :func:`rjsvd_als` is the alternating least-squares route to the
  right-shared problem, kept as a cross-check.

Residuals are stored un-normalised, ``sum_n ||W^n - approx^n||_F^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from jointsvd.errors import CompatibilityError, DimensionError, RankError
from jointsvd.linalg import solve_least_squares, truncate_allow_zero
from jointsvd.tensor import Shape4, as_tensor4, fold, stack_horizontal, stack_vertical, unfold

DEFAULT_K = 30
METHODS = ("rjsvd", "ljsvd", "bijsvd")


@dataclass(frozen=True)
class LayerGroup:
    group_id: int
    members: tuple[tuple[str, np.ndarray], ...]

    def __init__(self, group_id: int, members):
        members = tuple((str(name), as_tensor4(w)) for name, w in members)
        if not members:
            raise CompatibilityError(f"group {group_id} has no members")
        names = [n for n, _ in members]
        if len(set(names)) != len(names):
            raise CompatibilityError(f"group {group_id} has duplicate member names")
        object.__setattr__(self, "group_id", int(group_id))
        object.__setattr__(self, "members", members)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.members]

    @property
    def shapes(self) -> list[Shape4]:
        return [Shape4.of(w.shape) for _, w in self.members]

    def __len__(self) -> int:
        return len(self.members)

    def matrices(self) -> list[np.ndarray]:
        return [unfold(w).astype(np.float64, copy=False) for _, w in self.members]

    def transposed(self) -> "LayerGroup":
        """Group whose unfolded members are the transposes of this group's."""
        return LayerGroup(
            self.group_id, [(n, np.ascontiguousarray(w.transpose(1, 0, 3, 2))) for n, w in self.members]
        )

    def check_compatible(self, method: str) -> None:
        check_compatible(self.names, self.shapes, method, self.group_id)


def check_compatible(names: Sequence[str], shapes: Sequence[Shape4], method: str, group_id=None) -> None:
    """Raise :class:`CompatibilityError` naming the offending members."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    label = f"group {group_id}" if group_id is not None else "group"
    rows = [s.unfolded[0] for s in shapes]
    cols = [s.unfolded[1] for s in shapes]
    if method in ("rjsvd", "bijsvd"):
        for name, c in zip(names, cols):
            if c != cols[0]:
                raise CompatibilityError(
                    f"{label}: {method} needs equal F2*O but {names[0]!r} has {cols[0]} "
                    f"and {name!r} has {c}"
                )
    if method in ("ljsvd", "bijsvd"):
        for name, r in zip(names, rows):
            if r != rows[0]:
                raise CompatibilityError(
                    f"{label}: {method} needs equal F1*I but {names[0]!r} has {rows[0]} "
                    f"and {name!r} has {r}"
                )


@dataclass(frozen=True)
class RightSharedFactorization:
    shared_v: np.ndarray  # (r, F2*O)
    member_us: tuple[np.ndarray, ...]  # each (F1n*In, r)
    rank_r: int
    residual_sq: float

    def approx(self, n: int) -> np.ndarray:
        return self.member_us[n] @ self.shared_v


@dataclass(frozen=True)
class LeftSharedFactorization:
    shared_u: np.ndarray  # (F1*I, r)
    member_vs: tuple[np.ndarray, ...]  # each (r, F2n*On)
    rank_l: int
    residual_sq: float

    def approx(self, n: int) -> np.ndarray:
        return self.shared_u @ self.member_vs[n]


@dataclass(frozen=True)
class DualFactorization:
    right: RightSharedFactorization
    left: LeftSharedFactorization
    iterations: int
    objective_trace: tuple[float, ...] = field(default=())

    @property
    def residual_sq(self) -> float:
        return self.objective_trace[-1]

    def approx(self, n: int) -> np.ndarray:
        return self.right.approx(n) + self.left.approx(n)


def _right_shared(mats: list[np.ndarray], r: int) -> RightSharedFactorization:
    pair = truncate_allow_zero(stack_vertical(mats), r)
    offsets = np.cumsum([0] + [m.shape[0] for m in mats])
    us = tuple(pair.u[a:b].copy() for a, b in zip(offsets[:-1], offsets[1:]))
    return RightSharedFactorization(pair.v, us, r, pair.residual_sq)


def _left_shared(mats: list[np.ndarray], r: int) -> LeftSharedFactorization:
    pair = truncate_allow_zero(stack_horizontal(mats), r)
    offsets = np.cumsum([0] + [m.shape[1] for m in mats])
    vs = tuple(pair.v[:, a:b].copy() for a, b in zip(offsets[:-1], offsets[1:]))
    return LeftSharedFactorization(pair.u, vs, r, pair.residual_sq)


def _check_rank(r: int, bound: int, what: str) -> None:
    if not 1 <= r <= bound:
        raise RankError(f"{what} rank {r} outside [1, {bound}]")


def rjsvd(group: LayerGroup, r: int) -> RightSharedFactorization:
    group.check_compatible("rjsvd")
    mats = group.matrices()
    _check_rank(r, min(sum(m.shape[0] for m in mats), mats[0].shape[1]), "right-shared")
    return _right_shared(mats, r)


def ljsvd(group: LayerGroup, r: int) -> LeftSharedFactorization:
    group.check_compatible("ljsvd")
    mats = group.matrices()
    _check_rank(r, min(mats[0].shape[0], sum(m.shape[1] for m in mats)), "left-shared")
    return _left_shared(mats, r)


def dual_rank_bounds(shape: Shape4, n: int) -> tuple[int, int]:
    """Upper bounds for (r_r, r_l) in a group of ``n`` members of ``shape``."""
    rows, cols = shape.unfolded
    return min(n * rows, cols), min(rows, n * cols)


def _objective(mats, right: RightSharedFactorization, left: LeftSharedFactorization) -> float:
    total = 0.0
    for n, w in enumerate(mats):
        d = w - right.member_us[n] @ right.shared_v - left.shared_u @ left.member_vs[n]
        total += float(np.vdot(d, d))
    return total


def bijsvd(group: LayerGroup, r_r: int, r_l: int, k: int = DEFAULT_K) -> DualFactorization:
    """Alternate right-shared and left-shared truncated SVDs on residuals for ``k`` rounds.

    Starts from ``U = 0, V^n = 0`` so the first right step sees the raw
    weights.  ``objective_trace[0]`` is the objective at that starting point
    and ``objective_trace[j]`` the objective after round ``j``.
    """
    group.check_compatible("bijsvd")
    if k < 1:
        raise ValueError(f"iteration count must be >= 1, got {k}")
    if r_r < 0 or r_l < 0 or r_r + r_l < 1:
        raise RankError(f"need r_r, r_l >= 0 and r_r + r_l >= 1, got ({r_r}, {r_l})")
    mats = group.matrices()
    n = len(mats)
    rows, cols = mats[0].shape
    max_r, max_l = dual_rank_bounds(group.shapes[0], n)
    if r_r > max_r:
        raise RankError(f"right-shared rank {r_r} exceeds {max_r}")
    if r_l > max_l:
        raise RankError(f"left-shared rank {r_l} exceeds {max_l}")

    right = RightSharedFactorization(
        np.zeros((r_r, cols)), tuple(np.zeros((rows, r_r)) for _ in mats), r_r, 0.0
    )
    left = LeftSharedFactorization(
        np.zeros((rows, r_l)), tuple(np.zeros((r_l, cols)) for _ in mats), r_l, 0.0
    )
    trace = [_objective(mats, right, left)]
    for _ in range(k):
        if r_r:
            right = _right_shared([w - left.approx(j) for j, w in enumerate(mats)], r_r)
        if r_l:
            left = _left_shared([w - right.approx(j) for j, w in enumerate(mats)], r_l)
        trace.append(_objective(mats, right, left))
    return DualFactorization(right, left, k, tuple(trace))


def rjsvd_als(group: LayerGroup, r: int, iters: int, seed: int = 0) -> RightSharedFactorization:
    """Right-shared factorization by alternating least squares.

    Each round sets ``V`` to the mean of the per-member least-squares
    solutions ``argmin_V ||U^n V - W^n||`` and then refits every ``U^n``
    against the new ``V``.  The averaged update is not the exact joint
    minimiser when members differ, so the objective need not decrease
    monotonically for N > 1.
    """
    group.check_compatible("rjsvd")
    mats = group.matrices()
    if len({m.shape for m in mats}) != 1:
        raise CompatibilityError("ALS variant requires all members to share one unfolded shape")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    rows, cols = mats[0].shape
    _check_rank(r, min(rows, cols), "ALS")
    rng = np.random.default_rng(seed)
    us = [rng.standard_normal((rows, r)) for _ in mats]
    v = None
    for _ in range(iters):
        v = sum(solve_least_squares(u, w) for u, w in zip(us, mats)) / len(mats)
        us = [solve_least_squares(v, w, side="right") for w in mats]
    resid = sum(float(np.sum((w - u @ v) ** 2)) for u, w in zip(us, mats))
    return RightSharedFactorization(v, tuple(us), r, resid)


def approx_matrix(f, n: int) -> np.ndarray:
    if isinstance(f, (RightSharedFactorization, LeftSharedFactorization, DualFactorization)):
        members = f.member_us if isinstance(f, RightSharedFactorization) else (
            f.member_vs if isinstance(f, LeftSharedFactorization) else f.right.member_us
        )
        if not 0 <= n < len(members):
            raise IndexError(f"member index {n} out of range for {len(members)} members")
        return f.approx(n)
    raise TypeError(f"not a factorization: {type(f).__name__}")


def reconstruct_member(f, n: int, shape) -> np.ndarray:
    """Fold the member-``n`` approximation of ``f`` back to a 4-D tensor of ``shape``."""
    m = approx_matrix(f, n)
    shape = Shape4.of(shape)
    if m.shape != shape.unfolded:
        raise DimensionError(
            f"member {n} approximates a {m.shape} matrix, incompatible with shape {tuple(shape)}"
        )
    return fold(m, shape)
