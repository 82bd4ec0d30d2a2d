"""Parameter, compression-factor and MAC accounting, plus rank planning.

Factor sizes follow the folded kernels: a left factor of an ``(F1, F2, I, O)``
layer at rank ``r`` holds ``F1*I*r`` scalars and a right factor ``r*F2*O``.
A shared factor is counted once per group, per-member factors once per
member.  Biases, batch-norm parameters and undecomposed heads live in
``other_params`` and enter both sides of the ratio.

MACs are multiply-accumulates; the reported FLOPs use two operations per MAC.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from jointsvd.errors import BudgetError, InfeasibleTargetError
from jointsvd.joint import METHODS, check_compatible
from jointsvd.tensor import Shape4

FLOPS_PER_MAC = 2


@dataclass(frozen=True)
class ConvLayerSpec:
    shape: Shape4
    stride: int = 1
    input_h: int | None = None
    input_w: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape4.of(self.shape))
        if self.stride < 1:
            raise BudgetError(f"stride must be >= 1, got {self.stride}")

    @property
    def has_geometry(self) -> bool:
        return self.input_h is not None and self.input_w is not None

    @property
    def output_hw(self) -> tuple[int, int]:
        return math.ceil(self.input_h / self.stride), math.ceil(self.input_w / self.stride)


@dataclass
class ModelSpec:
    """Conv layers by name (in declaration order) plus the uncompressed parameter count."""

    layers: dict[str, ConvLayerSpec] = field(default_factory=dict)
    other_params: int = 0

    def shapes(self) -> dict[str, Shape4]:
        return {n: spec.shape for n, spec in self.layers.items()}


@dataclass(frozen=True)
class GroupPlan:
    group_id: int
    method: str
    members: tuple[str, ...]
    r_r: int
    r_l: int

    @property
    def total_rank(self) -> int:
        return self.r_r + self.r_l


@dataclass(frozen=True)
class RankPlan:
    entries: tuple[GroupPlan, ...]
    p: float | tuple[float, ...]
    achieved_cf: float


@dataclass
class CompressionReport:
    params_before: int
    params_after: int
    other_params: int
    cf: float
    macs_before: int | None
    macs_after: int | None
    flops_convention: str = "two-per-mac"
    per_group_residuals: list = field(default_factory=list)

    @property
    def flops_before(self) -> int | None:
        return None if self.macs_before is None else FLOPS_PER_MAC * self.macs_before

    @property
    def flops_after(self) -> int | None:
        return None if self.macs_after is None else FLOPS_PER_MAC * self.macs_after

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flops_before"] = self.flops_before
        d["flops_after"] = self.flops_after
        return d


def macs_conv(layer: ConvLayerSpec) -> int:
    ho, wo = layer.output_hw
    s = layer.shape
    return ho * wo * s.f1 * s.f2 * s.i * s.o


def macs_decomposed(layer: ConvLayerSpec, r_r: int, r_l: int) -> int:
    """MACs of the vertical-then-horizontal split at total rank ``r_r + r_l``.

    The vertical conv produces an ``H' x W x r`` map (stride only on height),
    the horizontal conv the final ``H' x W' x O`` map.
    """
    if r_r + r_l < 1:
        raise BudgetError("total rank must be >= 1")
    ho, wo = layer.output_hw
    s = layer.shape
    return (ho * layer.input_w * s.f1 * s.i + ho * wo * s.f2 * s.o) * (r_r + r_l)


def count_params(model: ModelSpec) -> int:
    return sum(spec.shape.size for spec in model.layers.values()) + model.other_params


def apportion_rank(r_total: int, p: float) -> tuple[int, int]:
    """Split a total rank into ``(r_r, r_l)`` with ``r_l = round_half_up(p * r_total)``."""
    if r_total < 1:
        raise BudgetError(f"total rank must be >= 1, got {r_total}")
    if not 0.0 <= p <= 1.0:
        raise BudgetError(f"p must lie in [0, 1], got {p}")
    r_l = min(r_total, int(math.floor(p * r_total + 0.5)))
    return r_total - r_l, r_l


def group_factor_params(shapes: Sequence[Shape4], r_r: int, r_l: int) -> int:
    """Stored scalars for one group: shared factors once, member factors per member."""
    first = shapes[0]
    right = r_r * (first.f2 * first.o) + sum(s.f1 * s.i * r_r for s in shapes)
    left = r_l * (first.f1 * first.i) + sum(r_l * s.f2 * s.o for s in shapes)
    return right + left


def _entries(plan) -> tuple[GroupPlan, ...]:
    return tuple(plan.entries) if isinstance(plan, RankPlan) else tuple(plan)


def _check_disjoint(entries: Iterable[GroupPlan], shapes: Mapping[str, Shape4]) -> None:
    seen: dict[str, int] = {}
    for e in entries:
        if not e.members:
            raise BudgetError(f"group {e.group_id} is empty")
        for name in e.members:
            if name not in shapes:
                raise BudgetError(f"group {e.group_id} references unknown layer {name!r}")
            if name in seen:
                raise BudgetError(
                    f"layer {name!r} appears in groups {seen[name]} and {e.group_id}"
                )
            seen[name] = e.group_id


def params_after(shapes: Mapping[str, Shape4], plan, other_params: int) -> int:
    entries = _entries(plan)
    _check_disjoint(entries, shapes)
    grouped = {n for e in entries for n in e.members}
    raw = sum(s.size for n, s in shapes.items() if n not in grouped)
    factors = sum(group_factor_params([shapes[n] for n in e.members], e.r_r, e.r_l) for e in entries)
    return raw + factors + other_params


def cf_for_plan(shapes: Mapping[str, Shape4], plan, other_params: int = 0) -> float:
    """Compression factor: (all weights + other) / (factors + ungrouped weights + other)."""
    shapes = {n: Shape4.of(s) for n, s in shapes.items()}
    before = sum(s.size for s in shapes.values()) + other_params
    return before / params_after(shapes, plan, other_params)


def macs_for_plan(model: ModelSpec, plan) -> int | None:
    """Total MACs after decomposition, or ``None`` when a layer lacks input geometry."""
    if not all(spec.has_geometry for spec in model.layers.values()):
        return None
    ranks = {n: (e.r_r, e.r_l) for e in _entries(plan) for n in e.members}
    total = 0
    for name, spec in model.layers.items():
        total += macs_decomposed(spec, *ranks[name]) if name in ranks else macs_conv(spec)
    return total


def model_macs(model: ModelSpec) -> int | None:
    return macs_for_plan(model, ())


def max_rank(shapes: Sequence[Shape4], method: str) -> int:
    """Largest admissible total rank for a group under ``method``."""
    rows = [s.unfolded[0] for s in shapes]
    cols = [s.unfolded[1] for s in shapes]
    if method == "rjsvd":
        return min(sum(rows), cols[0])
    if method == "ljsvd":
        return min(rows[0], sum(cols))
    if method == "bijsvd":
        return min(rows[0], cols[0])
    raise BudgetError(f"unknown method {method!r}")


def make_entry(group_id: int, method: str, members: Sequence[str], r_total: int, p: float) -> GroupPlan:
    if method == "rjsvd":
        return GroupPlan(group_id, method, tuple(members), r_total, 0)
    if method == "ljsvd":
        return GroupPlan(group_id, method, tuple(members), 0, r_total)
    r_r, r_l = apportion_rank(r_total, p)
    return GroupPlan(group_id, method, tuple(members), r_r, r_l)


def plan_ranks(
    model: ModelSpec,
    groups: Sequence[tuple[int, Sequence[str]]],
    method: str | Sequence[str],
    p: float | Sequence[float],
    target_cf: float,
) -> RankPlan:
    """Pick ranks from one global fraction of every group's maximum rank.

    Each group gets ``max(1, floor(phi * r_max))``; ``phi`` in (0, 1] is the
    largest fraction whose compression factor still reaches ``target_cf``,
    located by bisection (CF is non-increasing in ``phi``).  ``method`` and
    ``p`` may be given per group.
    """
    if not groups:
        raise BudgetError("no groups to plan")
    ps = [float(p)] * len(groups) if isinstance(p, (int, float)) else [float(x) for x in p]
    if len(ps) != len(groups) or not all(0.0 <= x <= 1.0 for x in ps):
        raise BudgetError(f"p must lie in [0, 1] (one value or one per group), got {p}")
    if target_cf <= 0:
        raise BudgetError(f"target CF must be positive, got {target_cf}")
    methods = [method] * len(groups) if isinstance(method, str) else list(method)
    if len(methods) != len(groups):
        raise BudgetError("one method per group required")
    shapes = model.shapes()
    bounds = []
    for (gid, members), m in zip(groups, methods):
        if m not in METHODS:
            raise BudgetError(f"unknown method {m!r}")
        if not members:
            raise BudgetError(f"group {gid} is empty")
        missing = [n for n in members if n not in shapes]
        if missing:
            raise BudgetError(f"group {gid} references unknown layers {missing}")
        check_compatible(list(members), [shapes[n] for n in members], m, gid)
        bounds.append(max_rank([shapes[n] for n in members], m))

    def plan_at(phi: float) -> tuple[GroupPlan, ...]:
        return tuple(
            make_entry(gid, m, members, max(1, math.floor(phi * rmax)), pg)
            for (gid, members), m, rmax, pg in zip(groups, methods, bounds, ps)
        )

    def cf_at(phi: float) -> float:
        return cf_for_plan(shapes, plan_at(phi), model.other_params)

    lowest = cf_at(0.0)
    if lowest < target_cf:
        raise InfeasibleTargetError(
            f"target CF {target_cf} unreachable: rank 1 everywhere gives CF {lowest:.6g}"
        )
    if cf_at(1.0) >= target_cf:
        phi = 1.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            if cf_at(mid) >= target_cf:
                lo = mid
            else:
                hi = mid
        phi = lo
    entries = plan_at(phi)
    p_out = ps[0] if len(set(ps)) == 1 else tuple(ps)
    return RankPlan(entries, p_out, cf_for_plan(shapes, entries, model.other_params))


def build_report(model: ModelSpec, plan, residuals: Sequence[float] = ()) -> CompressionReport:
    shapes = model.shapes()
    before = count_params(model)
    after = params_after(shapes, plan, model.other_params)
    return CompressionReport(
        params_before=before,
        params_after=after,
        other_params=model.other_params,
        cf=before / after,
        macs_before=model_macs(model),
        macs_after=macs_for_plan(model, plan),
        per_group_residuals=[float(r) for r in residuals],
    )
