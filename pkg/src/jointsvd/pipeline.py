"""Model-level workflows behind the CLI: plan, decompose, verify, bench."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from jointsvd import budget
from jointsvd.budget import ConvLayerSpec, GroupPlan, ModelSpec, make_entry, plan_ranks
from jointsvd.conv import conv2d, forward_dual, forward_split, max_abs_diff
from jointsvd.errors import BudgetError
from jointsvd.joint import DualFactorization, LayerGroup, bijsvd, ljsvd, rjsvd
from jointsvd.model_io import DTYPES, FactorizedArtifact, ModelManifest
from jointsvd.tensor import fold, unfold

CONV_TOLERANCE = {"f64": 1e-9, "f32": 1e-4}
RESIDUAL_RTOL = 1e-9
DEFAULT_HW = 8


def resolve_plan(
    manifest: ModelManifest,
    method: str | None = None,
    rank: int | None = None,
    target_cf: float | None = None,
    p: float | None = None,
) -> tuple[GroupPlan, ...]:
    """Turn CLI overrides plus per-group manifest settings into concrete ranks.

    Precedence: a global ``target_cf`` plans every group at once, a global
    ``rank`` applies to every group, otherwise each group's own
    ``r_r``/``r_l``, ``rank`` or ``target_cf`` is used.
    """
    if rank is not None and target_cf is not None:
        raise BudgetError("rank and target_cf are mutually exclusive")
    if not manifest.groups:
        raise BudgetError("manifest defines no groups")
    methods = [method or g.method for g in manifest.groups]
    ps = [g.p if p is None else p for g in manifest.groups]
    spec = manifest.model_spec()

    if target_cf is not None:
        plan = plan_ranks(spec, [(g.group_id, g.members) for g in manifest.groups], methods, ps, target_cf)
        return plan.entries

    entries = []
    for g, m, pg in zip(manifest.groups, methods, ps):
        if rank is not None:
            entries.append(make_entry(g.group_id, m, g.members, rank, pg))
        elif g.r_r is not None or g.r_l is not None:
            r_r, r_l = g.r_r or 0, g.r_l or 0
            if m == "bijsvd":
                entries.append(GroupPlan(g.group_id, m, g.members, r_r, r_l))
            else:
                entries.append(make_entry(g.group_id, m, g.members, r_r + r_l, pg))
        elif g.rank is not None:
            entries.append(make_entry(g.group_id, m, g.members, g.rank, pg))
        elif g.target_cf is not None:
            sub = ModelSpec({n: spec.layers[n] for n in g.members}, 0)
            entries.extend(plan_ranks(sub, [(g.group_id, g.members)], m, pg, g.target_cf).entries)
        else:
            raise BudgetError(f"group {g.group_id}: no rank, r_r/r_l or target_cf given")
    return tuple(entries)


def decompose_group(group: LayerGroup, entry: GroupPlan, k: int):
    if entry.method == "rjsvd":
        return rjsvd(group, entry.r_r)
    if entry.method == "ljsvd":
        return ljsvd(group, entry.r_l)
    return bijsvd(group, entry.r_r, entry.r_l, k)


def _rounded(m: np.ndarray, precision: str) -> np.ndarray:
    return m.astype(DTYPES[precision]).astype(np.float64)


def stored_approx(f, n: int, precision: str) -> np.ndarray:
    """Member approximation as reproduced from factors rounded to the storage dtype."""
    if isinstance(f, DualFactorization):
        return stored_approx(f.right, n, precision) + stored_approx(f.left, n, precision)
    if hasattr(f, "member_us"):
        return _rounded(f.member_us[n], precision) @ _rounded(f.shared_v, precision)
    return _rounded(f.shared_u, precision) @ _rounded(f.member_vs[n], precision)


@dataclass
class DecomposeResult:
    plan: tuple[GroupPlan, ...]
    results: dict[int, dict]
    report: budget.CompressionReport


def decompose_model(
    manifest: ModelManifest,
    tensors: Mapping[str, np.ndarray],
    plan: Sequence[GroupPlan],
    k: int | None = None,
    precision: str = "f64",
    threads: int = 1,
) -> DecomposeResult:
    ks = {g.group_id: (g.k if k is None else k) for g in manifest.groups}

    def run(entry: GroupPlan) -> dict:
        group = LayerGroup(entry.group_id, [(n, tensors[n]) for n in entry.members])
        f = decompose_group(group, entry, ks[entry.group_id])
        mats = group.matrices()
        member_res = [float(np.sum((w - stored_approx(f, j, precision)) ** 2)) for j, w in enumerate(mats)]
        return {
            "factorization": f,
            "method": entry.method,
            "r_r": entry.r_r,
            "r_l": entry.r_l,
            "p": entry.r_l / entry.total_rank,
            "k": ks[entry.group_id] if entry.method == "bijsvd" else 0,
            "member_residual_sq": member_res,
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, plan))
    else:
        outs = [run(e) for e in plan]
    results = {e.group_id: r for e, r in zip(plan, outs)}
    residuals = [float(results[e.group_id]["factorization"].residual_sq) for e in plan]
    report = budget.build_report(manifest.model_spec(), plan, residuals)
    return DecomposeResult(tuple(plan), results, report)


@dataclass
class MemberCheck:
    group_id: int
    member: str
    residual_recorded: float
    residual_loaded: float
    conv_diff: float
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def _input_for(spec: ConvLayerSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    h = spec.input_h or DEFAULT_HW
    w = spec.input_w or DEFAULT_HW
    return rng.standard_normal((h, w, spec.shape.i)).astype(dtype)


def verify_artifact(
    artifact: FactorizedArtifact,
    manifest: ModelManifest,
    tensors: Mapping[str, np.ndarray],
    seed: int = 0,
) -> list[MemberCheck]:
    """Check payload digests, recorded residuals, and split-conv equivalence for every member."""
    tol = CONV_TOLERANCE[artifact.precision]
    dtype = DTYPES[artifact.precision].newbyteorder("=")
    rng = np.random.default_rng(seed)
    bad_digest = {(g, m) for g, m, _ in artifact.digest_failures}
    bad_shared = {g for g, m, _ in artifact.digest_failures if m is None}
    checks = []
    for fg in artifact.groups:
        f = fg.factorization()
        for n, name in enumerate(fg.members):
            spec = manifest.tensor(name).layer_spec()
            problems = []
            if (fg.group_id, name) in bad_digest:
                problems.append("factor payload digest mismatch")
            if fg.group_id in bad_shared:
                problems.append("shared factor payload digest mismatch")
            w = unfold(tensors[name]).astype(np.float64)
            approx = f.approx(n)
            res = float(np.sum((w - approx) ** 2))
            recorded = fg.member_residual_sq[name]
            if abs(res - recorded) > RESIDUAL_RTOL * max(float(np.sum(w ** 2)), 1e-300):
                problems.append(f"residual {res:.6e} differs from recorded {recorded:.6e}")
            x = _input_for(spec, rng, dtype)
            reference = conv2d(x.astype(np.float64), fold(approx, spec.shape), spec.stride, spec.stride)
            rp, lp = fg.right_pair(name), fg.left_pair(name)
            if rp is not None and lp is not None:
                out = forward_dual(x, rp, lp, spec.stride)
            else:
                out = forward_split(x, *(rp if rp is not None else lp), stride=spec.stride)
            diff = max_abs_diff(out, reference)
            if not diff <= tol:
                problems.append(f"split forward differs by {diff:.3e} > {tol:g}")
            checks.append(MemberCheck(fg.group_id, name, recorded, res, diff, problems))
    return checks


@dataclass
class BenchRow:
    group_id: int
    member: str
    direct_s: float
    split_s: float
    mac_ratio: float
    dual: bool

    @property
    def time_ratio(self) -> float:
        return self.split_s / self.direct_s if self.direct_s > 0 else float("nan")


def _time(fn, warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_artifact(
    artifact: FactorizedArtifact,
    manifest: ModelManifest,
    tensors: Mapping[str, np.ndarray],
    repeats: int = 10,
    warmup: int = 10,
    seed: int = 0,
    input_hw: int | None = None,
) -> list[BenchRow]:
    """Mean wall time of the direct conv versus its split (or dual split) replacement."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    dtype = DTYPES[artifact.precision].newbyteorder("=")
    rng = np.random.default_rng(seed)
    rows = []
    for fg in artifact.groups:
        for name in fg.members:
            spec = manifest.tensor(name).layer_spec()
            if input_hw is not None or not spec.has_geometry:
                hw = input_hw or DEFAULT_HW
                spec = ConvLayerSpec(spec.shape, spec.stride, hw, hw)
            x = _input_for(spec, rng, dtype)
            w = np.asarray(tensors[name]).astype(dtype)
            rp, lp = fg.right_pair(name), fg.left_pair(name)
            if rp is not None and lp is not None:
                split = lambda: forward_dual(x, rp, lp, spec.stride)  # noqa: E731
            else:
                pair = rp if rp is not None else lp
                split = lambda: forward_split(x, *pair, stride=spec.stride)  # noqa: E731
            direct_s = _time(lambda: conv2d(x, w, spec.stride, spec.stride), warmup, repeats)
            split_s = _time(split, warmup, repeats)
            ratio = budget.macs_decomposed(spec, fg.r_r, fg.r_l) / budget.macs_conv(spec)
            rows.append(BenchRow(fg.group_id, name, direct_s, split_s, ratio, rp is not None and lp is not None))
    return rows

