import math

import pytest
from hypothesis import given, settings, strategies as st

from jointsvd.architectures import resnet_manifest
from jointsvd.budget import (
    ConvLayerSpec,
    GroupPlan,
    ModelSpec,
    apportion_rank,
    build_report,
    cf_for_plan,
    count_params,
    group_factor_params,
    macs_conv,
    macs_decomposed,
    model_macs,
    plan_ranks,
)
from jointsvd.errors import BudgetError, InfeasibleTargetError
from jointsvd.tensor import Shape4

TOY = {"a": Shape4(3, 3, 4, 4), "b": Shape4(3, 3, 4, 4)}


def toy_model(other=0):
    return ModelSpec({n: ConvLayerSpec(s, 1, 4, 4) for n, s in TOY.items()}, other)


def entry(method, r_r, r_l, members=("a", "b"), gid=0):
    return GroupPlan(gid, method, tuple(members), r_r, r_l)


# Hand evaluation for two 3x3x4x4 members (144 weights each, unfolded 12x12):
#   before = 2 * 144 = 288
#   right-shared r: after = 2 * (12 r) + 12 r = 36 r
#   left-shared r:  after = 12 r + 2 * (12 r) = 36 r
@pytest.mark.parametrize("r, cf", [(1, 8.0), (2, 4.0), (4, 2.0)])
def test_toy_cf_right_and_left(r, cf):
    assert cf_for_plan(TOY, [entry("rjsvd", r, 0)]) == cf
    assert cf_for_plan(TOY, [entry("ljsvd", 0, r)]) == cf


def test_toy_factor_sizes():
    assert group_factor_params(list(TOY.values()), 2, 0) == 72
    assert group_factor_params(list(TOY.values()), 0, 2) == 72
    # dual: V (12) + U (12) + per member U^n (12) and V^n (12)
    assert group_factor_params(list(TOY.values()), 1, 1) == 72


def test_full_rank_single_member_inflates():
    cf = cf_for_plan({"a": Shape4(3, 3, 4, 4)}, [entry("rjsvd", 12, 0, ("a",))])
    assert cf == 0.5


def test_other_params_in_both_totals():
    # (288 + 100) / (36 + 100)
    assert cf_for_plan(TOY, [entry("rjsvd", 1, 0)], 100) == pytest.approx(388 / 136, rel=1e-15)


def test_overlapping_groups_rejected():
    with pytest.raises(BudgetError, match="appears in groups"):
        cf_for_plan(TOY, [entry("rjsvd", 1, 0, ("a", "b"), 0), entry("rjsvd", 1, 0, ("b",), 1)])


def test_ungrouped_layers_count_raw():
    shapes = dict(TOY, c=Shape4(1, 1, 2, 3))
    assert cf_for_plan(shapes, [entry("rjsvd", 1, 0)]) == pytest.approx(294 / 42)


def test_macs_conv_examples():
    assert macs_conv(ConvLayerSpec(Shape4(3, 3, 4, 4), 1, 4, 4)) == 2304
    assert macs_conv(ConvLayerSpec(Shape4(1, 1, 1, 1), 1, 1, 1)) == 1
    # stride 2 on 7x7: output 4x4
    assert macs_conv(ConvLayerSpec(Shape4(3, 3, 2, 5), 2, 7, 7)) == 16 * 90


@pytest.mark.parametrize("r_r, r_l", [(2, 0), (0, 2), (1, 1)])
def test_macs_decomposed_examples(r_r, r_l):
    # (H'W F1 I + H'W' F2 O)(r) = (4*4*3*4 + 4*4*3*4) * 2
    assert macs_decomposed(ConvLayerSpec(Shape4(3, 3, 4, 4), 1, 4, 4), r_r, r_l) == 768


def test_macs_decomposed_strided_uses_full_width():
    layer = ConvLayerSpec(Shape4(3, 3, 4, 4), 2, 8, 8)
    # vertical conv: 4 x 8 x r outputs of 12 taps; horizontal: 4 x 4 x 4 outputs of 3r taps
    assert macs_decomposed(layer, 5, 0) == (4 * 8 * 12 + 4 * 4 * 12) * 5
    # strided layers can cost more than the direct conv below the parameter bound
    assert 5 < 144 / 24 and macs_decomposed(layer, 5, 0) > macs_conv(layer)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([1, 3, 5]), st.sampled_from([1, 3, 5]), st.integers(1, 16), st.integers(1, 16),
       st.sampled_from([1, 2]), st.integers(1, 16), st.integers(1, 16), st.integers(1, 40))
def test_macs_condition(f1, f2, i, o, s, h, w, r):
    layer = ConvLayerSpec(Shape4(f1, f2, i, o), s, h, w)
    ho, wo = layer.output_hw
    bound = ho * wo * f1 * f2 * i * o / (ho * w * f1 * i + ho * wo * f2 * o)
    assert (macs_decomposed(layer, r, 0) < macs_conv(layer)) == (r < bound)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 3]), st.integers(1, 12), st.integers(1, 12), st.integers(1, 30))
def test_parameter_bound_implies_fewer_macs_at_unit_stride(f, i, o, r):
    shape = Shape4(f, f, i, o)
    if r < shape.size / (f * i + f * o):
        layer = ConvLayerSpec(shape, 1, 8, 8)
        assert macs_decomposed(layer, r, 0) <= macs_conv(layer)


def test_count_params():
    assert count_params(ModelSpec({}, 7)) == 7
    assert count_params(toy_model(5)) == 293


@pytest.mark.parametrize("depth, expected", [(18, 11.16e6), (34, 21.27e6), (50, 23.50e6)])
def test_resnet_params(depth, expected):
    total = count_params(resnet_manifest(depth).model_spec())
    assert abs(total - expected) <= 0.005 * expected


@pytest.mark.parametrize("depth, expected", [(18, 11.11e8), (34, 23.19e8), (50, 25.96e8)])
def test_resnet_flops(depth, expected):
    flops = 2 * model_macs(resnet_manifest(depth).model_spec())
    assert abs(flops - expected) <= 0.02 * expected


def test_resnet_cifar100_params():
    for depth, expected in ((18, 11.21e6), (34, 21.31e6), (50, 23.69e6)):
        total = count_params(resnet_manifest(depth, num_classes=100).model_spec())
        assert abs(total - expected) <= 0.005 * expected


@pytest.mark.parametrize("total, p, expected", [(10, 0.3, (7, 3)), (9, 0.0, (9, 0)), (1, 0.5, (0, 1)),
                                                (6, 0.5, (3, 3)), (5, 1.0, (0, 5)), (5, 0.5, (2, 3))])
def test_apportion(total, p, expected):
    assert apportion_rank(total, p) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 500), st.floats(0, 1))
def test_apportion_properties(total, p):
    r_r, r_l = apportion_rank(total, p)
    assert r_r + r_l == total and r_r >= 0 and r_l >= 0
    assert abs(r_l - p * total) <= 0.5 + 1e-9


def test_plan_toy_target_8():
    plan = plan_ranks(toy_model(), [(0, ("a", "b"))], "rjsvd", 0.5, 8.0)
    assert plan.entries[0].r_r == 1 and plan.entries[0].r_l == 0
    assert plan.achieved_cf == 8.0


def test_plan_toy_target_4():
    plan = plan_ranks(toy_model(), [(0, ("a", "b"))], "rjsvd", 0.5, 4.0)
    assert plan.entries[0].r_r == 2
    assert plan.achieved_cf == 4.0


def test_plan_target_one_clamps():
    plan = plan_ranks(toy_model(), [(0, ("a", "b"))], "rjsvd", 0.5, 1.0)
    # full rank 12 gives 288/432 < 1; largest admissible is r = 8 (CF exactly 1)
    assert plan.entries[0].r_r == 8
    assert plan.achieved_cf >= 1.0


def test_plan_infeasible():
    with pytest.raises(InfeasibleTargetError):
        plan_ranks(toy_model(), [(0, ("a", "b"))], "rjsvd", 0.5, 8.01)


def test_plan_empty_group():
    with pytest.raises(BudgetError):
        plan_ranks(toy_model(), [(0, ())], "rjsvd", 0.5, 2.0)
    with pytest.raises(BudgetError):
        plan_ranks(toy_model(), [], "rjsvd", 0.5, 2.0)


@pytest.mark.parametrize("method", ["rjsvd", "ljsvd", "bijsvd"])
@pytest.mark.parametrize("target", [2.0, 5.0, 13.9, 22.07])
def test_plan_resnet34_self_consistent(method, target):
    m = resnet_manifest(34)
    spec = m.model_spec()
    plan = plan_ranks(spec, [(g.group_id, g.members) for g in m.groups], method, 0.3, target)
    assert plan.achieved_cf >= target
    assert plan.achieved_cf == cf_for_plan(spec.shapes(), plan, spec.other_params)
    # within 3%, or one more unit of fraction overshoots the target
    assert plan.achieved_cf <= 1.03 * target or all(e.total_rank == 1 for e in plan.entries)
    for e in plan.entries:
        if method == "bijsvd":
            assert (e.r_r, e.r_l) == apportion_rank(e.total_rank, 0.3)
        else:
            assert (e.r_l if method == "rjsvd" else e.r_r) == 0


def test_cf_strictly_decreasing_in_each_rank():
    shapes = {"a": Shape4(3, 3, 8, 8), "b": Shape4(3, 3, 8, 8), "c": Shape4(1, 1, 8, 16)}
    for r_r in range(0, 6):
        for r_l in range(0, 6):
            if r_r + r_l == 0:
                continue
            base = cf_for_plan(shapes, [entry("bijsvd", r_r, r_l), entry("rjsvd", 2, 0, ("c",), 1)], 10)
            assert cf_for_plan(shapes, [entry("bijsvd", r_r + 1, r_l), entry("rjsvd", 2, 0, ("c",), 1)], 10) < base
            assert cf_for_plan(shapes, [entry("bijsvd", r_r, r_l + 1), entry("rjsvd", 2, 0, ("c",), 1)], 10) < base
            assert cf_for_plan(shapes, [entry("bijsvd", r_r, r_l), entry("rjsvd", 3, 0, ("c",), 1)], 10) < base


def test_doubling_other_moves_cf_toward_one():
    for r in (1, 6, 12):
        prev = cf_for_plan(TOY, [entry("rjsvd", r, 0)], 0)
        other = 1
        for _ in range(12):
            cur = cf_for_plan(TOY, [entry("rjsvd", r, 0)], other)
            assert abs(cur - 1) <= abs(prev - 1)
            prev, other = cur, other * 2


def test_report_fields():
    rep = build_report(toy_model(3), [entry("rjsvd", 1, 0)], [0.5])
    assert rep.params_before == 291 and rep.params_after == 39
    assert rep.cf == 291 / 39
    assert rep.macs_before == 2 * 2304 and rep.macs_after == 2 * (16 * 12 + 16 * 12)
    d = rep.to_dict()
    assert d["flops_before"] == 2 * d["macs_before"] and d["flops_convention"] == "two-per-mac"


def test_report_without_geometry():
    rep = build_report(ModelSpec({"a": ConvLayerSpec(Shape4(1, 1, 2, 2))}, 0), ())
    assert rep.macs_before is None and rep.flops_before is None and rep.cf == 1.0
