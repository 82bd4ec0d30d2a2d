"""Command-line front end: ``jointsvd {decompose,verify,budget,bench}``.

Exit status is 0 when every requested step succeeds, 1 on a failed check or
library error, and 2 on usage errors or missing input files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from jointsvd import budget, pipeline
from jointsvd.architectures import BUNDLED, bundled_path, resnet_manifest
from jointsvd.errors import JointSVDError
from jointsvd.joint import DEFAULT_K, METHODS
from jointsvd.model_io import (
    FACTORIZED_NAME,
    REPORT_NAME,
    dump_json,
    load_factorized,
    load_model,
    save_factorized,
)

log = logging.getLogger("jointsvd")


class UsageError(Exception):
    pass


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"p must lie in [0, 1], got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointsvd",
        description="Joint shared-factor SVD compression of convolutional layer groups.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, rank_opts=True):
        p.add_argument("--manifest", help="model manifest (model.json)")
        p.add_argument("--out", help="artifact / report directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=_positive_int, default=1)
        if rank_opts:
            p.add_argument("--method", choices=METHODS, help="override every group's method")
            ranks = p.add_mutually_exclusive_group()
            ranks.add_argument("--rank", type=_positive_int, help="total rank per group")
            ranks.add_argument("--target-cf", type=float, help="plan ranks to reach this compression factor")
            p.add_argument("--p", type=_probability, default=None,
                           help="left-shared share of the total rank for bijsvd (default 0.5 or per group)")
            p.add_argument("--k", type=_positive_int, default=None, help=f"bijsvd iterations (default {DEFAULT_K})")

    p = sub.add_parser("decompose", help="decompose every group and write the factorized artifact")
    common(p)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64", help="factor storage precision")
    p.add_argument("--force", action="store_true", help="overwrite an existing artifact")

    p = sub.add_parser("verify", help="certify split-conv equivalence of a factorized artifact")
    common(p, rank_opts=False)

    p = sub.add_parser("budget", help="parameter, CF and MAC/FLOP accounting")
    common(p)
    p.add_argument("--arch", choices=[b for b in BUNDLED if b.startswith("resnet")],
                   help="use a bundled ResNet architecture instead of --manifest")
    p.add_argument("--hid-joint", action="store_true",
                   help="with --arch: put half-input-depth layers into their position groups")

    p = sub.add_parser("bench", help="time direct versus split forwards (informational)")
    common(p, rank_opts=False)
    p.add_argument("--repeats", type=_positive_int, default=10)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--input-hw", type=_positive_int, help="override the spatial input size")
    return parser


def _manifest_path(args) -> Path:
    if not args.manifest:
        raise UsageError("--manifest is required")
    path = Path(args.manifest)
    if not path.is_file():
        try:
            return bundled_path(args.manifest)
        except KeyError:
            raise UsageError(f"manifest not found: {path}") from None
    return path


def _artifact_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out (the artifact directory) is required")
    out = Path(args.out)
    if not (out / FACTORIZED_NAME).is_file():
        raise UsageError(f"no factorized artifact at {out / FACTORIZED_NAME}")
    return out


def _load_source(args, artifact):
    path = _manifest_path(args) if args.manifest else artifact.source
    if not Path(path).is_file():
        raise UsageError(f"source manifest not found: {path}")
    return load_model(path)


def _fmt(n) -> str:
    return "n/a" if n is None else f"{n:,}"


def _print_report(title: str, report: budget.CompressionReport) -> None:
    print(f"{title}:")
    print(f"  params before  {report.params_before:,}")
    print(f"  params after   {report.params_after:,}  (other {report.other_params:,})")
    print(f"  CF             {report.cf:.4f}")
    print(f"  MACs before    {_fmt(report.macs_before)}")
    print(f"  MACs after     {_fmt(report.macs_after)}")
    if report.flops_before is not None:
        print(f"  FLOPs before   {report.flops_before:.4e}  ({report.flops_convention})")
        print(f"  FLOPs after    {report.flops_after:.4e}")


def cmd_decompose(args) -> int:
    manifest_path = _manifest_path(args)
    if not args.out:
        raise UsageError("--out is required")
    manifest, tensors = load_model(manifest_path)
    missing = [m for g in manifest.groups for m in g.members if m not in tensors]
    if missing:
        raise UsageError(f"grouped tensors have no weight payload: {missing}")
    plan = pipeline.resolve_plan(manifest, args.method, args.rank, args.target_cf, args.p)
    result = pipeline.decompose_model(manifest, tensors, plan, args.k, args.precision, args.threads)
    report = result.report.to_dict()
    report["precision"] = args.precision
    report["plan"] = [
        {"group_id": e.group_id, "method": e.method, "r_r": e.r_r, "r_l": e.r_l} for e in plan
    ]
    target = save_factorized(manifest, manifest_path, result.results, report, args.out,
                             args.precision, force=args.force)
    for e, res in zip(plan, result.report.per_group_residuals):
        print(f"group {e.group_id} {e.method} r_r={e.r_r} r_l={e.r_l} residual_sq={res:.6e}")
    _print_report("compression", result.report)
    print(f"wrote {target}")
    return 0


def cmd_verify(args) -> int:
    out = _artifact_dir(args)
    artifact = load_factorized(out)
    manifest, tensors = _load_source(args, artifact)
    print(f"seed {args.seed}, precision {artifact.precision}, "
          f"threshold {pipeline.CONV_TOLERANCE[artifact.precision]:g}")
    checks = pipeline.verify_artifact(artifact, manifest, tensors, args.seed)
    failed = []
    for c in checks:
        status = "ok" if c.ok else "FAIL"
        print(f"group {c.group_id} {c.member}: max_abs_diff={c.conv_diff:.3e} "
              f"residual_sq={c.residual_loaded:.6e} {status}")
        for problem in c.problems:
            print(f"    {problem}")
        if not c.ok:
            failed.append(c.member)
    recomputed = artifact.stored_params(manifest)
    before = sum(t.shape.size for t in manifest.tensors) + manifest.other_params
    print(f"CF from artifact: {before / recomputed:.6f}")
    if failed:
        print(f"verification FAILED for layers: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"verified {len(checks)} layers")
    return 0


def cmd_budget(args) -> int:
    if args.arch:
        manifest = resnet_manifest(int(args.arch.removeprefix("resnet")), hid_joint=args.hid_joint)
    else:
        manifest, _ = load_model(_manifest_path(args), load_weights=False)
    spec = manifest.model_spec()
    baseline = budget.build_report(spec, ())
    _print_report("original", baseline)
    doc = {"original": baseline.to_dict()}
    if args.rank is not None or args.target_cf is not None or any(
        g.rank or g.r_r or g.r_l or g.target_cf for g in manifest.groups
    ):
        plan = pipeline.resolve_plan(manifest, args.method, args.rank, args.target_cf, args.p)
        planned = budget.build_report(spec, plan)
        for e in plan:
            print(f"group {e.group_id} {e.method} r_r={e.r_r} r_l={e.r_l} members={len(e.members)}")
        _print_report("planned", planned)
        doc["planned"] = planned.to_dict()
        doc["plan"] = [{"group_id": e.group_id, "method": e.method, "r_r": e.r_r, "r_l": e.r_l} for e in plan]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_json(out / REPORT_NAME, doc)
        print(f"wrote {out / REPORT_NAME}")
    return 0


def cmd_bench(args) -> int:
    out = _artifact_dir(args)
    artifact = load_factorized(out)
    manifest, tensors = _load_source(args, artifact)
    print(f"seed {args.seed}, warmup {args.warmup}, repeats {args.repeats}, batch 1")
    rows = pipeline.bench_artifact(artifact, manifest, tensors, args.repeats, args.warmup,
                                   args.seed, args.input_hw)
    for r in rows:
        kind = "dual" if r.dual else "split"
        print(f"group {r.group_id} {r.member}: direct {r.direct_s * 1e3:.3f} ms, "
              f"{kind} {r.split_s * 1e3:.3f} ms, time ratio {r.time_ratio:.3f}, "
              f"MAC ratio {r.mac_ratio:.3f}")
    return 0


COMMANDS = {
    "decompose": cmd_decompose,
    "verify": cmd_verify,
    "budget": cmd_budget,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (JointSVDError, ValueError, OSError) as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
