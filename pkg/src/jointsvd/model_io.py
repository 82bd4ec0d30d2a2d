"""On-disk models: a JSON manifest plus headerless little-endian tensor payloads.

Layout of a model directory::

    model.json          manifest (tensors, groups, other_params)
    <name>.bin          raw row-major (F1, F2, I, O) payloads

A factorized artifact directory holds ``model.factorized.json``, the folded
factor payloads under ``factors/`` and ``report.json``.  All paths inside a
manifest are relative to the manifest's own directory.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from jointsvd.budget import ConvLayerSpec, ModelSpec
from jointsvd.errors import CompatibilityError, ManifestError
from jointsvd.joint import (
    DEFAULT_K,
    METHODS,
    DualFactorization,
    LeftSharedFactorization,
    RightSharedFactorization,
    check_compatible,
)
from jointsvd.tensor import Shape4, fold, unfold

FORMAT_VERSION = 1
MANIFEST_NAME = "model.json"
FACTORIZED_NAME = "model.factorized.json"
REPORT_NAME = "report.json"
FACTOR_DIR = "factors"

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: Shape4
    dtype: str = "f64"
    file: str | None = None
    stride: int = 1
    input_hw: tuple[int, int] | None = None

    def layer_spec(self) -> ConvLayerSpec:
        h, w = self.input_hw if self.input_hw else (None, None)
        return ConvLayerSpec(self.shape, self.stride, h, w)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "file": self.file,
            "stride": self.stride,
        }
        if self.input_hw is not None:
            d["input_hw"] = list(self.input_hw)
        return d


@dataclass(frozen=True)
class GroupEntry:
    group_id: int
    method: str
    members: tuple[str, ...]
    rank: int | None = None
    r_r: int | None = None
    r_l: int | None = None
    target_cf: float | None = None
    p: float = 0.5
    k: int = DEFAULT_K

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "group_id": self.group_id,
            "method": self.method,
            "members": list(self.members),
            "p": self.p,
            "k": self.k,
        }
        for key in ("rank", "r_r", "r_l", "target_cf"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d


@dataclass
class ModelManifest:
    tensors: list[TensorEntry]
    groups: list[GroupEntry] = field(default_factory=list)
    other_params: int = 0

    def tensor(self, name: str) -> TensorEntry:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def shapes(self) -> dict[str, Shape4]:
        return {t.name: t.shape for t in self.tensors}

    def model_spec(self) -> ModelSpec:
        return ModelSpec({t.name: t.layer_spec() for t in self.tensors}, self.other_params)

    def validate(self) -> None:
        names = [t.name for t in self.tensors]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ManifestError(f"duplicate tensor names: {sorted(dup)}")
        if self.other_params < 0:
            raise ManifestError("other_params must be >= 0")
        shapes = self.shapes()
        seen: dict[str, int] = {}
        gids = set()
        for g in self.groups:
            if g.group_id in gids:
                raise ManifestError(f"duplicate group_id {g.group_id}")
            gids.add(g.group_id)
            if g.method not in METHODS:
                raise ManifestError(f"group {g.group_id}: unknown method {g.method!r}")
            if not g.members:
                raise ManifestError(f"group {g.group_id} has no members")
            for m in g.members:
                if m not in shapes:
                    raise ManifestError(f"group {g.group_id}: member {m!r} is not a declared tensor")
                if m in seen:
                    raise ManifestError(f"tensor {m!r} appears in groups {seen[m]} and {g.group_id}")
                seen[m] = g.group_id
            if not 0.0 <= g.p <= 1.0:
                raise ManifestError(f"group {g.group_id}: p must lie in [0, 1]")
            if g.k < 1:
                raise ManifestError(f"group {g.group_id}: k must be >= 1")
            check_compatible(list(g.members), [shapes[m] for m in g.members], g.method, g.group_id)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "other_params": self.other_params,
            "tensors": [t.to_dict() for t in self.tensors],
            "groups": [g.to_dict() for g in self.groups],
        }


# --- parsing -----------------------------------------------------------------

def _read_json(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    return doc


def _field(obj: Mapping, key: str, where: str, kind, default=...):
    if key not in obj:
        if default is ...:
            raise ManifestError(f"{where}: missing field {key!r}")
        return default
    value = obj[key]
    if value is None and default is None:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ManifestError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {value!r}")
    return value


def _int_list(obj, key, where, length) -> list[int]:
    value = _field(obj, key, where, list)
    if len(value) != length or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ManifestError(f"{where}.{key}: expected {length} integers, got {value!r}")
    return value


def _parse_tensor(obj, where: str) -> TensorEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    name = _field(obj, "name", where, str)
    try:
        shape = Shape4.of(_int_list(obj, "shape", where, 4))
    except ValueError as exc:
        raise ManifestError(f"{where}.shape: {exc}") from exc
    dtype = _field(obj, "dtype", where, str, "f64")
    if dtype not in DTYPES:
        raise ManifestError(f"{where}.dtype: unknown dtype {dtype!r} (expected one of {sorted(DTYPES)})")
    file = _field(obj, "file", where, str, None)
    stride = _field(obj, "stride", where, int, 1)
    if stride < 1:
        raise ManifestError(f"{where}.stride: must be >= 1")
    hw = None
    if obj.get("input_hw") is not None:
        hw = tuple(_int_list(obj, "input_hw", where, 2))
        if min(hw) < 1:
            raise ManifestError(f"{where}.input_hw: extents must be >= 1")
    return TensorEntry(name, shape, dtype, file, stride, hw)


def _parse_group(obj, where: str) -> GroupEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected an object")
    members = _field(obj, "members", where, list)
    if not all(isinstance(m, str) for m in members):
        raise ManifestError(f"{where}.members: expected a list of tensor names")
    return GroupEntry(
        group_id=_field(obj, "group_id", where, int),
        method=_field(obj, "method", where, str),
        members=tuple(members),
        rank=_field(obj, "rank", where, int, None),
        r_r=_field(obj, "r_r", where, int, None),
        r_l=_field(obj, "r_l", where, int, None),
        target_cf=_field(obj, "target_cf", where, float, None),
        p=_field(obj, "p", where, float, 0.5),
        k=_field(obj, "k", where, int, DEFAULT_K),
    )


def parse_manifest(doc: Mapping, where: str = "manifest") -> ModelManifest:
    version = _field(doc, "format_version", where, int)
    if version != FORMAT_VERSION:
        raise ManifestError(f"{where}: unsupported format_version {version}")
    tensors = [_parse_tensor(t, f"{where}.tensors[{j}]") for j, t in enumerate(_field(doc, "tensors", where, list))]
    groups = [_parse_group(g, f"{where}.groups[{j}]") for j, g in enumerate(_field(doc, "groups", where, list, []))]
    other = _field(doc, "other_params", where, int, 0)
    manifest = ModelManifest(tensors, groups, other)
    try:
        manifest.validate()
    except CompatibilityError as exc:
        raise ManifestError(f"{where}: {exc}") from exc
    return manifest


# --- payloads ----------------------------------------------------------------

def read_payload(path: Path, shape, dtype: str) -> np.ndarray:
    shape = Shape4.of(shape)
    dt = DTYPES[dtype]
    expected = shape.size * dt.itemsize
    if not path.is_file():
        raise FileNotFoundError(f"tensor file not found: {path}")
    actual = path.stat().st_size
    if actual != expected:
        raise ManifestError(f"{path}: expected {expected} bytes for shape {tuple(shape)} {dtype}, found {actual}")
    data = np.fromfile(path, dtype=dt).reshape(shape)
    if not np.all(np.isfinite(data)):
        raise ManifestError(f"{path}: payload contains NaN or Inf")
    return data.astype(dt.newbyteorder("="), copy=False)


def write_payload(path: Path, arr: np.ndarray, dtype: str) -> str:
    """Write ``arr`` as raw little-endian bytes; returns the SHA-256 of the payload."""
    raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes(order="C")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def dump_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(manifest_path, load_weights: bool = True) -> tuple[ModelManifest, dict[str, np.ndarray]]:
    """Parse and validate a manifest; materialise every tensor that names a file."""
    path = Path(manifest_path)
    manifest = parse_manifest(_read_json(path), str(path))
    tensors: dict[str, np.ndarray] = {}
    if load_weights:
        for t in manifest.tensors:
            if t.file is not None:
                tensors[t.name] = read_payload(path.parent / t.file, t.shape, t.dtype)
    return manifest, tensors


def save_model(manifest: ModelManifest, tensors: Mapping[str, np.ndarray], out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    target = out / MANIFEST_NAME
    if target.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {target} (use force)")
    manifest.validate()
    out.mkdir(parents=True, exist_ok=True)
    for t in manifest.tensors:
        if t.file is None:
            continue
        arr = np.asarray(tensors[t.name])
        if arr.shape != tuple(t.shape):
            raise ManifestError(f"tensor {t.name!r} has shape {arr.shape}, manifest says {tuple(t.shape)}")
        write_payload(out / t.file, arr, t.dtype)
    dump_json(target, manifest.to_dict())
    return target


# --- factorized artifacts ----------------------------------------------------

_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def _safe(name: str) -> str:
    return _SAFE.sub("_", name)


def factor_filename(group_id: int, part: str, role: str, member: str | None = None) -> str:
    """``g<id>.right.V.bin`` / ``g<id>.right.U.<member>.bin`` / ``g<id>.left.U.bin`` / ``g<id>.left.V.<member>.bin``."""
    stem = f"g{group_id}.{part}.{role}"
    if member is not None:
        stem += f".{_safe(member)}"
    return f"{FACTOR_DIR}/{stem}.bin"


def _fold_left(u: np.ndarray, shape: Shape4) -> np.ndarray:
    return fold(u, Shape4(shape.f1, 1, shape.i, u.shape[1]))


def _fold_right(v: np.ndarray, shape: Shape4) -> np.ndarray:
    return fold(v, Shape4(1, shape.f2, v.shape[0], shape.o))


def _parts(f) -> tuple[RightSharedFactorization | None, LeftSharedFactorization | None]:
    if isinstance(f, RightSharedFactorization):
        return f, None
    if isinstance(f, LeftSharedFactorization):
        return None, f
    if isinstance(f, DualFactorization):
        return (f.right if f.right.rank_r else None), (f.left if f.left.rank_l else None)
    raise TypeError(f"not a factorization: {type(f).__name__}")


def _factor_record(out: Path, rel: str, arr: np.ndarray, precision: str, role: str, member) -> dict:
    digest = write_payload(out / rel, arr, precision)
    return {"file": rel, "role": role, "member": member, "shape": list(arr.shape),
            "dtype": precision, "sha256": digest}


def save_factorized(
    manifest: ModelManifest,
    source_path,
    results: Mapping[int, dict],
    report: Mapping,
    out_dir,
    precision: str = "f64",
    force: bool = False,
) -> Path:
    """Write folded factors, ``model.factorized.json`` and ``report.json``.

    ``results`` maps group id to a dict with keys ``factorization``,
    ``method``, ``r_r``, ``r_l``, ``p``, ``k`` and ``member_residual_sq``.
    Right-shared parts store ``V`` as ``(1, F2, r, O)`` once and each ``U^n``
    as ``(F1, 1, I, r)``; left-shared parts store ``U`` once and each ``V^n``.
    """
    if precision not in DTYPES:
        raise ManifestError(f"unknown precision {precision!r}")
    out = Path(out_dir)
    target = out / FACTORIZED_NAME
    if target.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {target} (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    shapes = manifest.shapes()
    groups_doc = []
    used_files: set[str] = set()
    for g in manifest.groups:
        if g.group_id not in results:
            raise ManifestError(f"group {g.group_id} was not decomposed")
        res = results[g.group_id]
        right, left = _parts(res["factorization"])
        member_shapes = [shapes[m] for m in g.members]
        factors = []

        def add(rel, arr, role, member):
            if rel in used_files:
                raise ManifestError(f"factor file name collision: {rel}")
            used_files.add(rel)
            factors.append(_factor_record(out, rel, arr, precision, role, member))

        if right is not None:
            if len({(s.f2, s.o) for s in member_shapes}) != 1:
                raise CompatibilityError(
                    f"group {g.group_id}: members differ in (F2, O); the shared right factor has no single folded shape"
                )
            add(factor_filename(g.group_id, "right", "V"), _fold_right(right.shared_v, member_shapes[0]), "right.V", None)
            for name, s, u in zip(g.members, member_shapes, right.member_us):
                add(factor_filename(g.group_id, "right", "U", name), _fold_left(u, s), "right.U", name)
        if left is not None:
            if len({(s.f1, s.i) for s in member_shapes}) != 1:
                raise CompatibilityError(
                    f"group {g.group_id}: members differ in (F1, I); the shared left factor has no single folded shape"
                )
            add(factor_filename(g.group_id, "left", "U"), _fold_left(left.shared_u, member_shapes[0]), "left.U", None)
            for name, s, v in zip(g.members, member_shapes, left.member_vs):
                add(factor_filename(g.group_id, "left", "V", name), _fold_right(v, s), "left.V", name)

        f = res["factorization"]
        entry = {
            "group_id": g.group_id,
            "method": res["method"],
            "members": list(g.members),
            "r_r": int(res["r_r"]),
            "r_l": int(res["r_l"]),
            "p": float(res["p"]),
            "k": int(res["k"]),
            "residual_sq": float(f.residual_sq),
            "member_residual_sq": {m: float(x) for m, x in zip(g.members, res["member_residual_sq"])},
            "factors": factors,
        }
        if isinstance(f, DualFactorization):
            entry["objective_trace"] = [float(x) for x in f.objective_trace]
        groups_doc.append(entry)

    source_rel = os.path.relpath(Path(source_path).resolve(), out.resolve())
    doc = {
        "format_version": FORMAT_VERSION,
        "source": source_rel,
        "precision": precision,
        "other_params": manifest.other_params,
        "groups": groups_doc,
        "report": dict(report),
    }
    dump_json(target, doc)
    dump_json(out / REPORT_NAME, dict(report))
    return target


@dataclass
class FactorizedGroup:
    group_id: int
    method: str
    members: tuple[str, ...]
    r_r: int
    r_l: int
    p: float
    k: int
    residual_sq: float
    member_residual_sq: dict[str, float]
    factors: list[dict]
    # folded arrays keyed by (role, member)
    arrays: dict[tuple[str, str | None], np.ndarray]
    objective_trace: tuple[float, ...] | None = None

    def right_pair(self, member: str):
        if ("right.V", None) not in self.arrays:
            return None
        return self.arrays[("right.U", member)], self.arrays[("right.V", None)]

    def left_pair(self, member: str):
        if ("left.U", None) not in self.arrays:
            return None
        return self.arrays[("left.U", None)], self.arrays[("left.V", member)]

    def factorization(self):
        """Rebuild the in-memory factorization from the folded payloads (float64)."""
        rp = self.right_pair(self.members[0]) is not None
        lp = self.left_pair(self.members[0]) is not None
        right = left = None
        if rp:
            v = unfold(self.arrays[("right.V", None)]).astype(np.float64)
            us = tuple(unfold(self.arrays[("right.U", m)]).astype(np.float64) for m in self.members)
            right = RightSharedFactorization(v, us, v.shape[0], self.residual_sq)
        if lp:
            u = unfold(self.arrays[("left.U", None)]).astype(np.float64)
            vs = tuple(unfold(self.arrays[("left.V", m)]).astype(np.float64) for m in self.members)
            left = LeftSharedFactorization(u, vs, u.shape[1], self.residual_sq)
        if self.method == "rjsvd":
            return right
        if self.method == "ljsvd":
            return left
        n = len(self.members)
        if right is None:
            rows = left.shared_u.shape[0]
            right = RightSharedFactorization(
                np.zeros((0, left.member_vs[0].shape[1])), tuple(np.zeros((rows, 0)) for _ in range(n)), 0, 0.0
            )
        if left is None:
            cols = right.shared_v.shape[1]
            left = LeftSharedFactorization(
                np.zeros((right.member_us[0].shape[0], 0)), tuple(np.zeros((0, cols)) for _ in range(n)), 0, 0.0
            )
        trace = self.objective_trace or (self.residual_sq,)
        return DualFactorization(right, left, self.k, tuple(trace))


@dataclass
class FactorizedArtifact:
    path: Path
    source: Path
    precision: str
    other_params: int
    groups: list[FactorizedGroup]
    report: dict
    digest_failures: list[tuple[int, str | None, str]] = field(default_factory=list)

    def stored_params(self, manifest: ModelManifest) -> int:
        """Scalar count of the compressed model recomputed from the saved factor shapes."""
        grouped = {m for g in self.groups for m in g.members}
        raw = sum(t.shape.size for t in manifest.tensors if t.name not in grouped)
        factors = sum(int(np.prod(f["shape"])) for g in self.groups for f in g.factors)
        return raw + factors + self.other_params


def load_factorized(path) -> FactorizedArtifact:
    """Load an artifact; payloads whose SHA-256 disagrees with the manifest are recorded, not fatal."""
    path = Path(path)
    if path.is_dir():
        path = path / FACTORIZED_NAME
    doc = _read_json(path)
    where = str(path)
    if _field(doc, "format_version", where, int) != FORMAT_VERSION:
        raise ManifestError(f"{where}: unsupported format_version")
    precision = _field(doc, "precision", where, str)
    if precision not in DTYPES:
        raise ManifestError(f"{where}.precision: unknown dtype {precision!r}")
    groups = []
    failures = []
    for j, g in enumerate(_field(doc, "groups", where, list)):
        gw = f"{where}.groups[{j}]"
        arrays = {}
        for fi, rec in enumerate(_field(g, "factors", gw, list)):
            fw = f"{gw}.factors[{fi}]"
            rel = _field(rec, "file", fw, str)
            fpath = path.parent / rel
            arr = read_payload(fpath, _int_list(rec, "shape", fw, 4), _field(rec, "dtype", fw, str))
            if file_sha256(fpath) != _field(rec, "sha256", fw, str):
                failures.append((g["group_id"], rec.get("member"), rel))
            arrays[(_field(rec, "role", fw, str), rec.get("member"))] = arr
        trace = g.get("objective_trace")
        groups.append(FactorizedGroup(
            group_id=_field(g, "group_id", gw, int),
            method=_field(g, "method", gw, str),
            members=tuple(_field(g, "members", gw, list)),
            r_r=_field(g, "r_r", gw, int),
            r_l=_field(g, "r_l", gw, int),
            p=_field(g, "p", gw, float),
            k=_field(g, "k", gw, int),
            residual_sq=_field(g, "residual_sq", gw, float),
            member_residual_sq=dict(_field(g, "member_residual_sq", gw, dict)),
            factors=list(g["factors"]),
            arrays=arrays,
            objective_trace=tuple(trace) if trace is not None else None,
        ))
    return FactorizedArtifact(
        path=path,
        source=(path.parent / _field(doc, "source", where, str)).resolve(),
        precision=precision,
        other_params=_field(doc, "other_params", where, int),
        groups=groups,
        report=dict(_field(doc, "report", where, dict)),
        digest_failures=failures,
    )
