"""Bundled model definitions: CIFAR ResNets as size-only manifests and small toy models.

The ResNets follow the CIFAR layout: a 3x3/64 stem, four stages at 32, 16, 8
and 4 pixels, 1x1 projection shortcuts where the shape changes, and a
10-way fully connected head.  Batch-norm scale/shift and the head are
counted in ``other_params``.  Only stages 3-5 are grouped for decomposition;
the stem, stage 2 and the shortcuts stay intact.

Group layout per stage: one group per position inside the block, collecting
that position across every block of the stage.  The first layer of a stage
sees half the input depth of its peers (the "HID" layer); by default it gets
a group of its own, and with ``hid_joint=True`` it joins its position group,
which only the right-shared method can stack.
"""
from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from jointsvd.model_io import GroupEntry, ModelManifest, TensorEntry, load_model, save_model
from jointsvd.tensor import Shape4

RESNET_BLOCKS = {
    18: ((2, 2, 2, 2), False),
    34: ((3, 4, 6, 3), False),
    50: ((3, 4, 6, 3), True),
}
STAGE_WIDTHS = (64, 128, 256, 512)
DECOMPOSED_STAGES = (3, 4, 5)


def resnet_manifest(depth: int, num_classes: int = 10, hid_joint: bool = False, input_hw: int = 32) -> ModelManifest:
    if depth not in RESNET_BLOCKS:
        raise ValueError(f"unsupported ResNet depth {depth}; choose from {sorted(RESNET_BLOCKS)}")
    blocks, bottleneck = RESNET_BLOCKS[depth]
    tensors: list[TensorEntry] = []
    bn_channels = 0

    def add(name, f, cin, cout, stride, h):
        nonlocal bn_channels
        tensors.append(TensorEntry(name, Shape4(f, f, cin, cout), "f32", None, stride, (h, h)))
        bn_channels += cout
        return math.ceil(h / stride)

    h = add("conv1", 3, 3, 64, 1, input_hw)
    cin = 64
    positions: dict[tuple[int, str], list[str]] = {}
    for stage, (width, nblocks) in enumerate(zip(STAGE_WIDTHS, blocks), start=2):
        for b in range(1, nblocks + 1):
            stride = 2 if (stage > 2 and b == 1) else 1
            prefix = f"conv{stage}_{b}"
            h_in = h
            if bottleneck:
                cout = 4 * width
                # stride sits on the 3x3 conv
                add(prefix + "a", 1, cin, width, 1, h_in)
                h = add(prefix + "b", 3, width, width, stride, h_in)
                add(prefix + "c", 1, width, cout, 1, h)
                names = "abc"
            else:
                cout = width
                h = add(prefix + "a", 3, cin, width, stride, h_in)
                add(prefix + "b", 3, width, width, 1, h)
                names = "ab"
            if stride != 1 or cin != cout:
                add(prefix + "sc", 1, cin, cout, stride, h_in)
            for pos in names:
                positions.setdefault((stage, pos), []).append(prefix + pos)
            cin = cout

    groups: list[GroupEntry] = []
    shapes = {t.name: t.shape for t in tensors}
    for (stage, pos), members in positions.items():
        if stage not in DECOMPOSED_STAGES:
            continue
        hid = [m for m in members if shapes[m].i != shapes[members[-1]].i]
        rest = [m for m in members if m not in hid]
        if hid and not hid_joint:
            for m in hid:
                groups.append(GroupEntry(len(groups), "rjsvd", (m,)))
            members = rest
        groups.append(GroupEntry(len(groups), "rjsvd", tuple(members)))

    other = 2 * bn_channels + cin * num_classes + num_classes
    return ModelManifest(tensors, groups, other)


def _member_weights(rng, shape: Shape4, n: int, shared: float = 0.7) -> list[np.ndarray]:
    std = math.sqrt(2.0 / (shape.f1 * shape.f2 * shape.i))
    common = rng.standard_normal(tuple(shape))
    return [
        std * (shared * common + math.sqrt(1 - shared ** 2) * rng.standard_normal(tuple(shape)))
        for _ in range(n)
    ]


def toy_pair_model(seed: int = 0) -> tuple[ModelManifest, dict[str, np.ndarray]]:
    """One group of two 3x3x4x4 layers with no other parameters."""
    rng = np.random.default_rng(seed)
    shape = Shape4(3, 3, 4, 4)
    weights = _member_weights(rng, shape, 2)
    names = ["layer0", "layer1"]
    tensors = [TensorEntry(n, shape, "f64", f"{n}.bin", 1, (8, 8)) for n in names]
    manifest = ModelManifest(tensors, [GroupEntry(0, "rjsvd", tuple(names))], 0)
    return manifest, dict(zip(names, weights))


TOY4_GROUPS = (
    # (shape, members, stride, input hw)
    (Shape4(3, 3, 8, 8), 3, 1, 8),
    (Shape4(3, 3, 8, 16), 2, 2, 8),
    (Shape4(1, 1, 16, 16), 2, 1, 4),
    (Shape4(5, 5, 4, 6), 3, 1, 7),
)


def toy4_model(seed: int = 0) -> tuple[ModelManifest, dict[str, np.ndarray]]:
    """Four stackable groups plus one undecomposed stem layer."""
    rng = np.random.default_rng(seed)
    tensors = [TensorEntry("stem", Shape4(3, 3, 3, 8), "f64", "stem.bin", 1, (8, 8))]
    weights = {"stem": rng.standard_normal((3, 3, 3, 8)) * 0.2}
    groups = []
    for gid, (shape, n, stride, hw) in enumerate(TOY4_GROUPS):
        names = [f"g{gid}_m{j}" for j in range(n)]
        for name, w in zip(names, _member_weights(rng, shape, n)):
            tensors.append(TensorEntry(name, shape, "f64", f"{name}.bin", stride, (hw, hw)))
            weights[name] = w
        groups.append(GroupEntry(gid, "rjsvd", tuple(names)))
    return ModelManifest(tensors, groups, 2 * 8 + 2 * (8 + 16 + 16 + 6)), weights


def data_dir() -> Path:
    return Path(str(resources.files("jointsvd") / "data"))


BUNDLED = ("resnet18", "resnet34", "resnet50", "toy_pair", "toy4")


def bundled_path(name: str) -> Path:
    """Manifest path of a bundled model by name."""
    if name.startswith("resnet"):
        return data_dir() / f"{name}.json"
    if name in ("toy_pair", "toy4"):
        return data_dir() / name / "model.json"
    raise KeyError(f"unknown bundled model {name!r}; choose from {BUNDLED}")


def write_bundled(root: Path | None = None) -> None:
    from jointsvd.model_io import dump_json

    root = Path(root) if root is not None else data_dir()
    root.mkdir(parents=True, exist_ok=True)
    for depth in RESNET_BLOCKS:
        dump_json(root / f"resnet{depth}.json", resnet_manifest(depth).to_dict())
    save_model(*toy_pair_model(), root / "toy_pair", force=True)
    save_model(*toy4_model(), root / "toy4", force=True)


def load_bundled(name: str):
    return load_model(bundled_path(name))


if __name__ == "__main__":
    write_bundled()
