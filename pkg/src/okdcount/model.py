"""Two-branch density regression network.

A shared shallow stem feeds a wide teacher branch and a narrow student
branch with identical topology. Blocks are numbered from 2 (the stem is
block 1); each block's output — taken after its trailing max-pool, when it
has one — is a feature tap used by the distillation losses. Per-block 1x1
adapters lift student features to teacher width; they exist only for
training and are excluded from deployment parameter counts.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Parameter, Tensor

KERNEL = 3
INIT_STD = 0.01
# "gaussian" draws every weight from N(0, INIT_STD) — the scheme the
# architecture was published with, which presumes a pre-trained front end.
# "scaled" uses fan-in scaling (std = sqrt(2/fan_in)), the right choice when
# training from scratch; tiny fixed-std weights shrink activations layer
# after layer until only the head bias can learn.
INIT_MODES = ("gaussian", "scaled")

CKPT_MAGIC = b"OKDC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    """Out-channels per conv, shared dilation, and an optional trailing pool."""

    channels: tuple
    dilation: int = 1
    pool: bool = False


@dataclass(frozen=True)
class BranchConfig:
    stem: BlockSpec
    blocks: tuple

    def __post_init__(self):
        for spec in (self.stem,) + tuple(self.blocks):
            if not spec.channels or any(c < 1 for c in spec.channels):
                raise ConfigError(f"block channels must be positive, got {spec.channels}")
            if spec.dilation < 1:
                raise ConfigError(f"dilation must be >= 1, got {spec.dilation}")
        if not self.blocks:
            raise ConfigError("a branch needs at least one block beyond the stem")

    @property
    def downsample(self) -> int:
        pools = int(self.stem.pool) + sum(int(b.pool) for b in self.blocks)
        return 2 ** pools


def full_config() -> BranchConfig:
    """Full-scale teacher: VGG-style front end, dilated tapering back end."""
    return BranchConfig(
        stem=BlockSpec((64, 64), pool=True),
        blocks=(
            BlockSpec((128, 128), pool=True),
            BlockSpec((256, 256, 256), pool=True),
            BlockSpec((512, 512, 512)),
            BlockSpec((512, 256, 128), dilation=2),
        ),
    )


def desk_config() -> BranchConfig:
    """Small teacher with the same topology, sized for CPU experiments."""
    return BranchConfig(
        stem=BlockSpec((16, 16), pool=True),
        blocks=(
            BlockSpec((32, 32), pool=True),
            BlockSpec((48, 48, 48), pool=True),
            BlockSpec((64, 64, 64)),
            BlockSpec((64, 64, 64), dilation=2),
        ),
    )


def scale_widths(cfg: BranchConfig, multiplier: float, floor: int = 8) -> BranchConfig:
    """Derive a narrow branch: scale block widths, keep the stem unchanged."""
    if multiplier <= 0:
        raise ConfigError(f"width multiplier must be positive, got {multiplier}")
    blocks = tuple(
        BlockSpec(
            tuple(max(floor, int(round(c * multiplier))) for c in b.channels),
            b.dilation,
            b.pool,
        )
        for b in cfg.blocks
    )
    return BranchConfig(cfg.stem, blocks)


def config_to_dict(cfg: BranchConfig) -> dict:
    return {
        "stem": {"channels": list(cfg.stem.channels), "pool": cfg.stem.pool},
        "blocks": [
            {"channels": list(b.channels), "dilation": b.dilation, "pool": b.pool}
            for b in cfg.blocks
        ],
    }


def config_from_dict(d: dict) -> BranchConfig:
    try:
        stem = BlockSpec(tuple(d["stem"]["channels"]), 1, bool(d["stem"].get("pool", True)))
        blocks = tuple(
            BlockSpec(tuple(b["channels"]), int(b.get("dilation", 1)), bool(b.get("pool", False)))
            for b in d["blocks"]
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed branch config: {e}") from e
    return BranchConfig(stem, blocks)


class ConvLayer:
    """Conv + bias; same-size padding. Weights zero-mean Gaussian, biases zero."""

    def __init__(self, name, cin, cout, rng, k=KERNEL, dilation=1, init="gaussian"):
        if init == "gaussian":
            std = INIT_STD
        elif init == "scaled":
            std = math.sqrt(2.0 / (cin * k * k))
        else:
            raise ConfigError(f"unknown init mode {init!r}, expected one of {INIT_MODES}")
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin, k, k)), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")
        self.dilation = dilation

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, dilation=self.dilation)

    def params(self):
        return [self.weight, self.bias]

    def macs_per_pixel(self) -> int:
        cout, cin, k, _ = self.weight.shape
        return cout * cin * k * k


@dataclass
class FeatureGroup:
    """Per-block feature taps, shallow to deep (block 2 first)."""

    teacher: list
    student: list
    adapted: list  # student taps through the 1x1 adapters


@dataclass
class JointOutput:
    teacher_density: Tensor
    student_density: Tensor
    features: FeatureGroup


def _build_block(name, cin, spec, rng, init):
    layers = []
    for i, cout in enumerate(spec.channels, start=1):
        layers.append(
            ConvLayer(f"{name}.conv{i}", cin, cout, rng, dilation=spec.dilation, init=init)
        )
        cin = cout
    return layers, cin


class Model:
    """Shared stem + teacher/student branches + train-only adapters."""

    def __init__(
        self,
        teacher_cfg: BranchConfig,
        student_cfg: BranchConfig,
        seed: int = 0,
        init: str = "gaussian",
    ):
        if teacher_cfg.stem != student_cfg.stem:
            raise ConfigError("teacher and student must share an identical stem")
        if len(teacher_cfg.blocks) != len(student_cfg.blocks):
            raise ConfigError("teacher and student need the same block count")
        for bt, bs in zip(teacher_cfg.blocks, student_cfg.blocks):
            if len(bt.channels) != len(bs.channels):
                raise ConfigError("teacher and student blocks need matching conv counts")
            if bt.dilation != bs.dilation or bt.pool != bs.pool:
                raise ConfigError("teacher and student blocks need matching dilation/pool")
        if init not in INIT_MODES:
            raise ConfigError(f"unknown init mode {init!r}, expected one of {INIT_MODES}")
        self.teacher_cfg = teacher_cfg
        self.student_cfg = student_cfg
        self.seed = int(seed)
        self.init = init
        rng = np.random.default_rng(seed)

        self.stem, stem_out = _build_block("stem", 3, teacher_cfg.stem, rng, init)
        self._stem_pool = teacher_cfg.stem.pool

        def build_branch(prefix, cfg):
            blocks, cin = [], stem_out
            for bi, spec in enumerate(cfg.blocks, start=2):
                layers, cin = _build_block(f"{prefix}.block{bi}", cin, spec, rng, init)
                blocks.append((layers, spec.pool))
            head = ConvLayer(f"{prefix}.head", cin, 1, rng, k=1, init=init)
            return blocks, head

        self.teacher_blocks, self.teacher_head = build_branch("teacher", teacher_cfg)
        self.student_blocks, self.student_head = build_branch("student", student_cfg)

        self.adapters = []
        for bi, (bt, bs) in enumerate(zip(teacher_cfg.blocks, student_cfg.blocks), start=2):
            self.adapters.append(
                ConvLayer(
                    f"adapter.block{bi}", bs.channels[-1], bt.channels[-1], rng, k=1, init=init
                )
            )

    @property
    def downsample(self) -> int:
        return self.teacher_cfg.downsample

    # -- parameter access ----------------------------------------------------

    def _branch_layers(self, branch: str):
        blocks = self.teacher_blocks if branch == "teacher" else self.student_blocks
        head = self.teacher_head if branch == "teacher" else self.student_head
        return [layer for layers, _ in blocks for layer in layers] + [head]

    def parameters(self, component: str | None = None):
        if component is None:
            out = []
            for key in ("stem", "teacher", "student", "adapters"):
                out.extend(self.parameters(key))
            return out
        if component == "stem":
            layers = self.stem
        elif component in ("teacher", "student"):
            layers = self._branch_layers(component)
        elif component == "adapters":
            layers = self.adapters
        else:
            raise ConfigError(f"unknown component {component!r}")
        return [p for layer in layers for p in layer.params()]

    def param_count(self, component: str | None = None) -> int:
        return sum(p.data.size for p in self.parameters(component))

    def mac_count(self, component: str, height: int, width: int) -> int:
        """Multiply-accumulate count for one forward pass at the given input size."""
        if height % self.downsample or width % self.downsample:
            raise ShapeError(f"input {height}x{width} not divisible by {self.downsample}")
        h, w = height, width
        total = 0
        stem_macs = 0
        for layer in self.stem:
            stem_macs += layer.macs_per_pixel() * h * w
        if self._stem_pool:
            h, w = h // 2, w // 2
        if component == "stem":
            return stem_macs

        blocks = {"teacher": self.teacher_blocks, "student": self.student_blocks}.get(component)
        if blocks is None:
            raise ConfigError(f"unknown component {component!r}")
        head = self.teacher_head if component == "teacher" else self.student_head
        for layers, pool in blocks:
            for layer in layers:
                total += layer.macs_per_pixel() * h * w
            if pool:
                h, w = h // 2, w // 2
        total += head.macs_per_pixel() * h * w
        return total

    # -- forward passes --------------------------------------------------------

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input of shape (B, 3, H, W), got {x.shape}")
        _, _, h, w = x.shape
        ds = self.downsample
        if h % ds or w % ds:
            raise ShapeError(f"input {h}x{w} must be divisible by {ds}")

    def stem_forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        cur = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.stem:
            cur = T.relu(layer(cur))
        if self._stem_pool:
            cur = T.maxpool2d(cur)
        return cur

    def branch_forward(self, base: Tensor, branch: str):
        """Run one branch from the stem output; returns (density, feature taps)."""
        if branch == "teacher":
            blocks, head = self.teacher_blocks, self.teacher_head
        elif branch == "student":
            blocks, head = self.student_blocks, self.student_head
        else:
            raise ConfigError(f"unknown branch {branch!r}")
        cur = base
        feats = []
        for layers, pool in blocks:
            for layer in layers:
                cur = T.relu(layer(cur))
            if pool:
                cur = T.maxpool2d(cur)
            feats.append(cur)
        density = T.relu(head(cur))
        return density, feats

    def adapt(self, student_feats):
        if len(student_feats) != len(self.adapters):
            raise ShapeError("one adapter per feature block is required")
        return [ad(f) for ad, f in zip(self.adapters, student_feats)]

    def forward_joint(self, image) -> JointOutput:
        base = self.stem_forward(image)
        t_density, t_feats = self.branch_forward(base, "teacher")
        s_density, s_feats = self.branch_forward(base, "student")
        adapted = self.adapt(s_feats)
        return JointOutput(t_density, s_density, FeatureGroup(t_feats, s_feats, adapted))

    def forward_density(self, image, branch: str) -> Tensor:
        density, _ = self.branch_forward(self.stem_forward(image), branch)
        return density

    def predict(self, images: np.ndarray, branch: str = "student") -> np.ndarray:
        """Density maps for a (B, 3, H, W) array, without building a graph."""
        with T.no_grad():
            return self.forward_density(Tensor(images), branch).data


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for p in model.parameters():
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(p.data.astype("<f8").tobytes())


def read_checkpoint(path):
    """Parse a checkpoint into (name, array) pairs, in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at offset 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    entries = []

    def need(n, what):
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated {what} at offset {off}")

    while off < len(blob):
        need(4, "name length")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(nlen, "name")
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        need(4, "rank")
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(4 * ndim, "shape")
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = 1
        for s in shape:
            count *= s
        need(8 * count, f"data for {name!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        entries.append((name, arr))
    return entries


def load_checkpoint(model: Model, path):
    """Load parameters into an existing model; names and shapes must match."""
    entries = read_checkpoint(path)
    params = {p.name: p for p in model.parameters()}
    seen = set()
    for name, arr in entries:
        p = params.get(name)
        if p is None:
            raise ConfigError(f"checkpoint parameter {name!r} not present in model")
        if p.data.shape != arr.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data[...] = arr
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {', '.join(missing[:5])}")
