"""UCLF network: construction, forward pass, accounting, serialization.

The network restores codec-degraded single-channel patches.  It is built
from three stages of generalised blocks.  Every block runs two 3x3
convolutions followed by a squeeze-excitation style dense pair whose
sigmoid output scales the second convolution's channels.  Residual blocks
add each surviving scaled channel back onto the input channel it
originated from and pass the remaining input channels through unchanged,
so the block output width always equals its input width.  A fixed head
conv, a fixed transition conv between stages of unequal width, and a
fixed tail conv wrap the stages; the network output is input + tail
(global residual learning).

The tail conv is zero-initialised, so a freshly built network is an exact
identity map.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Rng, Tensor
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    DimensionError,
    TruncatedFileError,
    UnsupportedVersionError,
)

RESIDUAL = "residual"
NON_RESIDUAL = "non_residual"

CHECKPOINT_MAGIC = b"UCLFCKPT"
CHECKPOINT_VERSION = 1

# Per-block channel budgets of the unscaled network, per stage:
# (kind, conv1, conv2, dense1, dense2).  conv2/dense2 of non-residual
# blocks are fixed to the stage width and are never prunable.
_STAGE_WIDTHS = (32, 64, 64)
_STAGE_BLOCKS = (
    ((NON_RESIDUAL, 48, None, 8, None),
     (NON_RESIDUAL, 48, None, 8, None),
     (RESIDUAL, 48, 32, 8, 32)),
    ((RESIDUAL, 96, 64, 16, 64),) * 5,
    ((NON_RESIDUAL, 48, None, 8, None),
     (NON_RESIDUAL, 48, None, 8, None),
     (RESIDUAL, 96, 64, 16, 64)),
)


@dataclass
class BlockSpec:
    """Channel budget of one block; dims shrink as pruning progresses."""

    kind: str
    c1: int
    c2: int
    d1: int
    d2: int
    prunable_c1: bool = True
    prunable_c2: bool = True
    prunable_d1: bool = True
    prunable_d2: bool = True

    def __post_init__(self):
        if self.kind not in (RESIDUAL, NON_RESIDUAL):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.d2 != self.c2:
            raise ConfigError(f"d2 ({self.d2}) must equal c2 ({self.c2}): the scale vector multiplies conv2's channels")
        if self.kind == NON_RESIDUAL and (self.prunable_c2 or self.prunable_d2):
            raise ConfigError("conv2/dense2 of non-residual blocks are not prunable")
        if min(self.c1, self.c2, self.d1, self.d2) < 1:
            raise ConfigError("block channel counts must be >= 1")


@dataclass
class NetworkSpec:
    """Stage widths plus the ordered block specs of each stage."""

    stage_widths: tuple
    blocks: tuple
    patch_size: int = 48

    def __post_init__(self):
        if len(self.stage_widths) != 3 or len(self.blocks) != 3:
            raise ConfigError("the network has exactly three stages")
        for si, stage in enumerate(self.blocks):
            width = self.stage_widths[si]
            for spec in stage:
                if spec.kind == NON_RESIDUAL and spec.c2 != width:
                    raise ConfigError("non-residual conv2 width must equal the stage width")
                if spec.kind == RESIDUAL and spec.c2 > width:
                    raise ConfigError("residual conv2 width cannot exceed the stage width")

    def transition_pairs(self):
        """Indices (i, i+1) of consecutive stages joined by a transition conv."""
        return [
            (i, i + 1)
            for i in range(2)
            if self.stage_widths[i] != self.stage_widths[i + 1]
        ]


class BlockState:
    """Parameters of one block plus, for residual blocks, the original
    input index of each surviving conv2 channel."""

    def __init__(self, spec: BlockSpec, cin: int, rng: Rng | None = None):
        self.spec = spec
        if rng is not None:
            self.conv1_w = Parameter(_he_conv(rng, spec.c1, cin))
            self.conv1_b = Parameter(np.zeros(spec.c1, np.float32))
            self.conv2_w = Parameter(_he_conv(rng, spec.c2, spec.c1))
            self.conv2_b = Parameter(np.zeros(spec.c2, np.float32))
            self.dense1_w = Parameter(_he_dense(rng, spec.d1, spec.c2))
            self.dense1_b = Parameter(np.zeros(spec.d1, np.float32))
            self.dense2_w = Parameter(_glorot_dense(rng, spec.d2, spec.d1))
            self.dense2_b = Parameter(np.zeros(spec.d2, np.float32))
        self.residual_idx = (
            np.arange(spec.c2, dtype=np.intp) if spec.kind == RESIDUAL else None
        )

    def named_params(self):
        for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                     "dense1_w", "dense1_b", "dense2_w", "dense2_b"):
            yield name, getattr(self, name)

    def clone(self) -> "BlockState":
        out = BlockState(_copy_spec(self.spec), cin=0, rng=None)
        for name, p in self.named_params():
            setattr(out, name, p.clone())
        out.residual_idx = None if self.residual_idx is None else self.residual_idx.copy()
        return out


class ModelState:
    """Full network state: spec, parameters, and pruning history."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.head_w: Parameter = None
        self.head_b: Parameter = None
        self.transitions: dict = {}  # stage index i -> (w, b) conv joining stage i to i+1
        self.tail_w: Parameter = None
        self.tail_b: Parameter = None
        self.stages: list = []
        self.prune_history: list = []

    def named_params(self):
        """Deterministic (key, Parameter) iteration over the whole model."""
        yield "head.w", self.head_w
        yield "head.b", self.head_b
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                for name, p in block.named_params():
                    yield f"s{si}.b{bi}.{name}", p
            if si in self.transitions:
                w, b = self.transitions[si]
                yield f"t{si}.w", w
                yield f"t{si}.b", b
        yield "tail.w", self.tail_w
        yield "tail.b", self.tail_b

    def parameters(self):
        return [p for _, p in self.named_params()]

    def clone(self) -> "ModelState":
        out = ModelState(_copy_network_spec(self.spec))
        out.head_w = self.head_w.clone()
        out.head_b = self.head_b.clone()
        out.tail_w = self.tail_w.clone()
        out.tail_b = self.tail_b.clone()
        out.transitions = {i: (w.clone(), b.clone()) for i, (w, b) in self.transitions.items()}
        out.stages = [[blk.clone() for blk in stage] for stage in self.stages]
        out.prune_history = list(self.prune_history)
        return out

    def forward(self, x: Tensor, tap=None) -> Tensor:
        return network_forward(self, x, tap=tap)


def _copy_spec(spec: BlockSpec) -> BlockSpec:
    return BlockSpec(spec.kind, spec.c1, spec.c2, spec.d1, spec.d2,
                     spec.prunable_c1, spec.prunable_c2,
                     spec.prunable_d1, spec.prunable_d2)


def _copy_network_spec(spec: NetworkSpec) -> NetworkSpec:
    return NetworkSpec(
        tuple(spec.stage_widths),
        tuple(tuple(_copy_spec(b) for b in stage) for stage in spec.blocks),
        spec.patch_size,
    )


def _he_conv(rng: Rng, co: int, ci: int) -> np.ndarray:
    return rng.normal(math.sqrt(2.0 / (ci * 9)), (co, ci, 3, 3))


def _he_dense(rng: Rng, co: int, ci: int) -> np.ndarray:
    return rng.normal(math.sqrt(2.0 / ci), (co, ci))


def _glorot_dense(rng: Rng, co: int, ci: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (ci + co))
    return rng.uniform(-bound, bound, (co, ci))


def default_network_spec(width_scale: float = 1.0, patch_size: int = 48) -> NetworkSpec:
    """Scaled copy of the reference topology; widths round up, minimum 1."""
    if width_scale <= 0 or width_scale > 1:
        raise ConfigError(f"width_scale must be in (0, 1], got {width_scale}")

    def scaled(v: int) -> int:
        return max(1, math.ceil(width_scale * v))

    widths = tuple(scaled(w) for w in _STAGE_WIDTHS)
    stages = []
    for si, stage in enumerate(_STAGE_BLOCKS):
        blocks = []
        for kind, c1, c2, d1, d2 in stage:
            if kind == NON_RESIDUAL:
                c2 = d2 = widths[si]
                blocks.append(BlockSpec(kind, scaled(c1), c2, scaled(d1), d2,
                                        prunable_c2=False, prunable_d2=False))
            else:
                blocks.append(BlockSpec(kind, scaled(c1), scaled(c2), scaled(d1), scaled(d2)))
        stages.append(tuple(blocks))
    return NetworkSpec(widths, tuple(stages), patch_size)


def build_default_uclf(width_scale: float = 1.0, seed: int = 0,
                       patch_size: int = 48) -> ModelState:
    """Build and initialise the network at the given width scale.

    Weights are drawn from one splittable PRNG stream seeded by ``seed``;
    the tail conv is zero-initialised so the fresh model is an identity.
    """
    spec = default_network_spec(width_scale, patch_size)
    rng = Rng(seed)
    model = ModelState(spec)
    model.head_w = Parameter(_he_conv(rng, spec.stage_widths[0], 1))
    model.head_b = Parameter(np.zeros(spec.stage_widths[0], np.float32))
    for si, stage in enumerate(spec.blocks):
        cin = spec.stage_widths[si]
        model.stages.append([BlockState(bs, cin, rng) for bs in stage])
        if (si, si + 1) in spec.transition_pairs():
            w = Parameter(_he_conv(rng, spec.stage_widths[si + 1], spec.stage_widths[si]))
            b = Parameter(np.zeros(spec.stage_widths[si + 1], np.float32))
            model.transitions[si] = (w, b)
    model.tail_w = Parameter(np.zeros((1, spec.stage_widths[2], 3, 3), np.float32))
    model.tail_b = Parameter(np.zeros(1, np.float32))
    return model


def block_forward(block: BlockState, x: Tensor, tap=None, key: str = "") -> Tensor:
    """Run one block.

    conv1 -> ReLU -> conv2 -> squeeze (global pool, dense1 + ReLU,
    dense2 + sigmoid) -> channel scale.  Non-residual blocks return the
    scaled features; residual blocks merge them back onto the input
    channels recorded in ``residual_idx`` and pass the rest through.
    """
    spec = block.spec
    u1 = ad.relu(ad.conv2d(x, block.conv1_w, block.conv1_b))
    if tap is not None:
        tap(f"{key}.conv1", u1.data)
    u2 = ad.conv2d(u1, block.conv2_w, block.conv2_b)
    if tap is not None:
        tap(f"{key}.conv2", u2.data)
    h1 = ad.relu(ad.dense(ad.global_avg_pool(u2), block.dense1_w, block.dense1_b))
    if tap is not None:
        tap(f"{key}.dense1", h1.data)
    s = ad.sigmoid(ad.dense(h1, block.dense2_w, block.dense2_b))
    if tap is not None:
        tap(f"{key}.dense2", s.data)
    y = ad.channel_scale(u2, s)
    if spec.kind == NON_RESIDUAL:
        return y
    return ad.residual_merge(y, x, block.residual_idx)


def network_forward(model: ModelState, x: Tensor, tap=None) -> Tensor:
    """Full forward pass; output = x + tail(features), same shape as x."""
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise DimensionError(f"network input must be (n, 1, h, w), got {x.data.shape}")
    h = ad.relu(ad.conv2d(x, model.head_w, model.head_b))
    for si, stage in enumerate(model.stages):
        for bi, block in enumerate(stage):
            h = block_forward(block, h, tap=tap, key=f"s{si}.b{bi}")
        if si in model.transitions:
            w, b = model.transitions[si]
            h = ad.relu(ad.conv2d(h, w, b))
    t = ad.conv2d(h, model.tail_w, model.tail_b)
    return ad.add(x, t)


def apply_model(model: ModelState, patches: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Filter an (n, 1, h, w) float32 batch; returns the restored batch."""
    patches = np.asarray(patches, dtype=np.float32)
    out = np.empty_like(patches)
    for i in range(0, patches.shape[0], batch_size):
        out[i:i + batch_size] = network_forward(model, Tensor(patches[i:i + batch_size])).data
    return out


def count_parameters(model: ModelState) -> int:
    """Stored weight + bias element count.

    Counts every stored value regardless of sparsity mask: zeroed weights
    still occupy storage; only structured removal lowers this number.
    """
    return sum(p.data.size for p in model.parameters())


def build_report(model: ModelState, reference: int = 879_681) -> str:
    """Human-readable accounting of the built model vs the reference total."""
    total = count_parameters(model)
    deviation = (total - reference) / reference
    lines = [
        f"total_parameters={total}",
        f"reference_parameters={reference}",
        f"deviation={deviation:+.4%}",
    ]
    for si, stage in enumerate(model.stages):
        for bi, block in enumerate(stage):
            s = block.spec
            lines.append(
                f"s{si}.b{bi} kind={s.kind} c1={s.c1} c2={s.c2} d1={s.d1} d2={s.d2}"
            )
    return "\n".join(lines) + "\n"


# -- serialization --------------------------------------------------------

def _spec_to_json(spec: NetworkSpec) -> dict:
    return {
        "stage_widths": list(spec.stage_widths),
        "patch_size": spec.patch_size,
        "blocks": [
            [
                {
                    "kind": b.kind, "c1": b.c1, "c2": b.c2, "d1": b.d1, "d2": b.d2,
                    "p_c1": b.prunable_c1, "p_c2": b.prunable_c2,
                    "p_d1": b.prunable_d1, "p_d2": b.prunable_d2,
                }
                for b in stage
            ]
            for stage in spec.blocks
        ],
    }


def _spec_from_json(d: dict) -> NetworkSpec:
    blocks = tuple(
        tuple(
            BlockSpec(b["kind"], b["c1"], b["c2"], b["d1"], b["d2"],
                      b["p_c1"], b["p_c2"], b["p_d1"], b["p_d2"])
            for b in stage
        )
        for stage in d["blocks"]
    )
    return NetworkSpec(tuple(d["stage_widths"]), blocks, d["patch_size"])


def save_model(model: ModelState, path) -> None:
    """Write a versioned checkpoint; the write is atomic (temp + rename).

    Layout: 8-byte magic, u32 version, u64 header length, JSON header
    (spec, residual indices, prune history, array manifest), then for each
    declared array its float32 little-endian values followed by its mask.
    """
    arrays = list(model.named_params())
    header = {
        "spec": _spec_to_json(model.spec),
        "residual_idx": {
            f"s{si}.b{bi}": [int(v) for v in blk.residual_idx]
            for si, stage in enumerate(model.stages)
            for bi, blk in enumerate(stage)
            if blk.residual_idx is not None
        },
        "prune_history": list(model.prune_history),
        "arrays": [[key, list(p.data.shape)] for key, p in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += CHECKPOINT_VERSION.to_bytes(4, "little")
    payload += len(blob).to_bytes(8, "little")
    payload += blob
    for _, p in arrays:
        payload += p.data.astype("<f4", copy=False).tobytes()
        payload += p.mask.astype("<f4", copy=False).tobytes()

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> ModelState:
    """Read a checkpoint written by :func:`save_model`.

    Raises ``BadMagicError``, ``UnsupportedVersionError`` or
    ``TruncatedFileError`` for the respective corruptions; no partial
    model is ever returned.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 12:
        raise TruncatedFileError(f"{path}: truncated checkpoint header")
    version = int.from_bytes(raw[off:off + 4], "little")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    off += 4
    header_len = int.from_bytes(raw[off:off + 8], "little")
    off += 8
    if len(raw) < off + header_len:
        raise TruncatedFileError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[off:off + header_len].decode("utf-8"))
        spec = _spec_from_json(header["spec"])
        declared = header["arrays"]
        residual_idx = header["residual_idx"]
        prune_history = header["prune_history"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
    off += header_len

    expected = sum(2 * 4 * int(np.prod(shape)) for _, shape in declared)
    if len(raw) - off < expected:
        raise TruncatedFileError(f"{path}: truncated checkpoint payload")
    if len(raw) - off > expected:
        raise CheckpointError(f"{path}: trailing data after checkpoint payload")

    params = {}
    for key, shape in declared:
        size = int(np.prod(shape)) * 4
        value = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        mask = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
        off += size
        p = Parameter(value.copy())
        p.mask = np.ascontiguousarray(mask, dtype=np.float32)
        params[key] = p

    try:
        model = ModelState(spec)
        model.head_w = params["head.w"]
        model.head_b = params["head.b"]
        for si, stage in enumerate(spec.blocks):
            blocks = []
            for bi, bs in enumerate(stage):
                blk = BlockState(bs, cin=0, rng=None)
                for name in ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                             "dense1_w", "dense1_b", "dense2_w", "dense2_b"):
                    setattr(blk, name, params[f"s{si}.b{bi}.{name}"])
                if bs.kind == RESIDUAL:
                    blk.residual_idx = np.asarray(residual_idx[f"s{si}.b{bi}"], dtype=np.intp)
                blocks.append(blk)
            model.stages.append(blocks)
            if f"t{si}.w" in params:
                model.transitions[si] = (params[f"t{si}.w"], params[f"t{si}.b"])
        model.tail_w = params["tail.w"]
        model.tail_b = params["tail.b"]
        model.prune_history = list(prune_history)
    except KeyError as exc:
        raise CheckpointError(f"{path}: checkpoint is missing array {exc}") from exc
    return model
