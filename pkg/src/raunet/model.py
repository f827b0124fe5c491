"""Residual Attention U-Net and its ablation variants.

``full``          ResNeXt encoder + bridge, LSH attention gates on every skip.
``no_attention``  same encoder, skips concatenated raw (M-A).
``no_resnext``    plain double-conv encoder, attention gates kept (M-R).
``unet``          plain double-conv encoder, raw skips.

Every variant downsamples with 2x2 max pooling, upsamples with a 2x2 stride-2
transposed convolution that halves the channel count, concatenates
``[skip, upsampled]`` and runs two 3x3 conv + ReLU layers.  A 1x1 conv yields
per-pixel class logits; class probabilities are the softmax over that axis.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import GateParams, LshAttentionConfig, attention_gate_2d
from .blocks import (
    ConvParams,
    ResNeXtBlockParams,
    init_conv,
    init_resnext_block,
    named_tensors,
    resnext_block_forward,
)
from .tensor import GeometryError, Tensor, concat, conv2d_transpose, maxpool2d, no_grad, relu, softmax

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "ModelParams",
    "DoubleConv",
    "UpConv",
    "DecoderStage",
    "parameter_init",
    "forward",
    "predict_proba",
    "predict_mask",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "CheckpointShapeError",
]

VARIANTS = ("full", "no_attention", "no_resnext", "unet")
_ALIASES = {"ma": "no_attention", "mr": "no_resnext", "m-a": "no_attention", "m-r": "no_resnext"}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    depth: int = 4
    base_channels: int = 32
    cardinality: int = 8
    n_classes: int = 4
    input_size: int = 368
    blocks_per_stage: int = 2
    attn_dim: int = 8
    attn_rounds: int = 2
    attn_chunk: int = 64
    attn_seed: int = 0

    def __post_init__(self):
        variant = _ALIASES.get(self.variant.lower(), self.variant.lower())
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", variant)
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.input_size % (1 << self.depth):
            raise GeometryError(f"input size {self.input_size} is not divisible by 2**depth = {1 << self.depth}")

    @property
    def uses_resnext(self) -> bool:
        return self.variant in ("full", "no_attention")

    @property
    def uses_attention(self) -> bool:
        return self.variant in ("full", "no_resnext")

    def channels(self, stage: int) -> int:
        return self.base_channels * (1 << stage)

    def gate_config(self, stage: int, height: int, width: int) -> LshAttentionConfig:
        """Hashing setup for the skip at ``stage``: roughly one bucket per chunk."""
        length = height * width
        chunk = min(self.attn_chunk, length)
        buckets = max(2, 2 * round(length / chunk / 2))
        return LshAttentionConfig(self.attn_rounds, buckets, chunk, seed=self.attn_seed + stage)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ValueError(f"unknown model config key {key!r}")
            values[key] = raw.strip() if kinds[key] == "str" else int(raw)
        return cls(**values)


@dataclass
class DoubleConv:
    conv1: ConvParams
    conv2: ConvParams

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))


@dataclass
class UpConv:
    weight: Tensor  # (C_in, C_out, 2, 2)
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return relu(conv2d_transpose(x, self.weight, self.bias, stride=2))


@dataclass
class DecoderStage:
    up: UpConv
    convs: DoubleConv
    gate: GateParams | None = None


@dataclass
class ModelParams:
    encoder: list  # per stage: list[ResNeXtBlockParams] or DoubleConv
    bridge: ResNeXtBlockParams | DoubleConv
    decoder: list[DecoderStage]  # deepest stage first
    head: ConvParams
    config: ModelConfig = field(default_factory=ModelConfig)

    def named(self) -> dict[str, Tensor]:
        return dict(named_tensors(self))

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())


def _double_conv(rng, c_in: int, c_out: int) -> DoubleConv:
    return DoubleConv(init_conv(rng, c_in, c_out, 3, 1, 1), init_conv(rng, c_out, c_out, 3, 1, 1))


def parameter_init(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases and zero attention gains."""
    rng = np.random.default_rng(seed)
    encoder = []
    c_in = 1
    for stage in range(config.depth):
        c_out = config.channels(stage)
        if config.uses_resnext:
            blocks = [init_resnext_block(rng, c_in, c_out, config.cardinality)]
            blocks += [init_resnext_block(rng, c_out, c_out, config.cardinality) for _ in range(config.blocks_per_stage - 1)]
            encoder.append(blocks)
        else:
            encoder.append(_double_conv(rng, c_in, c_out))
        c_in = c_out
    c_bridge = config.channels(config.depth)
    if config.uses_resnext:
        bridge = init_resnext_block(rng, c_in, c_bridge, config.cardinality)
    else:
        bridge = _double_conv(rng, c_in, c_bridge)

    decoder = []
    for stage in reversed(range(config.depth)):
        c_skip = config.channels(stage)
        bound = math.sqrt(6.0 / (2 * c_skip))  # each output pixel sees C_in = 2*c_skip inputs
        up = UpConv(
            Tensor(rng.uniform(-bound, bound, (2 * c_skip, c_skip, 2, 2)), requires_grad=True),
            Tensor(np.zeros(c_skip), requires_grad=True),
        )
        gate = None
        if config.uses_attention:
            qconv = init_conv(rng, c_skip, config.attn_dim, 1)
            gate = GateParams(qconv.weight, qconv.bias, Tensor(np.zeros(c_skip), requires_grad=True))
        decoder.append(DecoderStage(up, _double_conv(rng, 2 * c_skip, c_skip), gate))
    head = init_conv(rng, config.base_channels, config.n_classes, 1)
    return ModelParams(encoder, bridge, decoder, head, config)


def _check_geometry(x: Tensor, config: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise GeometryError(f"model input must be [N, 1, H, W], got {x.shape}")
    h, w = x.shape[2:]
    for stage in range(config.depth):
        if h % 2 or w % 2:
            raise GeometryError(f"encoder stage {stage}: extent {h}x{w} cannot be max-pooled by 2")
        h, w = h // 2, w // 2


def forward(x: Tensor, params: ModelParams, config: ModelConfig | None = None) -> Tensor:
    """Per-pixel class logits ``[N, n_classes, H, W]`` for grayscale input ``[N, 1, H, W]``."""
    config = config or params.config
    _check_geometry(x, config)
    skips = []
    h = x
    for stage in params.encoder:
        if isinstance(stage, DoubleConv):
            h = stage(h)
        else:
            for block in stage:
                h = resnext_block_forward(h, block)
        skips.append(h)
        h = maxpool2d(h)
    h = params.bridge(h) if isinstance(params.bridge, DoubleConv) else resnext_block_forward(h, params.bridge)

    for offset, dec in enumerate(params.decoder):
        stage = config.depth - 1 - offset
        up = dec.up(h)
        skip = skips[stage]
        if dec.gate is not None:
            cfg = config.gate_config(stage, skip.shape[2], skip.shape[3])
            skip = attention_gate_2d(skip, up, dec.gate, cfg)
        h = dec.convs(concat([skip, up], axis=1))
    return params.head(h)


def predict_proba(x: Tensor, params: ModelParams) -> np.ndarray:
    with no_grad():
        return softmax(forward(x, params), axis=1).data


def predict_mask(x: Tensor, params: ModelParams) -> np.ndarray:
    """Per-pixel argmax; ties go to the lower class index."""
    with no_grad():
        return forward(x, params).data.argmax(axis=1)


# -- checkpoints -----------------------------------------------------------

MAGIC = b"RAUN"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    """Write ``RAUN`` | u32 version | config text | u32 count | tensor records (little-endian f32)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = params.config.to_text().encode()
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    named = params.named()
    buf.write(struct.pack("<I", len(named)))
    for name, t in named.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelParams:
    """Read a checkpoint into freshly built params.

    With ``config`` given the tensors are checked against that architecture,
    otherwise the config echoed in the file is used.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    rd = _Reader(data)
    if rd.take(4) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    version = rd.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    try:
        saved_config = ModelConfig.from_text(rd.take(rd.u32()).decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable config block ({exc})") from exc
    records = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode(errors="replace")
        rank = rd.u32()
        shape = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape)
        records[name] = values
    if rd.pos != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - rd.pos} trailing bytes")

    params = parameter_init(config or saved_config, seed=0)
    named = params.named()
    for name, target in named.items():
        if name not in records:
            raise CheckpointShapeError(f"checkpoint has no tensor {name!r} required by this config")
        if records[name].shape != target.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {records[name].shape} != expected {target.shape}"
            )
    extra = [n for n in records if n not in named]
    if extra:
        raise CheckpointShapeError(f"checkpoint tensor {extra[0]!r} has no place in this config")
    for name, target in named.items():
        target.data = records[name].astype(np.float32)
    return params
