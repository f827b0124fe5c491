"""Residual building blocks: a plain ResNet block, the ResNet bottleneck, and ResNeXt.

A ResNeXt block aggregates ``C`` topologically identical bottleneck branches
and adds the (possibly projected) input back: ``y = relu(sum_j T_j(x) + skip(x))``.
Branches are evaluated one by one instead of as a grouped convolution so each
can be inspected and tested on its own.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, relu

__all__ = [
    "ConvParams",
    "BranchParams",
    "ResNetBlockParams",
    "ResNeXtBlockParams",
    "BlockShapeError",
    "named_tensors",
    "init_conv",
    "branch_width",
    "init_resnet_block",
    "init_resnext_block",
    "resnet_block_forward",
    "bottleneck_forward",
    "resnext_block_forward",
    "branch_equivalence_check",
]


class BlockShapeError(ShapeError):
    pass


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    @property
    def signature(self) -> tuple:
        return (self.weight.shape, self.stride, self.padding)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts and yield ``(dotted_name, tensor)`` pairs in field order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_tensors(item, f"{prefix}.{key}" if prefix else str(key))


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0) -> ConvParams:
    """He-uniform weights (variance 2 / fan_in) and zero bias."""
    fan_in = c_in * k * k
    bound = math.sqrt(6.0 / fan_in)
    weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True)
    bias = Tensor(np.zeros(c_out), requires_grad=True)
    return ConvParams(weight, bias, stride, padding)


# -- ResNet --------------------------------------------------------------


@dataclass
class ResNetBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    proj: ConvParams | None = None


def init_resnet_block(rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1) -> ResNetBlockParams:
    proj = init_conv(rng, c_in, c_out, 1, stride) if (c_in != c_out or stride != 1) else None
    return ResNetBlockParams(init_conv(rng, c_in, c_out, 3, stride, 1), init_conv(rng, c_out, c_out, 3, 1, 1), proj)


def _skip(x: Tensor, proj: ConvParams | None, out_shape: tuple[int, ...]) -> Tensor:
    skip = proj(x) if proj is not None else x
    if skip.shape != out_shape:
        raise BlockShapeError(f"residual: skip path {skip.shape} does not match stacked path {out_shape}")
    return skip


def resnet_block_forward(x: Tensor, params: ResNetBlockParams) -> Tensor:
    """relu(conv2(relu(conv1(x))) + skip(x))"""
    if x.shape[1] != params.conv1.weight.shape[1]:
        raise BlockShapeError(f"resnet block expects {params.conv1.weight.shape[1]} channels, got {x.shape[1]}")
    stacked = params.conv2(relu(params.conv1(x)))
    return relu(stacked + _skip(x, params.proj, stacked.shape))


# -- ResNeXt -------------------------------------------------------------


@dataclass
class BranchParams:
    reduce: ConvParams  # 1x1, width -> inner
    conv: ConvParams  # 3x3, inner -> inner (carries the block stride)
    expand: ConvParams  # 1x1, inner -> width

    def __call__(self, x: Tensor) -> Tensor:
        return self.expand(relu(self.conv(relu(self.reduce(x)))))

    @property
    def signature(self) -> tuple:
        return (self.reduce.signature, self.conv.signature, self.expand.signature)


@dataclass
class ResNeXtBlockParams:
    branches: list[BranchParams]
    proj: ConvParams | None = None

    @property
    def cardinality(self) -> int:
        return len(self.branches)


def branch_width(width: int, cardinality: int) -> int:
    return max(4, width // cardinality)


def init_resnext_block(
    rng: np.random.Generator, c_in: int, c_out: int, cardinality: int, stride: int = 1
) -> ResNeXtBlockParams:
    if cardinality < 1:
        raise ValueError(f"cardinality must be >= 1, got {cardinality}")
    inner = branch_width(c_out, cardinality)
    branches = [
        BranchParams(
            init_conv(rng, c_in, inner, 1),
            init_conv(rng, inner, inner, 3, stride, 1),
            init_conv(rng, inner, c_out, 1),
        )
        for _ in range(cardinality)
    ]
    proj = init_conv(rng, c_in, c_out, 1, stride) if (c_in != c_out or stride != 1) else None
    return ResNeXtBlockParams(branches, proj)


def bottleneck_forward(x: Tensor, reduce: ConvParams, conv: ConvParams, expand: ConvParams, proj=None) -> Tensor:
    """Single-path ResNet bottleneck: relu(1x1 -> 3x3 -> 1x1 + skip)."""
    h = conv2d(x, reduce.weight, reduce.bias, reduce.stride, reduce.padding)
    h = conv2d(relu(h), conv.weight, conv.bias, conv.stride, conv.padding)
    h = conv2d(relu(h), expand.weight, expand.bias, expand.stride, expand.padding)
    return relu(h + _skip(x, proj, h.shape))


def resnext_block_forward(x: Tensor, params: ResNeXtBlockParams) -> Tensor:
    if not branch_equivalence_check(params):
        raise BlockShapeError("resnext block: branches are not topologically equivalent")
    total = None
    for branch in params.branches:
        out = branch(x)
        total = out if total is None else total + out
    return relu(total + _skip(x, params.proj, total.shape))


def branch_equivalence_check(params: ResNeXtBlockParams) -> bool:
    """True iff every branch has the same layer shapes, strides and padding."""
    if not params.branches:
        return False
    first = params.branches[0].signature
    return all(b.signature == first for b in params.branches[1:])
