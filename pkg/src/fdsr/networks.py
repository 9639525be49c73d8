"""SR generator, frozen feature extractor, and proxy classifier head.

The generator alternates up- and down-projection units: each unit resamples,
projects back, and re-resamples the residual so later stages correct earlier
projection errors. All up-unit outputs are concatenated into a final
reconstruction convolution. The feature extractor is a small strided CNN
whose weights are immutable after construction (fingerprinted, never placed
on a tape as trainable).
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor

# (kernel size, stride, padding) of projection resampling layers per scale;
# scale 1 is the degenerate identity-capable configuration used in tests
PROJECTION_GEOMETRY = {1: (1, 1, 0), 2: (6, 2, 2), 4: (8, 4, 2), 8: (12, 8, 2)}

EXTRACTOR_CHANNELS = (8, 16, 32, 32)
EXTRACTOR_STRIDES = (1, 2, 2, 2)
# stride-2 layers use 4x4 kernels so halving is exact on even inputs
EXTRACTOR_KERNELS = (3, 4, 4, 4)


class LayerWeights(NamedTuple):
    kernel: Tensor
    bias: Tensor
    slope: Tensor


@dataclass(frozen=True)
class ProjectionUnit:
    """Weights of one three-layer projection unit plus its resampling geometry."""
    taps: tuple[LayerWeights, LayerWeights, LayerWeights]
    kernel_size: int
    stride: int
    padding: int


@dataclass
class GeneratorConfig:
    scale: int = 4
    stages: int = 2
    base_channels: int = 16
    in_channels: int = 1
    feat_channels: int = 32

    def validate(self):
        if self.scale not in PROJECTION_GEOMETRY:
            raise ConfigurationError(
                f"unsupported scale {self.scale}; choose from {sorted(PROJECTION_GEOMETRY)}")
        if self.stages < 1:
            raise ConfigurationError("generator needs at least one projection stage")
        if min(self.base_channels, self.in_channels, self.feat_channels) < 1:
            raise ConfigurationError("channel counts must be positive")


class GeneratorParams:
    """Learnable generator weights, stored as a flat name -> Tensor map."""

    def __init__(self, config: GeneratorConfig, tensors: "OrderedDict[str, Tensor]"):
        config.validate()
        self.config = config
        self.tensors = tensors

    @property
    def scale(self) -> int:
        return self.config.scale

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.tensors)

    def stage_unit(self, stage: int, kind: str) -> ProjectionUnit:
        k, s, p = PROJECTION_GEOMETRY[self.config.scale]
        taps = tuple(
            LayerWeights(self.tensors[f"stage{stage}/{kind}/{tap}/kernel"],
                         self.tensors[f"stage{stage}/{kind}/{tap}/bias"],
                         self.tensors[f"stage{stage}/{kind}/{tap}/slope"])
            for tap in ("a", "b", "c"))
        return ProjectionUnit(taps, k, s, p)

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.tensors)


class ExtractorParams:
    """Frozen feature extractor: conv layers with ReLU, fixed at creation."""

    frozen = True

    def __init__(self, in_channels: int, tensors: "OrderedDict[str, Tensor]"):
        self.in_channels = in_channels
        self.tensors = tensors
        self.fingerprint = fingerprint_tensors(tensors)

    @property
    def total_stride(self) -> int:
        return int(np.prod(EXTRACTOR_STRIDES))

    @property
    def feature_channels(self) -> int:
        return EXTRACTOR_CHANNELS[-1]

    def layer(self, i: int) -> tuple[Tensor, Tensor, int]:
        return (self.tensors[f"layer{i}/kernel"], self.tensors[f"layer{i}/bias"],
                EXTRACTOR_STRIDES[i])

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.tensors)


class ClassifierHead:
    """Linear read-out over spatially pooled extractor features."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    @property
    def num_classes(self) -> int:
        return self.tensors["head/kernel"].shape[0]

    def named_tensors(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.tensors)

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.tensors)


def fingerprint_tensors(tensors) -> str:
    """Content hash over names, shapes and raw little-endian payloads."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        h.update(np.asarray(t.shape, dtype="<u4").tobytes())
        h.update(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<"),
                                                     copy=False).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# initialization

def _uniform(rng, shape, fan_in, dtype):
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype))


def _conv_layer(rng, name, c_out, c_in, k, tensors, dtype, transposed=False,
                stride=1, slope=True):
    if transposed:
        shape = (c_in, c_out, k, k)
        fan_in = max(1, c_in * k * k // (stride * stride))
    else:
        shape = (c_out, c_in, k, k)
        fan_in = c_in * k * k
    tensors[f"{name}/kernel"] = _uniform(rng, shape, fan_in, dtype)
    tensors[f"{name}/bias"] = Tensor(np.zeros((1, c_out, 1, 1), dtype=dtype))
    if slope:
        tensors[f"{name}/slope"] = Tensor(np.full((1, 1, 1, 1), 0.25, dtype=dtype))


def init_generator(config: GeneratorConfig, seed: int,
                   precision: str = "single") -> GeneratorParams:
    """Freshly initialized generator: uniform(+-sqrt(1/fan_in)) weights,
    zero biases, PReLU slopes at 0.25."""
    config.validate()
    dtype = T.PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    k, s, _ = PROJECTION_GEOMETRY[config.scale]
    c = config.base_channels
    tensors: OrderedDict[str, Tensor] = OrderedDict()

    _conv_layer(rng, "feat0", config.feat_channels, config.in_channels, 3, tensors, dtype)
    _conv_layer(rng, "feat1", c, config.feat_channels, 1, tensors, dtype)
    for t_idx in range(1, config.stages + 1):
        # up unit: deconv, conv, deconv
        _conv_layer(rng, f"stage{t_idx}/up/a", c, c, k, tensors, dtype,
                    transposed=True, stride=s)
        _conv_layer(rng, f"stage{t_idx}/up/b", c, c, k, tensors, dtype)
        _conv_layer(rng, f"stage{t_idx}/up/c", c, c, k, tensors, dtype,
                    transposed=True, stride=s)
        # down unit: conv, deconv, conv
        _conv_layer(rng, f"stage{t_idx}/down/a", c, c, k, tensors, dtype)
        _conv_layer(rng, f"stage{t_idx}/down/b", c, c, k, tensors, dtype,
                    transposed=True, stride=s)
        _conv_layer(rng, f"stage{t_idx}/down/c", c, c, k, tensors, dtype)
    _conv_layer(rng, "recon", config.in_channels, c * config.stages, 3, tensors,
                dtype, slope=False)
    return GeneratorParams(config, tensors)


def init_extractor(in_channels: int, seed: int,
                   precision: str = "single") -> ExtractorParams:
    """Random frozen extractor drawn from a fixed seed (task-agnostic variant)."""
    tensors = init_extractor_tensors(in_channels, seed, precision)
    return ExtractorParams(in_channels, tensors)


def init_extractor_tensors(in_channels: int, seed: int,
                           precision: str = "single") -> "OrderedDict[str, Tensor]":
    """Extractor layer tensors alone, mutable until frozen into ExtractorParams."""
    dtype = T.PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    prev = in_channels
    for i, c_out in enumerate(EXTRACTOR_CHANNELS):
        _conv_layer(rng, f"layer{i}", c_out, prev, EXTRACTOR_KERNELS[i], tensors,
                    dtype, slope=False)
        prev = c_out
    return tensors


def init_classifier_head(num_classes: int, seed: int,
                         precision: str = "single") -> ClassifierHead:
    dtype = T.PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    _conv_layer(rng, "head", num_classes, EXTRACTOR_CHANNELS[-1], 1, tensors,
                dtype, slope=False)
    return ClassifierHead(tensors)


# ---------------------------------------------------------------------------
# forward passes

def _projection_tap(x: Tensor, tap: LayerWeights, unit: ProjectionUnit,
                    up: bool) -> Tensor:
    if up:
        y = T.transposed_conv2d(x, tap.kernel, tap.bias, unit.stride, unit.padding)
    else:
        y = T.conv2d(x, tap.kernel, tap.bias, unit.stride, unit.padding)
    return T.prelu(y, tap.slope)


def up_projection_unit(lr_features: Tensor, unit: ProjectionUnit) -> Tensor:
    """Scale up, project back down, and scale the residual back up:
    h0 = up(x); l0 = down(h0); h1 = up(l0 - x); returns h0 + h1."""
    a, b, c = unit.taps
    h0 = _projection_tap(lr_features, a, unit, up=True)
    l0 = _projection_tap(h0, b, unit, up=False)
    err = T.sub(l0, lr_features)
    h1 = _projection_tap(err, c, unit, up=True)
    return T.add(h0, h1)


def down_projection_unit(hr_features: Tensor, unit: ProjectionUnit) -> Tensor:
    """Mirror of the up unit: l0 = down(x); h0 = up(l0); l1 = down(h0 - x);
    returns l0 + l1."""
    _, _, h, w = hr_features.shape
    if h % unit.stride or w % unit.stride:
        raise DimensionError(
            f"down_projection_unit: spatial dims {(h, w)} not divisible by "
            f"stride {unit.stride}")
    a, b, c = unit.taps
    l0 = _projection_tap(hr_features, a, unit, up=False)
    h0 = _projection_tap(l0, b, unit, up=True)
    err = T.sub(h0, hr_features)
    l1 = _projection_tap(err, c, unit, up=False)
    return T.add(l0, l1)


def generator_forward(gen: GeneratorParams, lr_image: Tensor) -> Tensor:
    """SR image from an LR image in [0, 1]; output clamped to [0, 1]."""
    cfg = gen.config
    if lr_image.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"generator expects {cfg.in_channels} channels, got {lr_image.shape}")
    lo, hi = float(lr_image.data.min()), float(lr_image.data.max())
    if lo < 0.0 or hi > 1.0:
        raise UsageError(f"lr_image values must lie in [0, 1], got [{lo}, {hi}]")

    f = T.prelu(T.conv2d(lr_image, gen.tensors["feat0/kernel"],
                         gen.tensors["feat0/bias"], 1, 1),
                gen.tensors["feat0/slope"])
    f = T.prelu(T.conv2d(f, gen.tensors["feat1/kernel"],
                         gen.tensors["feat1/bias"], 1, 0),
                gen.tensors["feat1/slope"])

    lr_feat = f
    hr_outputs = []
    for t_idx in range(1, cfg.stages + 1):
        h = up_projection_unit(lr_feat, gen.stage_unit(t_idx, "up"))
        hr_outputs.append(h)
        lr_feat = down_projection_unit(h, gen.stage_unit(t_idx, "down"))

    merged = T.concat_channels(hr_outputs)
    sr = T.conv2d(merged, gen.tensors["recon/kernel"], gen.tensors["recon/bias"], 1, 1)
    return T.clamp01(sr)


def extractor_forward(ext: ExtractorParams, image: Tensor) -> Tensor:
    """Feature map of the frozen extractor; differentiable in the image only.

    Extractor weights are never watched, so no parameter gradients can be
    produced, while the convolutions still record and propagate gradients
    through to the image input when it is tracked.
    """
    _, c, h, w = image.shape
    if c != ext.in_channels:
        raise DimensionError(
            f"extractor expects {ext.in_channels} channels, got {image.shape}")
    stride = ext.total_stride
    if h % stride or w % stride:
        raise DimensionError(
            f"extractor input dims {(h, w)} must be divisible by {stride}")
    x = image
    for i in range(len(EXTRACTOR_CHANNELS)):
        kernel, bias, s = ext.layer(i)
        x = T.relu(T.conv2d(x, kernel, bias, s, 1))
    return x


def classifier_logits(ext: ExtractorParams, head: ClassifierHead,
                      images: Tensor) -> Tensor:
    """Class logits: extractor features, spatial average, 1x1 projection."""
    feats = extractor_forward(ext, images)
    pooled = T.mean_spatial(feats)
    return T.conv2d(pooled, head.tensors["head/kernel"], head.tensors["head/bias"], 1, 0)
