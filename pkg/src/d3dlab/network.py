"""MiniS3D: a small separable 3D CNN with Inception-style named taps.

Every block is a 1x3x3 spatial conv, a 3x1x1 temporal conv, a per-channel
affine and a ReLU. Pooling follows Conv1, Block3B and Block4F; Conv1 also
strides 2 in space, as the stem of S3D does.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as tc
from .tensor import ConvSpec, Parameters, Tensor


class LayerName(str, enum.Enum):
    Conv1 = "Conv1"
    Conv2C = "Conv2C"
    Block3A = "Block3A"
    Block3B = "Block3B"
    Block4A = "Block4A"
    Block4C = "Block4C"
    Block4F = "Block4F"
    Block5B = "Block5B"
    GlobalPool = "GlobalPool"
    Logits = "Logits"

    @property
    def order(self) -> int:
        return _ORDER[self]

    @property
    def short(self) -> str:
        return self.value.replace("Block", "").replace("Conv2C", "2C")

    @classmethod
    def parse(cls, name) -> "LayerName":
        """Accept 'Block3A', '3A', '3a', 'conv2c', '2C', ..."""
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        for layer in cls:
            v = layer.value.lower()
            if key in (v, v.replace("block", ""), v.replace("conv", "")):
                return layer
        raise ValueError(f"unknown layer name {name!r}; expected one of {[l.value for l in cls]}")

    def __str__(self) -> str:
        return self.value


_ORDER = {layer: i for i, layer in enumerate(LayerName)}

# (layer, width multiplier, spatial-conv stride, pooling window after the block)
BLOCKS: tuple[tuple[LayerName, int, tuple[int, int, int], tuple[int, int, int] | None], ...] = (
    (LayerName.Conv1, 1, (1, 2, 2), (1, 2, 2)),
    (LayerName.Conv2C, 1, (1, 1, 1), None),
    (LayerName.Block3A, 2, (1, 1, 1), None),
    (LayerName.Block3B, 2, (1, 1, 1), (2, 2, 2)),
    (LayerName.Block4A, 4, (1, 1, 1), None),
    (LayerName.Block4C, 4, (1, 1, 1), None),
    (LayerName.Block4F, 8, (1, 1, 1), (2, 2, 2)),
    (LayerName.Block5B, 8, (1, 1, 1), None),
)

CONV_LAYERS = tuple(b[0] for b in BLOCKS)

# restores unit activation second moment through two fan-in-uniform convs and a ReLU
AFFINE_SCALE_INIT = math.sqrt(18.0)


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    num_classes: int = 4
    base_width: int = 8
    clip_extents: tuple[int, int, int] = (8, 32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.base_width < 4:
            raise ValueError(f"base_width must be >= 4, got {self.base_width}")
        if self.clip_extents[0] < 4:
            raise ValueError(f"clip T must be >= 4, got {self.clip_extents[0]}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")

    def with_seed(self, seed: int) -> "NetworkConfig":
        return replace(self, seed=seed)


@dataclass
class FeatureTap:
    layer: LayerName
    activation: Tensor
    temporal_stride: int
    spatial_stride: tuple[int, int]

    @property
    def stride(self) -> tuple[int, int, int]:
        return (self.temporal_stride, *self.spatial_stride)


@dataclass(frozen=True)
class LayerShape:
    layer: LayerName
    channels: int
    extents: tuple[int, int, int]
    stride: tuple[int, int, int]


def layer_shapes(config: NetworkConfig) -> list[LayerShape]:
    """Per-layer output channels, extents and cumulative stride.

    Raises ValueError naming the first layer whose extents collapse.
    """
    ext = tuple(config.clip_extents)
    full = ext
    shapes = []
    for layer, mult, stride, pool in BLOCKS:
        out, _ = tc.conv_output_extents(ext, (1, 3, 3), stride, "same")
        ext = out
        ch = mult * config.base_width
        shapes.append(LayerShape(layer, ch, ext, tuple(f // e for f, e in zip(full, ext))))
        if pool is not None:
            if any(e < k for e, k in zip(ext, pool)):
                raise ValueError(f"clip extents {config.clip_extents} too small: pooling after {layer} "
                                 f"needs {pool}, activation is {ext}")
            ext = tuple(e // k for e, k in zip(ext, pool))
    c_last = shapes[-1].channels
    shapes.append(LayerShape(LayerName.GlobalPool, c_last, (1, 1, 1), full))
    shapes.append(LayerShape(LayerName.Logits, config.num_classes, (1, 1, 1), full))
    for s in shapes:
        if any(f % e for f, e in zip(full, s.extents)):
            raise ValueError(f"clip extents {config.clip_extents} not divisible down to {s.layer} extents {s.extents}")
    return shapes


class Network:
    """A built MiniS3D. Parameters live in ``params`` keyed by layer."""

    def __init__(self, config: NetworkConfig, params: Parameters | None = None):
        self.config = config
        self.shapes = layer_shapes(config)
        self._shape_of = {s.layer: s for s in self.shapes}
        self.params: Parameters = params if params is not None else self._init_params()

    def _init_params(self) -> Parameters:
        rng = np.random.default_rng(self.config.seed)
        params: Parameters = {}
        cin = self.config.input_channels

        def uniform(shape, fan_in):
            bound = math.sqrt(1.0 / fan_in)
            return tc.parameter(rng.uniform(-bound, bound, size=shape))

        for layer, mult, _, _ in BLOCKS:
            cout = mult * self.config.base_width
            params[f"{layer}.spatial.weight"] = uniform((cout, cin, 1, 3, 3), cin * 9)
            params[f"{layer}.temporal.weight"] = uniform((cout, cout, 3, 1, 1), cout * 3)
            params[f"{layer}.scale"] = tc.parameter(np.full(cout, AFFINE_SCALE_INIT))
            params[f"{layer}.bias"] = tc.parameter(np.zeros(cout))
            cin = cout
        k = self.config.num_classes
        params["Logits.weight"] = uniform((k, cin), cin)
        params["Logits.bias"] = uniform((k,), cin)
        return params

    def channels(self, layer) -> int:
        return self._shape_of[LayerName.parse(layer)].channels

    def tap_stride(self, layer) -> tuple[int, int, int]:
        return self._shape_of[LayerName.parse(layer)].stride

    def tap_extents(self, layer) -> tuple[int, int, int]:
        return self._shape_of[LayerName.parse(layer)].extents

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "Network":
        return Network(self.config, tc.clone_parameters(self.params))

    def forward(self, clip: Tensor, taps: Iterable = (), stop_at=None) -> tuple[Tensor | None, dict[LayerName, FeatureTap]]:
        """Run the clip through the network.

        Returns pre-softmax logits and the requested taps. With ``stop_at``
        the pass ends after that layer and logits are None.
        """
        wanted = {LayerName.parse(t) for t in taps}
        stop = LayerName.parse(stop_at) if stop_at is not None else None
        if not isinstance(clip, Tensor):
            clip = Tensor(clip)
        exp = (self.config.input_channels, *self.config.clip_extents)
        if tuple(clip.shape[-4:]) != exp or clip.ndim not in (4, 5):
            raise ValueError(f"clip shape {clip.shape} does not match configured (C,T,H,W) {exp}")
        out: dict[LayerName, FeatureTap] = {}

        def record(layer, act):
            if layer in wanted:
                st = self.tap_stride(layer)
                out[layer] = FeatureTap(layer, act, st[0], (st[1], st[2]))

        x = clip
        for layer, mult, stride, pool in BLOCKS:
            p = self.params
            cout = mult * self.config.base_width
            x = tc.conv3d(x, ConvSpec(cout, (1, 3, 3), stride), p[f"{layer}.spatial.weight"])
            x = tc.conv3d(x, ConvSpec(cout, (3, 1, 1)), p[f"{layer}.temporal.weight"])
            x = tc.relu(tc.channel_affine(x, p[f"{layer}.scale"], p[f"{layer}.bias"]))
            record(layer, x)
            if layer == stop:
                return None, out
            if pool is not None:
                x = tc.avg_pool3d(x, pool)
        pooled = tc.global_avg_pool(x)
        if LayerName.GlobalPool in wanted:
            record(LayerName.GlobalPool, tc.reshape(pooled, pooled.shape + (1, 1, 1)))
        if stop == LayerName.GlobalPool:
            return None, out
        logits = tc.linear(pooled, self.params["Logits.weight"], self.params["Logits.bias"])
        record(LayerName.Logits, logits)
        return logits, out

    __call__ = forward

    def calibrate(self, inputs: np.ndarray) -> None:
        """Data-dependent init of the per-channel affines.

        Sets each block's scale and bias so that its pre-ReLU output has zero
        mean and unit variance over ``inputs``, block by block.
        """
        x = Tensor(np.asarray(inputs, dtype=np.float32))
        p = self.params
        with tc.no_grad():
            for layer, mult, stride, pool in BLOCKS:
                cout = mult * self.config.base_width
                h = tc.conv3d(x, ConvSpec(cout, (1, 3, 3), stride), p[f"{layer}.spatial.weight"])
                h = tc.conv3d(h, ConvSpec(cout, (3, 1, 1)), p[f"{layer}.temporal.weight"])
                axes = (0, 2, 3, 4) if h.ndim == 5 else (1, 2, 3)
                mu = h.data.astype(np.float64).mean(axis=axes)
                sd = h.data.astype(np.float64).std(axis=axes)
                scale = 1.0 / np.maximum(sd, 1e-3)
                p[f"{layer}.scale"].data[...] = scale
                p[f"{layer}.bias"].data[...] = -mu * scale
                x = tc.relu(tc.channel_affine(h, p[f"{layer}.scale"], p[f"{layer}.bias"]))
                if pool is not None:
                    x = tc.avg_pool3d(x, pool)


def build_network(config: NetworkConfig) -> Network:
    return Network(config)


def conv_macs(spec: ConvSpec, in_channels: int, in_extents) -> int:
    out, _ = tc.conv_output_extents(in_extents, spec.kernel, spec.stride, spec.padding)
    return spec.out_channels * in_channels * math.prod(spec.kernel) * math.prod(out)


def count_flops(net: Network) -> int:
    """Multiply-accumulates of one forward pass, from shapes alone."""
    cfg = net.config
    ext = tuple(cfg.clip_extents)
    cin = cfg.input_channels
    total = 0
    for layer, mult, stride, pool in BLOCKS:
        cout = mult * cfg.base_width
        sp = ConvSpec(cout, (1, 3, 3), stride)
        total += conv_macs(sp, cin, ext)
        ext, _ = tc.conv_output_extents(ext, sp.kernel, stride, "same")
        total += conv_macs(ConvSpec(cout, (3, 1, 1)), cout, ext)
        if pool is not None:
            ext = tuple(e // k for e, k in zip(ext, pool))
        cin = cout
    return total + cin * cfg.num_classes


def save_network(path, net: Network) -> None:
    tc.save_checkpoint(path, net.params)


def load_network(path, config: NetworkConfig) -> Network:
    params = tc.load_checkpoint(path)
    ref = Network(config)
    for name, t in ref.params.items():
        if name not in params or params[name].shape != t.shape:
            raise ValueError(f"checkpoint {path} does not match config at parameter {name}")
    return Network(config, params)
