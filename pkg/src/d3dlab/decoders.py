"""Flow decoders attached at a network tap, and the probing protocol.

A probe trains a decoder to regress encoded TV-L1 flow from a tap's
activations, either on a frozen backbone or end to end. Decoders never use
temporal kernels; every layer is 1x1x1 or 1x3x3.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tc
from .datasets import ClipSet, SyntheticDataset
from .flowrepr import FlowMetrics, decode_flow, downsample_flow_batch, endpoint_error, flow_loss, pool_flow
from .network import LayerName, Network
from .tensor import ConvSpec, Parameters, Tensor
from .training import TrainingDiverged

log = logging.getLogger(__name__)

PWC_WIDTHS = (128, 128, 96, 64, 32, 3)
SWEEP_HEADER = ("layer", "kind", "mode", "epe", "epe_interior", "steps", "seed")


class DecoderKind(str, enum.Enum):
    Simple = "Simple"
    Spatial = "Spatial"
    PWC = "PWC"
    # harness self-check: predicts zero flow everywhere, never trained
    AllZeros = "AllZeros"

    @classmethod
    def parse(cls, name) -> "DecoderKind":
        if isinstance(name, cls):
            return name
        for k in cls:
            if k.value.lower() == str(name).strip().lower():
                return k
        raise ValueError(f"unknown decoder kind {name!r}; expected one of {[k.value for k in cls]}")

    def __str__(self) -> str:
        return self.value


def decoder_layout(kind: DecoderKind, input_channels: int, cap: bool = True) -> list[ConvSpec]:
    kind = DecoderKind.parse(kind)
    if input_channels < 1:
        raise ValueError(f"input_channels must be >= 1, got {input_channels}")
    c = input_channels
    if kind in (DecoderKind.Simple, DecoderKind.AllZeros):
        return [ConvSpec(3, (1, 1, 1))]
    if kind == DecoderKind.Spatial:
        return [ConvSpec(c, (1, 3, 3)), ConvSpec(c, (1, 3, 3)), ConvSpec(3, (1, 1, 1))]
    widths = list(PWC_WIDTHS)
    if cap and c < 32:
        widths = [min(wd, 4 * c) for wd in widths[:-1]] + [3]
    return [ConvSpec(wd, (1, 3, 3)) for wd in widths]


class Decoder:
    """A stack of convolutions, ReLU between layers, linear output."""

    def __init__(self, kind: DecoderKind, input_channels: int, layers: Sequence[ConvSpec],
                 params: Parameters):
        self.kind = kind
        self.input_channels = input_channels
        self.layers = list(layers)
        self.params = params

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(s.out_channels for s in self.layers)

    def kernels(self) -> list[tuple[int, int, int]]:
        return [s.kernel for s in self.layers]

    def parameters(self) -> list[Tensor]:
        return [] if self.kind == DecoderKind.AllZeros else list(self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1] if x.ndim == 5 else x.shape[0]
        if c != self.input_channels:
            raise ValueError(f"decoder expects {self.input_channels} input channels, tap has {c}")
        if self.kind == DecoderKind.AllZeros:
            shape = list(x.shape)
            shape[-4] = 3
            return Tensor(np.zeros(shape, dtype=np.float32))
        last = len(self.layers) - 1
        for i, spec in enumerate(self.layers):
            x = tc.conv3d(x, spec, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
            if i < last:
                x = tc.relu(x)
        return x

    __call__ = forward


def build_decoder(kind, input_channels: int, cap: bool = True, seed: int = 0,
                  zero_final: bool = False) -> Decoder:
    """Fresh decoder, weights uniform in +-sqrt(1/fan_in), biases zero."""
    kind = DecoderKind.parse(kind)
    layers = decoder_layout(kind, input_channels, cap)
    rng = np.random.default_rng(seed)
    params: Parameters = {}
    cin = input_channels
    for i, spec in enumerate(layers):
        shape = spec.weight_shape(cin)
        bound = math.sqrt(1.0 / (cin * math.prod(spec.kernel)))
        w = rng.uniform(-bound, bound, size=shape)
        if zero_final and i == len(layers) - 1:
            w = np.zeros(shape)
        params[f"{i}.weight"] = tc.parameter(w)
        params[f"{i}.bias"] = tc.parameter(np.zeros(spec.out_channels))
        cin = spec.out_channels
    return Decoder(kind, input_channels, layers, params)


def tap_activation(backbone: Network, clip, tap, fine_tune: bool = False) -> Tensor:
    tap = LayerName.parse(tap)
    if fine_tune:
        return backbone.forward(clip, taps=[tap], stop_at=tap)[1][tap].activation
    with tc.no_grad():
        act = backbone.forward(clip, taps=[tap], stop_at=tap)[1][tap].activation
    return act.detach()


def predict_flow(backbone: Network, decoder: Decoder, clip, tap, fine_tune: bool = False) -> Tensor:
    """Encoded (mag, sin, cos) flow at the tap's resolution.

    Returned as a Tensor with the channel layout of FlowRepr3 so that it stays
    differentiable; gradients reach the backbone only with ``fine_tune``.
    """
    tap = LayerName.parse(tap)
    if decoder.input_channels != backbone.channels(tap):
        raise ValueError(f"decoder built for {decoder.input_channels} channels, "
                         f"{tap} has {backbone.channels(tap)}")
    return decoder(tap_activation(backbone, clip, tap, fine_tune))


@dataclass(frozen=True)
class ProbeConfig:
    layer: LayerName = LayerName.Block3A
    kind: DecoderKind = DecoderKind.PWC
    fine_tune_backbone: bool = False
    steps: int = 300
    lr: float = 0.01
    seed: int = 0
    batch_size: int = 16
    cap: bool = True
    # fine-tuned backbone weights move at backbone_lr_scale * lr
    backbone_lr_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layer", LayerName.parse(self.layer))
        object.__setattr__(self, "kind", DecoderKind.parse(self.kind))
        if self.layer == LayerName.Logits:
            raise ValueError("probe tap must come before Logits")
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("probe needs steps >= 0, lr > 0 and batch_size >= 1")
        if self.backbone_lr_scale < 0:
            raise ValueError(f"backbone_lr_scale must be >= 0, got {self.backbone_lr_scale}")

    @property
    def mode(self) -> str:
        return "ft" if self.fine_tune_backbone else "frozen"


@dataclass
class ProbeResult:
    decoder: Decoder
    backbone: Network
    metrics: FlowMetrics
    losses: list[float] = field(default_factory=list)


def interior_border(extents, stride) -> int:
    """Two full-resolution pixels expressed at tap resolution, kept non-empty."""
    h, w = extents[-2:]
    return max(0, min(math.ceil(2 / stride[-1]), (min(h, w) - 1) // 2))


def reference_flow(data: ClipSet, extents) -> np.ndarray:
    """TV-L1 flow pooled to tap extents: (N, 2, T', H', W')."""
    return np.stack([pool_flow(f, extents) for f in data.flows])


def zeros_epe(backbone: Network, data: ClipSet, tap) -> FlowMetrics:
    """EPE of predicting no motion at the tap's resolution."""
    ext = backbone.tap_extents(tap)
    ref = reference_flow(data, ext)
    return _epe(np.zeros_like(ref), ref, interior_border(ext, backbone.tap_stride(tap)))


def _epe(pred_uv: np.ndarray, ref_uv: np.ndarray, border: int) -> FlowMetrics:
    # stack clips along the frame axis: (2, N*T', H', W')
    p = np.concatenate(list(pred_uv), axis=1)
    r = np.concatenate(list(ref_uv), axis=1)
    return endpoint_error(p, r, border=border)


def evaluate_probe(backbone: Network, decoder: Decoder, data: ClipSet, tap,
                   batch_size: int = 32) -> FlowMetrics:
    tap = LayerName.parse(tap)
    ext = backbone.tap_extents(tap)
    preds = []
    with tc.no_grad():
        for s in range(0, len(data), batch_size):
            out = predict_flow(backbone, decoder, Tensor(data.clips[s:s + batch_size]), tap)
            preds.extend(decode_flow(r).stack() for r in out.data)
    ref = reference_flow(data, ext)
    return _epe(np.stack(preds), ref, interior_border(ext, backbone.tap_stride(tap)))


def _cached_taps(backbone: Network, clips: np.ndarray, tap, batch_size: int = 32) -> np.ndarray:
    out = []
    for s in range(0, len(clips), batch_size):
        out.append(tap_activation(backbone, Tensor(clips[s:s + batch_size]), tap).data)
    return np.concatenate(out)


def train_probe(backbone: Network, cfg: ProbeConfig, dataset: SyntheticDataset) -> ProbeResult:
    """Fit a fresh decoder at ``cfg.layer`` and report held-out EPE.

    A frozen backbone is never touched. With fine-tuning a private copy is
    trained end to end and returned.
    """
    tap = cfg.layer
    decoder = build_decoder(cfg.kind, backbone.channels(tap), cfg.cap, seed=cfg.seed)
    net = backbone.copy() if cfg.fine_tune_backbone else backbone
    train = dataset.train
    targets = downsample_flow_batch(train.flows, net.tap_extents(tap))
    feats = None if cfg.fine_tune_backbone else _cached_taps(net, train.clips, tap)
    tuned = net.parameters() if cfg.fine_tune_backbone else []
    params = decoder.parameters() + tuned
    scales = [1.0] * len(decoder.parameters()) + [cfg.backbone_lr_scale] * len(tuned)
    losses: list[float] = []
    if params and cfg.steps:
        opt = tc.SGD(params, cfg.lr, lr_scales=scales)
        rng = np.random.default_rng(cfg.seed)
        order = np.empty(0, dtype=int)
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(train))])
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            opt.zero_grad()
            if feats is None:
                pred = predict_flow(net, decoder, Tensor(train.clips[idx]), tap, fine_tune=True)
            else:
                pred = decoder(Tensor(feats[idx]))
            loss = flow_loss(pred, targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, "probe loss")
            loss.backward()
            try:
                opt.step()
            except FloatingPointError:
                raise TrainingDiverged(step, "probe gradient") from None
            losses.append(value)
    metrics = evaluate_probe(net, decoder, dataset.val, tap)
    return ProbeResult(decoder, net, metrics, losses)


@dataclass(frozen=True)
class SweepRow:
    layer: LayerName
    kind: DecoderKind
    mode: str
    epe: float
    epe_interior: float
    steps: int
    seed: int
    error: str = ""

    def as_csv(self) -> list[str]:
        return [str(self.layer), str(self.kind), self.mode, repr(self.epe), repr(self.epe_interior),
                str(self.steps), str(self.seed)]


def layer_sweep(backbone: Network, kinds: Iterable, layers: Iterable, dataset: SyntheticDataset,
                modes: Iterable[str] = ("frozen",), steps: int = 300, lr: float = 0.01,
                seed: int = 0, cap: bool = True, backbone_lr_scale: float = 0.1) -> list[SweepRow]:
    """One freshly initialised probe per (layer, kind, mode) cell.

    A failing cell is recorded with NaN EPE and the error text; the sweep
    carries on.
    """
    rows = []
    for layer in (LayerName.parse(l) for l in layers):
        for kind in (DecoderKind.parse(k) for k in kinds):
            for mode in modes:
                if mode not in ("frozen", "ft"):
                    raise ValueError(f"mode must be 'frozen' or 'ft', got {mode!r}")
                cfg = ProbeConfig(layer, kind, mode == "ft", steps, lr, seed, cap=cap,
                                  backbone_lr_scale=backbone_lr_scale)
                try:
                    m = train_probe(backbone, cfg, dataset).metrics
                    rows.append(SweepRow(layer, kind, mode, m.epe, m.epe_interior, steps, seed))
                except (FloatingPointError, ValueError) as exc:
                    log.warning("sweep cell %s/%s/%s failed: %s", layer, kind, mode, exc)
                    rows.append(SweepRow(layer, kind, mode, math.nan, math.nan, steps, seed, str(exc)))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.as_csv())
