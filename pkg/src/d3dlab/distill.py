"""Distilling a frozen flow-stream teacher into an RGB student.

The student minimizes ``[use_action_loss] * L_a + lam * L_d`` where ``L_a`` is
cross-entropy on labels and ``L_d`` the mean squared difference between
student and teacher pre-softmax scores (or tap activations when distilling
at an intermediate layer). Also here: the two alternatives that use flow
without a teacher (flow as an auxiliary target, flow as a learned input),
and softmax-averaging ensembles.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tc
from .datasets import ClipSet
from .decoders import Decoder, DecoderKind, ProbeConfig, build_decoder, train_probe
from .flowrepr import downsample_flow_batch, flow_loss
from .network import LayerName, Network, NetworkConfig
from .tensor import Tensor
from .training import (LossBreakdown, StreamModel, TrainConfig, TrainLog, cross_entropy_step, fit,
                       new_stream, predict_logits, train_stream)

log = logging.getLogger(__name__)

# the intermediate-layer setting uses a heavier weight
INTERMEDIATE_LAMBDA = 100.0
FLOW_FRONT_LAYER = LayerName.Block3A


class TeacherSource(str, enum.Enum):
    TemporalStream = "TemporalStream"
    SpatialStream = "SpatialStream"

    @classmethod
    def parse(cls, name) -> "TeacherSource":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        for s in cls:
            if key in (s.value.lower(), s.value.lower().replace("stream", "")):
                return s
        raise ValueError(f"unknown teacher source {name!r}")

    @property
    def modality(self) -> str:
        return "flow" if self is TeacherSource.TemporalStream else "rgb"


@dataclass(frozen=True)
class DistillLossConfig:
    lam: float = 1.0
    use_action_loss: bool = True
    distill_point: LayerName = LayerName.Logits
    teacher_source: TeacherSource = TeacherSource.TemporalStream
    match_scale: bool = True

    def __post_init__(self):
        object.__setattr__(self, "distill_point", LayerName.parse(self.distill_point))
        object.__setattr__(self, "teacher_source", TeacherSource.parse(self.teacher_source))
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.lam == 0 and not self.use_action_loss:
            raise ValueError("lam = 0 without the action loss leaves nothing to train on")


@dataclass
class VideoBatch:
    """Clips, labels and flow clips of one minibatch, aligned by index."""

    clips: np.ndarray
    labels: np.ndarray
    flows: np.ndarray
    flow_reprs: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if n < 1:
            raise ValueError("a batch needs at least one clip")
        if not (len(self.clips) == len(self.flows) == len(self.flow_reprs) == n):
            raise ValueError("clips, flows and labels must align")

    @classmethod
    def from_clipset(cls, data: ClipSet, idx) -> "VideoBatch":
        return cls(data.clips[idx], data.labels[idx], data.flows[idx], data.flow_reprs[idx])

    def inputs(self, modality: str) -> np.ndarray:
        return self.flow_reprs if modality == "flow" else self.clips


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def distillation_loss(student_out: Tensor, teacher_out) -> Tensor:
    """Mean squared difference; the teacher side is treated as a constant."""
    target = _values(teacher_out)
    if tuple(student_out.shape) != tuple(target.shape):
        raise ValueError(f"student output {student_out.shape} and teacher output {target.shape} differ")
    return tc.mse(student_out, Tensor(target, dtype=student_out.dtype))


def _student_output(student: StreamModel, inputs: np.ndarray, point: LayerName) -> tuple[Tensor, Tensor]:
    taps = () if point == LayerName.Logits else (point,)
    logits, tapped = student.net.forward(Tensor(inputs), taps=taps)
    return logits, (logits if point == LayerName.Logits else tapped[point].activation)


def teacher_output(teacher: Network, inputs: np.ndarray, point: LayerName) -> np.ndarray:
    point = LayerName.parse(point)
    with tc.no_grad():
        if point == LayerName.Logits:
            return teacher.forward(Tensor(inputs))[0].data
        return teacher.forward(Tensor(inputs), taps=(point,), stop_at=point)[1][point].activation.data


def check_compatible(student: Network, teacher: Network, point: LayerName) -> None:
    point = LayerName.parse(point)
    if student.channels(point) != teacher.channels(point) or \
            student.tap_extents(point) != teacher.tap_extents(point):
        raise ValueError(f"student and teacher differ at {point}: "
                         f"{student.channels(point)}x{student.tap_extents(point)} vs "
                         f"{teacher.channels(point)}x{teacher.tap_extents(point)}")


def total_loss(batch: VideoBatch, student: StreamModel, teacher: Network | None, cfg: DistillLossConfig,
               teacher_out: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    """Combined objective for one batch.

    ``teacher_out`` may carry precomputed teacher outputs at
    ``cfg.distill_point``; otherwise ``teacher`` is run without a graph. When
    ``lam`` is 0 the distillation term is reported but adds nothing to the
    graph, so the step matches plain cross-entropy exactly.
    """
    point = cfg.distill_point
    if teacher is not None:
        check_compatible(student.net, teacher, point)
    logits, s_out = _student_output(student, batch.clips, point)
    if teacher_out is None:
        if teacher is None:
            raise ValueError("need a teacher or precomputed teacher outputs")
        teacher_out = teacher_output(teacher, batch.inputs(cfg.teacher_source.modality), point)
    if tuple(s_out.shape) != tuple(np.shape(teacher_out)):
        raise ValueError(f"student {point} output {s_out.shape} does not match teacher {np.shape(teacher_out)}")

    la = tc.softmax_cross_entropy(logits, batch.labels)
    if cfg.lam == 0:
        ld_value = float(np.mean((s_out.data.astype(np.float64) - teacher_out) ** 2))
        return la, LossBreakdown(la.item(), la.item(), ld_value)
    ld = distillation_loss(s_out, teacher_out)
    weighted = tc.mul(ld, cfg.lam)
    total = tc.add(la, weighted) if cfg.use_action_loss else weighted
    a, d = la.item(), ld.item()
    return total, LossBreakdown(float(cfg.use_action_loss) * a + cfg.lam * d, a, d)


def train_teacher(data: ClipSet, net_cfg: NetworkConfig, train_cfg: TrainConfig) -> tuple[StreamModel, TrainLog]:
    """Temporal stream: cross-entropy on encoded TV-L1 flow."""
    model = new_stream("flow", data, net_cfg)
    return model, train_stream(model, data, train_cfg)


def train_baseline(data: ClipSet, net_cfg: NetworkConfig, train_cfg: TrainConfig) -> tuple[StreamModel, TrainLog]:
    """Spatial stream on RGB with cross-entropy only."""
    model = new_stream("rgb", data, net_cfg)
    return model, train_stream(model, data, train_cfg)


def scale_matched_lam(cfg: DistillLossConfig, teacher_out: np.ndarray, num_classes: int) -> float:
    """``lam`` rescaled so that ``lam * L_d`` against an all-zero student starts at ``lam * ln K``.

    That is the size of the cross-entropy of an untrained classifier, so
    ``lam = 1`` weighs both terms alike whatever the teacher's output scale.
    """
    if not cfg.match_scale or cfg.lam == 0:
        return cfg.lam
    energy = float(np.mean(np.square(teacher_out, dtype=np.float64)))
    if energy == 0:
        return cfg.lam
    return cfg.lam * math.log(num_classes) / energy


def train_student_distilled(data: ClipSet, teacher: StreamModel, cfg: DistillLossConfig,
                            net_cfg: NetworkConfig, train_cfg: TrainConfig) -> tuple[StreamModel, TrainLog]:
    """RGB student trained against a frozen teacher.

    Teacher outputs are computed once for the whole training split; the
    teacher is frozen and its inputs fixed, so this changes nothing but speed.
    With ``cfg.match_scale`` the weight used is ``scale_matched_lam``.
    """
    if teacher.modality != cfg.teacher_source.modality:
        raise ValueError(f"teacher reads {teacher.modality!r} but config names {cfg.teacher_source}")
    student = new_stream("rgb", data, net_cfg)
    check_compatible(student.net, teacher.net, cfg.distill_point)
    cached = np.concatenate([
        teacher_output(teacher.net, teacher.inputs(data, np.arange(s, min(s + 32, len(data)))), cfg.distill_point)
        for s in range(0, len(data), 32)])
    if cfg.match_scale:
        lam = scale_matched_lam(cfg, cached, net_cfg.num_classes)
        log.info("distillation weight %g scaled to %g", cfg.lam, lam)
        cfg = replace(cfg, lam=lam, match_scale=False)

    def step_loss(idx, step):
        return total_loss(VideoBatch.from_clipset(data, idx), student, None, cfg, cached[idx])

    return student, fit(student.parameters(), step_loss, len(data), train_cfg)


def ensemble_predict(models, data: ClipSet) -> np.ndarray:
    """Arithmetic mean of the models' softmax scores, shape (N, K)."""
    models = list(models)
    if not models:
        raise ValueError("ensemble needs at least one model")
    ks = {m.num_classes for m in models}
    if len(ks) != 1:
        raise ValueError(f"models disagree on the number of classes: {sorted(ks)}")
    probs = [tc.softmax(predict_logits(m, data).astype(np.float64), axis=1) for m in models]
    return np.mean(probs, axis=0)


def ensemble_accuracy(models, data: ClipSet) -> float:
    return float(np.mean(ensemble_predict(models, data).argmax(axis=1) == data.labels))


@dataclass
class FlowSupervised:
    model: StreamModel
    decoder: Decoder
    log: TrainLog = field(default_factory=TrainLog)


def train_flow_supervised(data: ClipSet, weight: float, net_cfg: NetworkConfig,
                          train_cfg: TrainConfig) -> FlowSupervised:
    """RGB classifier with an auxiliary flow target at Block3A.

    A Simple decoder reads Block3A and is fitted to TV-L1 flow pooled to that
    resolution; ``L = L_a + weight * flow_loss``. With weight 0 no decoder
    enters the graph and training matches the baseline exactly.
    """
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    model = new_stream("rgb", data, net_cfg)
    layer = FLOW_FRONT_LAYER
    decoder = build_decoder(DecoderKind.Simple, model.net.channels(layer), seed=net_cfg.seed)
    if weight == 0:
        return FlowSupervised(model, decoder, train_stream(model, data, train_cfg))
    targets = downsample_flow_batch(data.flows, model.net.tap_extents(layer))

    def step_loss(idx, step):
        logits, taps = model.forward(data, idx, taps=(layer,))
        la = tc.softmax_cross_entropy(logits, data.labels[idx])
        lf = flow_loss(decoder(taps[layer].activation), targets[idx])
        total = tc.add(la, tc.mul(lf, weight))
        a, f = la.item(), lf.item()
        return total, LossBreakdown(a + weight * f, a, f)

    params = model.parameters() + decoder.parameters()
    return FlowSupervised(model, decoder, fit(params, step_loss, len(data), train_cfg))


class FlowAsInput:
    """RGB -> front through Block3A -> Simple decoder -> upsample -> temporal stream.

    The decoder emits the (mag, sin, cos) channels the temporal stream was
    trained on, at Block3A's resolution; nearest upsampling restores the
    stream's input extents. Only RGB is read at inference.
    """

    modality = "rgb"

    def __init__(self, front: Network, decoder: Decoder, stream: Network):
        self.front = front
        self.decoder = decoder
        self.stream = stream
        ext = front.tap_extents(FLOW_FRONT_LAYER)
        want = stream.config.clip_extents
        if stream.config.input_channels != 3:
            raise ValueError("temporal stream must read 3-channel encoded flow")
        if any(w % e for w, e in zip(want, ext)):
            raise ValueError(f"predicted flow {ext} cannot be upsampled to stream input {want}")
        self.factors = tuple(w // e for w, e in zip(want, ext))

    @property
    def num_classes(self) -> int:
        return self.stream.config.num_classes

    def predicted_flow(self, clips: Tensor) -> Tensor:
        act = self.front.forward(clips, taps=(FLOW_FRONT_LAYER,), stop_at=FLOW_FRONT_LAYER)[1]
        return tc.upsample_nearest(self.decoder(act[FLOW_FRONT_LAYER].activation), self.factors)

    def inputs(self, data: ClipSet, idx) -> np.ndarray:
        return data.clips[idx]

    def logits(self, data: ClipSet, idx) -> Tensor:
        return self.stream.forward(self.predicted_flow(Tensor(data.clips[idx])))[0]

    def parameters(self) -> list[Tensor]:
        return self.front.parameters() + self.decoder.parameters() + self.stream.parameters()


def train_flow_as_input(data, teacher: StreamModel, net_cfg: NetworkConfig, train_cfg: TrainConfig,
                        front_steps: int = 300, front_lr: float = 0.01) -> tuple[FlowAsInput, TrainLog]:
    """Pretrain a flow front, chain it into a copy of the temporal stream, fine-tune end to end.

    ``data`` is a SyntheticDataset; the front is fitted on its training split.
    """
    if teacher.modality != "flow":
        raise ValueError("flow-as-input needs a temporal stream trained on flow")
    backbone = new_stream("rgb", data.train, net_cfg).net
    # the front starts untrained, so its backbone learns at the full rate
    probe = ProbeConfig(FLOW_FRONT_LAYER, DecoderKind.Simple, fine_tune_backbone=True,
                        steps=front_steps, lr=front_lr, seed=net_cfg.seed, backbone_lr_scale=1.0)
    fitted = train_probe(backbone, probe, data)
    composite = FlowAsInput(fitted.backbone, fitted.decoder, teacher.net.copy())
    return composite, fit(composite.parameters(), cross_entropy_step(composite, data.train),
                          len(data.train), train_cfg)


def train_single_frame(data: ClipSet, net_cfg: NetworkConfig, train_cfg: TrainConfig) -> tuple[StreamModel, TrainLog]:
    """Classifier that sees one frame per clip, repeated over time."""
    model = new_stream("frame", data, net_cfg)
    return model, train_stream(model, data, train_cfg)
