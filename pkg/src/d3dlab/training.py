"""Shared training loop, stream wrappers and evaluation helpers."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .datasets import ClipSet
from .network import Network, NetworkConfig, build_network
from .tensor import Tensor

log = logging.getLogger(__name__)

MODALITIES = ("rgb", "flow", "frame")
CALIBRATION_CLIPS = 64
TRAIN_LOG_HEADER = ("step", "loss_total", "loss_action", "loss_distill", "lr", "seconds")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 16
    lr: float = 0.001
    momentum: float = 0.9
    clip_norm: float = 10.0
    seed: int = 0


@dataclass
class LossBreakdown:
    total: float
    action: float
    distill: float
    step: int = 0


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def add(self, b: LossBreakdown, lr: float, seconds: float) -> None:
        self.rows.append((b.step, b.total, b.action, b.distill, lr, seconds))

    def write_csv(self, path, timing: bool = True) -> None:
        """With ``timing`` off the seconds column is left empty so reruns match byte for byte."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TRAIN_LOG_HEADER)
            for r in self.rows:
                w.writerow([r[0], *(repr(float(x)) for x in r[1:5]), f"{r[5]:.3f}" if timing else ""])


def single_frame_index(ids, t: int, seed: int = 0) -> np.ndarray:
    """A uniformly drawn frame per clip id, fixed by ``seed``."""
    return np.array([np.random.default_rng([seed, int(i), 7]).integers(t) for i in ids])


@dataclass
class StreamModel:
    """A network plus the input it reads.

    ``rgb`` feeds clips, ``flow`` feeds encoded TV-L1 flow, ``frame`` feeds
    one frame of each clip repeated over time (a 2D classifier in 3D form).
    """

    net: Network
    modality: str = "rgb"
    frame_seed: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")

    @property
    def num_classes(self) -> int:
        return self.net.config.num_classes

    def inputs(self, data: ClipSet, idx) -> np.ndarray:
        if self.modality == "flow":
            return data.flow_reprs[idx]
        clips = data.clips[idx]
        if self.modality == "rgb":
            return clips
        t = clips.shape[2]
        frames = single_frame_index(data.ids[idx], t, self.frame_seed)
        still = clips[np.arange(len(clips)), :, frames]
        return np.ascontiguousarray(np.repeat(still[:, :, None], t, axis=2))

    def forward(self, data: ClipSet, idx, taps=()):
        return self.net.forward(Tensor(self.inputs(data, idx)), taps=taps)

    def logits(self, data: ClipSet, idx) -> Tensor:
        return self.forward(data, idx)[0]

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()


def new_stream(modality: str, data: ClipSet, config: NetworkConfig, calibrate: bool = True) -> StreamModel:
    """Seeded network whose affines are calibrated on the first training clips."""
    model = StreamModel(build_network(config), modality)
    if calibrate:
        model.net.calibrate(model.inputs(data, np.arange(min(CALIBRATION_CLIPS, len(data)))))
    return model


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def fit(params: Sequence[Tensor], step_loss: Callable[[np.ndarray, int], tuple[Tensor, LossBreakdown]],
        n_train: int, cfg: TrainConfig, log_every: int = 10) -> TrainLog:
    """Minimize ``step_loss`` with momentum SGD over shuffled minibatches."""
    opt = tc.SGD(params, cfg.lr, cfg.momentum, cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    record = TrainLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(n_train, cfg.batch_size, rng):
            opt.zero_grad()
            loss, breakdown = step_loss(idx, step)
            breakdown.step = step
            if not math.isfinite(breakdown.total):
                raise TrainingDiverged(step)
            loss.backward()
            try:
                opt.step()
            except FloatingPointError:
                raise TrainingDiverged(step, "gradient") from None
            if step % log_every == 0:
                record.add(breakdown, cfg.lr, time.perf_counter() - start)
            step += 1
        log.debug("epoch %d done, last loss %.4f", epoch, breakdown.total)
    return record


def predict_logits(model, data: ClipSet, batch_size: int = 32) -> np.ndarray:
    """Pre-softmax scores for every clip, without recording a graph."""
    out = []
    with tc.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            out.append(model.logits(data, idx).data)
    return np.concatenate(out, axis=0)


def accuracy(model, data: ClipSet) -> float:
    return float(np.mean(predict_logits(model, data).argmax(axis=1) == data.labels))


def cross_entropy_step(model, data: ClipSet):
    def step_loss(idx, step):
        la = tc.softmax_cross_entropy(model.logits(data, idx), data.labels[idx])
        v = la.item()
        return la, LossBreakdown(v, v, 0.0)

    return step_loss


def train_stream(model: StreamModel, data: ClipSet, cfg: TrainConfig) -> TrainLog:
    """Plain cross-entropy training (the spatial baseline or the temporal stream)."""
    return fit(model.parameters(), cross_entropy_step(model, data), len(data), cfg)
