"""The ablation matrix and the shared training recipe."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import SyntheticDataset
from .distill import (INTERMEDIATE_LAMBDA, DistillLossConfig, TeacherSource, train_baseline,
                      train_flow_as_input, train_flow_supervised, train_student_distilled, train_teacher)
from .network import LayerName, NetworkConfig
from .training import TrainConfig, accuracy

log = logging.getLogger(__name__)

ABLATION_HEADER = ("method", "accuracy", "seed", "steps")
ABLATION_METHODS = (
    "baseline", "temporal_stream", "flow_as_input", "flow_as_supervision",
    "distill_2C", "distill_4C", "distill_4F", "no_action_loss", "spatial_teacher", "D3D",
)


@dataclass(frozen=True)
class Recipe:
    """Everything a training run needs beyond the data."""

    base_width: int = 8
    epochs: int = 16
    teacher_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.001
    momentum: float = 0.9
    clip_norm: float = 10.0
    flow_weight: float = 1.0
    front_steps: int = 300
    front_lr: float = 0.01

    def network(self, dataset: SyntheticDataset, seed: int) -> NetworkConfig:
        c = dataset.config
        return NetworkConfig(3, c.num_classes, self.base_width, tuple(c.clip_extents), seed)

    def training(self, seed: int, teacher: bool = False) -> TrainConfig:
        return TrainConfig(self.teacher_epochs if teacher else self.epochs, self.batch_size, self.lr,
                           self.momentum, self.clip_norm, seed)

    def steps(self, n_train: int, teacher: bool = False) -> int:
        epochs = self.teacher_epochs if teacher else self.epochs
        return epochs * math.ceil(n_train / self.batch_size)


@dataclass
class AblationRow:
    method: str
    accuracy: float
    seed: int
    steps: int
    error: str = ""

    def as_csv(self) -> list[str]:
        return [self.method, repr(float(self.accuracy)), str(self.seed), str(self.steps)]


@dataclass
class AblationRun:
    rows: list[AblationRow]
    models: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def accuracy(self, method: str) -> float:
        return next(r.accuracy for r in self.rows if r.method == method)


def _distill_variants():
    yield "distill_2C", DistillLossConfig(1.0, distill_point=LayerName.Conv2C)
    yield "distill_4C", DistillLossConfig(1.0, distill_point=LayerName.Block4C)
    yield "distill_4F", DistillLossConfig(INTERMEDIATE_LAMBDA, distill_point=LayerName.Block4F)
    yield "no_action_loss", DistillLossConfig(1.0, use_action_loss=False)
    yield "spatial_teacher", DistillLossConfig(1.0, teacher_source=TeacherSource.SpatialStream)
    yield "D3D", DistillLossConfig()


def run_ablation(dataset: SyntheticDataset, seed: int, recipe: Recipe = Recipe(),
                 methods=ABLATION_METHODS) -> AblationRun:
    """Train every method of the matrix for one seed and score it on the validation split.

    A method that fails is kept as a row with NaN accuracy and the error text.
    """
    train, val = dataset.train, dataset.val
    net = recipe.network(dataset, seed)
    tcfg = recipe.training(seed)
    steps = recipe.steps(len(train))
    run = AblationRun([])

    def record(method, fn, n_steps=steps):
        if method not in methods:
            return None
        start = time.perf_counter()
        try:
            model = fn()
            run.seconds[method] = time.perf_counter() - start
            run.models[method] = model
            run.rows.append(AblationRow(method, accuracy(model, val), seed, n_steps))
            log.info("seed %d %s accuracy %.4f", seed, method, run.rows[-1].accuracy)
            return model
        except (FloatingPointError, ValueError) as exc:
            log.warning("seed %d %s failed: %s", seed, method, exc)
            run.rows.append(AblationRow(method, math.nan, seed, n_steps, str(exc)))
            return None

    teacher = record("temporal_stream", lambda: train_teacher(train, net, recipe.training(seed, True))[0],
                     recipe.steps(len(train), teacher=True))
    baseline = record("baseline", lambda: train_baseline(train, net, tcfg)[0])
    front = recipe.front_steps + steps
    if teacher is not None:
        record("flow_as_input", lambda: train_flow_as_input(dataset, teacher, net, tcfg, recipe.front_steps,
                                                            recipe.front_lr)[0], front)
    elif "flow_as_input" in methods:
        run.rows.append(AblationRow("flow_as_input", math.nan, seed, front, "no temporal stream"))
    record("flow_as_supervision", lambda: train_flow_supervised(train, recipe.flow_weight, net, tcfg).model)
    for method, cfg in _distill_variants():
        src = teacher if cfg.teacher_source is TeacherSource.TemporalStream else baseline
        if src is None:
            if method in methods:
                run.rows.append(AblationRow(method, math.nan, seed, steps, "teacher unavailable"))
            continue
        record(method, lambda cfg=cfg, src=src: train_student_distilled(train, src, cfg, net, tcfg)[0])
    order = {m: i for i, m in enumerate(ABLATION_METHODS)}
    run.rows.sort(key=lambda r: order[r.method])
    return run


def markdown_table(rows, seeds_column: bool = True) -> str:
    """Method by seed accuracy table with a mean column."""
    seeds = sorted({r.seed for r in rows})
    methods = [m for m in ABLATION_METHODS if any(r.method == m for r in rows)]
    head = ["method"] + ([f"seed {s}" for s in seeds] if seeds_column else []) + ["mean"]
    out = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for m in methods:
        accs = {r.seed: r.accuracy for r in rows if r.method == m}
        vals = [accs.get(s, math.nan) for s in seeds]
        cells = [m] + ([_pct(v) for v in vals] if seeds_column else []) + [_pct(float(np.nanmean(vals)))]
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def _pct(v: float) -> str:
    return "failed" if math.isnan(v) else f"{100 * v:.1f}"
