"""Command-line front end.

Every command takes ``--out DIR`` and writes there, and only there: a
``resolved.cfg`` snapshot (feed it back with ``--config`` to repeat the run),
a ``summary.txt``, and its CSV results. Exit status is 0 on success, 2 for bad
arguments, 3 when a required input is missing and 4 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import config as kv
from . import tensor as tc
from .datasets import (SyntheticConfig, SyntheticDataset, dataset_stats, generate, load_dataset,
                       reversal_label_map, reversal_probe)
from .decoders import DecoderKind, ProbeConfig, SWEEP_HEADER, layer_sweep, train_probe, write_sweep_csv
from .distill import DistillLossConfig, TeacherSource, train_student_distilled
from .experiments import ABLATION_HEADER, Recipe, markdown_table, run_ablation
from .flowrepr import decode_flow
from .network import LayerName, NetworkConfig, build_network, load_network, save_network
from .tensor import Tensor
from .training import TRAIN_LOG_HEADER, StreamModel, TrainingDiverged, accuracy, new_stream, train_stream
from .tvl1 import TVL1Params

log = logging.getLogger("d3dlab")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("generate", "train-teacher", "train-baseline", "train-d3d", "probe-sweep",
            "ablation", "eval", "flow-viz")


class UsageError(Exception):
    pass


class MissingPrerequisite(Exception):
    pass


def _defaults() -> dict[str, str]:
    d: dict[str, object] = {"seed": 0, "dataset": "", "checkpoint": "", "compare": "", "teacher": "",
                            "baseline": "", "d3d": "", "modality": "rgb", "log.timing": False}
    d.update(kv.dataclass_to_kv(SyntheticConfig(), "data."))
    d.pop("data.seed")
    d.update(kv.dataclass_to_kv(TVL1Params(), "tvl1."))
    d.update(kv.dataclass_to_kv(Recipe(), "train."))
    d.update({"distill.lam": 1.0, "distill.use_action_loss": True,
              "distill.distill_point": LayerName.Logits, "distill.teacher_source": TeacherSource.TemporalStream,
              "distill.match_scale": True})
    d.update({"probe.kinds": "Simple,Spatial,PWC", "probe.layers": "Conv2C,Block3A,Block4C",
              "probe.modes": "frozen", "probe.steps": 300, "probe.lr": 0.01, "probe.cap": True,
              "probe.backbone_lr_scale": 0.1,
              "viz.clips": 4, "viz.frame": 0})
    return {k: kv.format_kv({k: v}).split(" = ", 1)[1].strip() for k, v in d.items()}


DEFAULTS = _defaults()


@dataclass
class ExperimentSpec:
    subcommand: str
    config_path: Path | None
    out: Path
    seed: int | None = None
    overrides: list[str] = field(default_factory=list)

    def resolve(self) -> dict[str, str]:
        """Defaults, then the config file, then ``--set`` items, then ``--seed``."""
        cfg = dict(DEFAULTS)
        if self.config_path is not None:
            if not self.config_path.exists():
                raise MissingPrerequisite(f"config file not found: {self.config_path}")
            try:
                _merge(cfg, kv.read_kv(self.config_path), str(self.config_path))
            except ValueError as exc:
                raise UsageError(str(exc)) from None
        items = {}
        for item in self.overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            items[k.strip()] = v.strip()
        _merge(cfg, items, "--set")
        if self.seed is not None:
            cfg["seed"] = str(self.seed)
        return cfg


def _merge(cfg: dict[str, str], items: dict[str, str], origin: str) -> None:
    for k, v in items.items():
        if k not in cfg:
            raise UsageError(f"{origin}: unknown key {k!r}")
        cfg[k] = v


class Run:
    """Typed views of a resolved configuration plus output helpers."""

    def __init__(self, command: str, cfg: dict[str, str], out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.started = time.perf_counter()
        self.summary: list[str] = []
        try:
            self.seed = int(cfg["seed"])
            self.recipe = kv.dataclass_from_kv(Recipe, cfg, "train.")
            self.timing = kv.coerce(cfg["log.timing"], bool)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def get(self, key: str, typ=str):
        try:
            return kv.coerce(self.cfg[key], typ)
        except ValueError as exc:
            raise UsageError(f"{key}: {exc}") from None

    def path(self, key: str) -> Path:
        value = self.cfg[key]
        if not value:
            raise MissingPrerequisite(f"{self.command} needs {key}=<path> (use --set {key}=...)")
        p = Path(value)
        if p.is_dir() and key == "dataset":
            p = p / "manifest.txt"
        if not p.exists():
            raise MissingPrerequisite(f"missing prerequisite {key}: {p}")
        return p

    def dataset(self) -> SyntheticDataset:
        return load_dataset(self.path("dataset"))

    def network(self, ds: SyntheticDataset, seed: int | None = None) -> NetworkConfig:
        return self.recipe.network(ds, self.seed if seed is None else seed)

    def load(self, key: str, ds: SyntheticDataset):
        return load_network(self.path(key), self.network(ds))

    def note(self, line: str) -> None:
        self.summary.append(line)
        log.info(line)

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.out / name
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        return p

    def write_log(self, train_log, name: str = "train_log.csv") -> None:
        train_log.write_csv(self.out / name, timing=self.timing)

    def finish(self) -> None:
        kv.write_kv(self.out / "resolved.cfg", self.cfg, header=f"resolved configuration for {self.command}")
        lines = [f"command: {self.command}", f"seed: {self.seed}"] + self.summary
        lines.append(f"wall time: {time.perf_counter() - self.started:.1f} s")
        (self.out / "summary.txt").write_text("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# ------------------------------------------------------------------ commands

def cmd_generate(run: Run) -> None:
    cfg = kv.dataclass_from_kv(SyntheticConfig, {**{k: v for k, v in run.cfg.items() if k.startswith("data.")},
                                                  "data.seed": str(run.seed)}, "data.")
    tp = kv.dataclass_from_kv(TVL1Params, run.cfg, "tvl1.")
    manifest = generate(cfg, run.out, tp)
    ds = load_dataset(manifest)
    rows = []
    for split, data in (("train", ds.train), ("val", ds.val)):
        st = dataset_stats(data, cfg.family)
        rows.append([split, len(data), _fmt(st["mean_magnitude"]), _fmt(st["direction_agreement"])])
    run.write_csv("dataset_stats.csv", ("split", "clips", "mean_flow_magnitude", "direction_agreement"), rows)
    run.note(f"wrote {cfg.num_clips} clips of family {cfg.family} to {manifest}")


def _train_single(run: Run, modality: str, name: str) -> None:
    ds = run.dataset()
    teacher = modality == "flow"
    model = new_stream(modality, ds.train, run.network(ds))
    train_log = train_stream(model, ds.train, run.recipe.training(run.seed, teacher=teacher))
    save_network(run.out / f"{name}.ckpt", model.net)
    run.write_log(train_log)
    acc = accuracy(model, ds.val)
    run.write_csv("metrics.csv", ("model", "split", "accuracy"), [[name, "val", _fmt(acc)]])
    run.note(f"{name}: held-out accuracy {acc:.4f}, checkpoint {run.out / (name + '.ckpt')}")


def cmd_train_teacher(run: Run) -> None:
    _train_single(run, "flow", "teacher")


def cmd_train_baseline(run: Run) -> None:
    _train_single(run, "rgb", "baseline")


def cmd_train_d3d(run: Run) -> None:
    ds = run.dataset()
    try:
        loss_cfg = DistillLossConfig(run.get("distill.lam", float), run.get("distill.use_action_loss", bool),
                                     run.cfg["distill.distill_point"], run.cfg["distill.teacher_source"],
                                     run.get("distill.match_scale", bool))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    teacher = StreamModel(run.load("teacher", ds), loss_cfg.teacher_source.modality)
    student, train_log = train_student_distilled(ds.train, teacher, loss_cfg, run.network(ds),
                                                 run.recipe.training(run.seed))
    save_network(run.out / "d3d.ckpt", student.net)
    run.write_log(train_log)
    acc = accuracy(student, ds.val)
    run.write_csv("metrics.csv", ("model", "split", "accuracy"), [["d3d", "val", _fmt(acc)]])
    run.note(f"d3d (lam={loss_cfg.lam}, match_scale={loss_cfg.match_scale}, point={loss_cfg.distill_point}, "
             f"action={loss_cfg.use_action_loss}, teacher={loss_cfg.teacher_source}): held-out accuracy {acc:.4f}")


def _list(run: Run, key: str) -> list[str]:
    return [x.strip() for x in run.cfg[key].split(",") if x.strip()]


def _sweep(run: Run, backbone, ds) -> list:
    try:
        kinds = [DecoderKind.parse(k) for k in _list(run, "probe.kinds")]
        layers = [LayerName.parse(l) for l in _list(run, "probe.layers")]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    modes = _list(run, "probe.modes")
    if any(m not in ("frozen", "ft") for m in modes):
        raise UsageError(f"probe.modes must list frozen and/or ft, got {modes}")
    return layer_sweep(backbone, kinds, layers, ds, modes, run.get("probe.steps", int),
                       run.get("probe.lr", float), run.seed, run.get("probe.cap", bool),
                       run.get("probe.backbone_lr_scale", float))


def cmd_probe_sweep(run: Run) -> None:
    from .plotting import plot_sweep

    ds = run.dataset()
    series = [("backbone", run.load("checkpoint", ds))]
    if run.cfg["compare"]:
        series.append(("compare", run.load("compare", ds)))
    plotted = []
    for label, net in series:
        rows = _sweep(run, net, ds)
        write_sweep_csv(rows, run.out / ("sweep.csv" if label == "backbone" else "sweep_compare.csv"))
        plotted += [(label, r.layer, r.kind, r.mode, r.epe) for r in rows]
        for r in rows:
            run.note(f"{label} {r.layer} {r.kind} {r.mode}: epe {r.epe:.4f}" + (f" ({r.error})" if r.error else ""))
    plot_sweep(plotted, run.out / "sweep.svg")


def cmd_ablation(run: Run) -> None:
    from .plotting import plot_accuracy_bars

    ds = run.dataset()
    result = run_ablation(ds, run.seed, run.recipe)
    run.write_csv("ablation.csv", ABLATION_HEADER, [r.as_csv() for r in result.rows])
    (run.out / "ablation.md").write_text(markdown_table(result.rows))
    plot_accuracy_bars([(r.method, r.accuracy) for r in result.rows], run.out / "ablation.svg")
    for r in result.rows:
        run.note(f"{r.method}: {r.accuracy:.4f}" + (f" FAILED: {r.error}" if r.error else ""))


def cmd_eval(run: Run) -> None:
    ds = run.dataset()
    modality = run.cfg["modality"]
    if modality not in ("rgb", "flow", "frame"):
        raise UsageError(f"modality must be rgb, flow or frame, got {modality!r}")
    if run.cfg["checkpoint"]:
        net = run.load("checkpoint", ds)
        what = str(run.path("checkpoint"))
    else:
        net = build_network(run.network(ds))
        what = f"untrained network (seed {run.seed})"
    model = StreamModel(net, modality)
    rows = []
    family = ds.config.family
    try:
        reversal_label_map(family)
        fwd, rev = reversal_probe(model, ds.val, family)
    except ValueError:
        fwd, rev = accuracy(model, ds.val), math.nan
    rows.append(["val", _fmt(fwd), _fmt(rev)])
    run.write_csv("eval.csv", ("split", "accuracy", "reversed_accuracy"), rows)
    run.note(f"{what} on {modality}: accuracy {fwd:.4f}, time-reversed {rev:.4f}")


def cmd_flow_viz(run: Run) -> None:
    from .plotting import plot_flow_grid

    ds = run.dataset()
    nets = {"baseline": run.load("baseline", ds), "d3d": run.load("d3d", ds)}
    kinds = _list(run, "probe.kinds")
    layers = _list(run, "probe.layers")
    try:
        probe = ProbeConfig(layers[0], kinds[-1], steps=run.get("probe.steps", int),
                            lr=run.get("probe.lr", float), seed=run.seed, cap=run.get("probe.cap", bool))
    except (ValueError, IndexError) as exc:
        raise UsageError(f"flow-viz needs probe.layers and probe.kinds: {exc}") from None
    n = min(run.get("viz.clips", int), len(ds.val))
    frame = run.get("viz.frame", int)
    clips = ds.val.clips[:n]
    preds, epes = {}, {}
    for name, net in nets.items():
        res = train_probe(net, probe, ds)
        with tc.no_grad():
            out = res.decoder(res.backbone.forward(Tensor(clips), taps=[probe.layer],
                                                   stop_at=probe.layer)[1][probe.layer].activation)
        preds[name] = [decode_flow(r).stack() for r in out.data]
        epes[name] = res.metrics.epe
    stride = nets["baseline"].tap_stride(probe.layer)
    tf = min(frame // stride[0], preds["baseline"][0].shape[1] - 1)
    panels, rows = [], []
    for i in range(n):
        rgb = clips[i][:, frame].transpose(1, 2, 0)
        tvl1 = ds.val.flows[i][:, frame]
        b = preds["baseline"][i][:, tf]
        d = preds["d3d"][i][:, tf]
        panels.append((rgb, tvl1, b, d))
        rows.append([int(ds.val.ids[i]), frame, _fmt(np.hypot(*tvl1).mean()), _fmt(np.hypot(*b).mean()),
                     _fmt(np.hypot(*d).mean())])
    plot_flow_grid(panels, run.out / "flow_grid.png")
    run.write_csv("flow_viz.csv", ("clip_id", "frame", "tvl1_mean_mag", "baseline_probe_mean_mag",
                                   "d3d_probe_mean_mag"), rows)
    run.note(f"probe {probe.kind} at {probe.layer}: held-out epe baseline {epes['baseline']:.4f}, "
             f"d3d {epes['d3d']:.4f}")


HANDLERS = {
    "generate": cmd_generate, "train-teacher": cmd_train_teacher, "train-baseline": cmd_train_baseline,
    "train-d3d": cmd_train_d3d, "probe-sweep": cmd_probe_sweep, "ablation": cmd_ablation,
    "eval": cmd_eval, "flow-viz": cmd_flow_viz,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d3dlab", description="Distilled 3D network laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value file, e.g. a previous resolved.cfg")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    spec = ExperimentSpec(args.command, args.config, args.out, args.seed, args.overrides)
    try:
        cfg = spec.resolve()
        run = Run(args.command, cfg, args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](run)
        run.finish()
    except UsageError as exc:
        print(f"d3dlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisite as exc:
        print(f"d3dlab: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"d3dlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
