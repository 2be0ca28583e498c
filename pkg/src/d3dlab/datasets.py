"""Synthetic video classification where the label lives in the motion.

Families:

* ``translate4`` / ``translate8``: a textured scene pans in one of 4 (or 8)
  directions. Every single frame is a crop of the same stationary random
  texture, so a frame alone says nothing about the class.
* ``openclose``: a textured disk zooms in (open) or out (close) over a static
  textured background; a close clip is an open clip played backwards.
* ``color``: motion-free control; the label picks the colour tint and the
  pan direction is random.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage as ndi

from . import config as kv
from .flowrepr import encode_stack
from .tvl1 import TVL1Params, tvl1_batch, to_gray

FAMILIES = ("translate4", "translate8", "openclose", "color")
DIRECTIONS8 = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))
CLASS_NAMES = {
    "translate4": ("right", "left", "down", "up"),
    "translate8": ("right", "left", "down", "up", "down-right", "up-left", "up-right", "down-left"),
    "openclose": ("open", "close"),
}
# label -> label of the time-reversed clip
REVERSAL = {
    "translate4": (1, 0, 3, 2),
    "translate8": (1, 0, 3, 2, 5, 4, 7, 6),
    "openclose": (1, 0),
}
PALETTE = ((1.0, 0.35, 0.35), (0.35, 1.0, 0.35), (0.35, 0.35, 1.0), (1.0, 1.0, 0.35),
           (1.0, 0.35, 1.0), (0.35, 1.0, 1.0), (1.0, 0.65, 0.35), (0.65, 0.35, 1.0))

CLIPS_MAGIC = b"D3DC"
FLOWS_MAGIC = b"D3DF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4s6I")


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 4
    clips_per_class: int = 200
    clip_extents: tuple[int, int, int] = (8, 32, 32)
    family: str = "translate4"
    texture: float = 0.8
    color_distractors: bool = True
    speed: int = 1
    frame_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown motion family {self.family!r}; choose from {FAMILIES}")
        fixed = {"translate4": 4, "translate8": 8, "openclose": 2}
        if self.family in fixed and self.num_classes != fixed[self.family]:
            raise ValueError(f"family {self.family} has {fixed[self.family]} classes, got num_classes={self.num_classes}")
        if self.family == "color" and not 2 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"color family supports 2..{len(PALETTE)} classes")
        if self.clips_per_class < 1:
            raise ValueError("clips_per_class must be >= 1")
        t, h, w = self.clip_extents
        if t < 2:
            raise ValueError("clips need at least 2 frames")
        travel = self.speed * (t - 1)
        if self.speed < 1 or travel * 2 > min(h, w):
            raise ValueError(f"extents {self.clip_extents} too small for speed {self.speed} over {t} frames")
        if self.family == "openclose" and min(h, w) // 2 - 2 < 4 + travel:
            raise ValueError(f"extents {self.clip_extents} too small for a disk growing {travel} px")

    @property
    def num_clips(self) -> int:
        return self.num_classes * self.clips_per_class


def _texture(rng: np.random.Generator, shape, sigma: float = 1.0) -> np.ndarray:
    img = ndi.gaussian_filter(rng.random(shape), sigma, mode="wrap")
    lo, hi = img.min(), img.max()
    return (img - lo) / max(hi - lo, 1e-12)


def _pan(tex: np.ndarray, direction, t: int, h: int, w: int, speed: int, cross: int) -> np.ndarray:
    """Frames (T, H, W) of a window over ``tex`` whose content moves by ``direction``."""
    travel = speed * (t - 1)
    dx, dy = direction
    x0 = travel if dx > 0 else (0 if dx < 0 else cross)
    y0 = travel if dy > 0 else (0 if dy < 0 else cross)
    frames = np.empty((t, h, w))
    for i in range(t):
        ox = x0 - i * dx * speed
        oy = y0 - i * dy * speed
        frames[i] = tex[oy:oy + h, ox:ox + w]
    return frames


def _zoom_disk(fg: np.ndarray, bg: np.ndarray, radii) -> np.ndarray:
    h, w = bg.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    r_ref = radii[0] if radii[0] <= radii[-1] else radii[-1]
    frames = np.empty((len(radii), h, w))
    for i, r in enumerate(radii):
        s = r_ref / r
        coords = np.stack([cy + (yy - cy) * s, cx + (xx - cx) * s])
        inside = np.hypot(yy - cy, xx - cx) <= r
        frames[i] = np.where(inside, ndi.map_coordinates(fg, coords, order=1, mode="reflect"), bg)
    return frames


def render_clip(cfg: SyntheticConfig, label: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, T, H, W) clip in [0, 1]. Random draws do not depend on ``label``."""
    t, h, w = cfg.clip_extents
    travel = cfg.speed * (t - 1)
    tex = _texture(rng, (h + travel, w + travel))
    cross = int(rng.integers(0, travel + 1))
    tint = rng.uniform(0.4, 1.0, size=3) if cfg.color_distractors else np.ones(3)
    free_dir = int(rng.integers(0, 4))
    fg = _texture(rng, (h, w))
    r0 = float(rng.uniform(4.0, max(4.0, min(h, w) / 2 - 2 - travel)))
    noise = rng.normal(0.0, cfg.frame_noise, size=(3, t, h, w)) if cfg.frame_noise > 0 else 0.0

    if cfg.family in ("translate4", "translate8"):
        lum = _pan(tex, DIRECTIONS8[label], t, h, w, cfg.speed, cross)
    elif cfg.family == "color":
        lum = _pan(tex, DIRECTIONS8[free_dir], t, h, w, cfg.speed, cross)
        tint = np.asarray(PALETTE[label]) * rng.uniform(0.85, 1.0, size=3)
    else:
        radii = r0 + cfg.speed * np.arange(t)
        if label == 1:
            radii = radii[::-1]
        lum = _zoom_disk(fg, tex[:h, :w], radii)
    lum = 0.5 + cfg.texture * (lum - 0.5)
    clip = tint[:, None, None, None] * lum[None] + noise
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


def clip_seed(seed: int, clip_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, clip_id])


def split_of(clip_id: int, num_classes: int) -> str:
    """Deterministic 80/20 split by clip index, balanced per class."""
    return "val" if (clip_id // num_classes) % 5 == 4 else "train"


def flows_for_clips(clips: np.ndarray, params: TVL1Params | None = None, chunk: int = 16) -> np.ndarray:
    """(N, 3, T, H, W) clips -> (N, 2, T, H, W) TV-L1 flow (last frame repeated)."""
    n, _, t, h, w = clips.shape
    out = np.empty((n, 2, t, h, w), dtype=np.float32)
    for s in range(0, n, chunk):
        part = clips[s:s + chunk]
        gray = np.stack([to_gray(c) for c in part])
        a = gray[:, :-1].reshape(-1, h, w)
        b = gray[:, 1:].reshape(-1, h, w)
        pairs = tvl1_batch(a, b, params).reshape(len(part), t - 1, 2, h, w)
        flow = np.concatenate([pairs, pairs[:, -1:]], axis=1)
        out[s:s + len(part)] = flow.transpose(0, 2, 1, 3, 4)
    return out


@dataclass
class ClipSet:
    """Clips, TV-L1 flows and labels held in memory, aligned by index."""

    clips: np.ndarray
    flows: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @cached_property
    def flow_reprs(self) -> np.ndarray:
        """Encoded (mag, sin, cos) flow, the temporal stream's input."""
        return encode_stack(self.flows)

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.intp)
        return ClipSet(self.clips[idx], self.flows[idx], self.labels[idx], self.ids[idx], self.num_classes)

    def reversed(self, label_map) -> "ClipSet":
        """Time-reversed clips with remapped labels; flows are recomputed."""
        clips = np.ascontiguousarray(self.clips[:, :, ::-1])
        labels = np.asarray(label_map)[self.labels]
        return ClipSet(clips, flows_for_clips(clips), labels, self.ids, self.num_classes)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    train: ClipSet
    val: ClipSet
    root: Path | None = None

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


# ------------------------------------------------------------------- on disk

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_array_file(path: Path, magic: bytes, arr: np.ndarray, k: int) -> None:
    n, _, t, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(magic, FORMAT_VERSION, k, t, h, w, n))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array_file(path: Path, magic: bytes, channels: int) -> np.ndarray:
    buf = path.read_bytes()
    got, version, k, t, h, w, n = HEADER.unpack_from(buf, 0)
    if got != magic or version != FORMAT_VERSION:
        raise ValueError(f"{path}: bad header")
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER.size)
    if data.size != n * channels * t * h * w:
        raise ValueError(f"{path}: payload size does not match header")
    return data.reshape(n, channels, t, h, w).astype(np.float32)


def generate(cfg: SyntheticConfig, out_dir, tvl1_params: TVL1Params | None = None) -> Path:
    """Render every clip, precompute TV-L1 flow, write files and manifest.

    Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tp = tvl1_params or TVL1Params()
    n = cfg.num_clips
    labels = np.arange(n) % cfg.num_classes
    clips = np.stack([render_clip(cfg, int(labels[i]), clip_seed(cfg.seed, i)) for i in range(n)])
    flows = flows_for_clips(clips, tp)
    _write_array_file(out / "clips.bin", CLIPS_MAGIC, clips, cfg.num_classes)
    _write_array_file(out / "flows.bin", FLOWS_MAGIC, flows, cfg.num_classes)
    t, h, w = cfg.clip_extents
    manifest = {"format_version": FORMAT_VERSION}
    manifest.update(kv.dataclass_to_kv(cfg))
    manifest.update(kv.dataclass_to_kv(tp, prefix="tvl1."))
    manifest.update({
        "clips_file": "clips.bin",
        "clips_sha256": _sha256(out / "clips.bin"),
        "flows_file": "flows.bin",
        "flows_sha256": _sha256(out / "flows.bin"),
        "header_bytes": HEADER.size,
        "clip_stride_bytes": 4 * 3 * t * h * w,
        "flow_stride_bytes": 4 * 2 * t * h * w,
        "labels": [int(x) for x in labels],
        "splits": [split_of(i, cfg.num_classes) for i in range(n)],
    })
    path = out / "manifest.txt"
    kv.write_kv(path, manifest, header="synthetic motion dataset manifest")
    return path


def read_manifest(path) -> tuple[SyntheticConfig, dict[str, str]]:
    m = kv.read_kv(path)
    return kv.dataclass_from_kv(SyntheticConfig, m), m


def _load_all(manifest_path) -> tuple[SyntheticConfig, ClipSet, list[str]]:
    manifest_path = Path(manifest_path)
    cfg, m = read_manifest(manifest_path)
    root = manifest_path.parent
    for key in ("clips", "flows"):
        f = root / m[f"{key}_file"]
        if not f.exists():
            raise FileNotFoundError(f"missing dataset file {f}")
        if _sha256(f) != m[f"{key}_sha256"]:
            raise ValueError(f"checksum mismatch for {f}")
    clips = _read_array_file(root / m["clips_file"], CLIPS_MAGIC, 3)
    flows = _read_array_file(root / m["flows_file"], FLOWS_MAGIC, 2)
    labels = np.array([int(x) for x in m["labels"].split(",")])
    splits = m["splits"].split(",")
    allset = ClipSet(clips, flows, labels, np.arange(len(labels)), cfg.num_classes)
    return cfg, allset, splits


def load(manifest_path, split: str | None = None, shuffle_seed: int | None = None
         ) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
    """Yield (clip, flow, label); order is fixed by ``shuffle_seed``."""
    _, allset, splits = _load_all(manifest_path)
    idx = [i for i, s in enumerate(splits) if split is None or s == split]
    if shuffle_seed is not None:
        idx = list(np.random.default_rng(shuffle_seed).permutation(idx))
    for i in idx:
        yield allset.clips[i], allset.flows[i], int(allset.labels[i])


def load_dataset(manifest_path) -> SyntheticDataset:
    cfg, allset, splits = _load_all(manifest_path)
    train = [i for i, s in enumerate(splits) if s == "train"]
    val = [i for i, s in enumerate(splits) if s == "val"]
    return SyntheticDataset(cfg, allset.subset(train), allset.subset(val), Path(manifest_path).parent)


def build_in_memory(cfg: SyntheticConfig, tvl1_params: TVL1Params | None = None) -> SyntheticDataset:
    """Same content as :func:`generate` without touching disk."""
    n = cfg.num_clips
    labels = np.arange(n) % cfg.num_classes
    clips = np.stack([render_clip(cfg, int(labels[i]), clip_seed(cfg.seed, i)) for i in range(n)])
    flows = flows_for_clips(clips, tvl1_params)
    allset = ClipSet(clips, flows, labels, np.arange(n), cfg.num_classes)
    splits = [split_of(i, cfg.num_classes) for i in range(n)]
    train = [i for i, s in enumerate(splits) if s == "train"]
    val = [i for i, s in enumerate(splits) if s == "val"]
    return SyntheticDataset(cfg, allset.subset(train), allset.subset(val))


def reversal_label_map(family: str) -> tuple[int, ...]:
    if family not in REVERSAL:
        raise ValueError(f"family {family!r} has no reversal label map")
    return REVERSAL[family]


def reversal_probe(model, data: ClipSet, family: str) -> tuple[float, float]:
    """Accuracy on the clips as given and on time-reversed clips with remapped labels."""
    from .training import accuracy

    label_map = reversal_label_map(family)
    return accuracy(model, data), accuracy(model, data.reversed(label_map))


def dataset_stats(data: ClipSet, family: str) -> dict[str, float]:
    """Mean TV-L1 magnitude, and for translations the share of clips whose
    mean flow points within 30 degrees of the class direction."""
    mag = float(np.hypot(data.flows[:, 0], data.flows[:, 1]).mean())
    agree = float("nan")
    if family in ("translate4", "translate8"):
        mean_uv = data.flows.mean(axis=(2, 3, 4))
        want = np.array(DIRECTIONS8, dtype=np.float64)[data.labels]
        ang = np.arctan2(mean_uv[:, 1], mean_uv[:, 0]) - np.arctan2(want[:, 1], want[:, 0])
        err = np.abs((np.degrees(ang) + 180.0) % 360.0 - 180.0)
        agree = float(np.mean(err < 30.0))
    return {"mean_magnitude": mag, "direction_agreement": agree}
