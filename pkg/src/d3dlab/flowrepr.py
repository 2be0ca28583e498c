"""Polar (mag, sin, cos) flow encoding, the weighted flow loss, and EPE."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import Tensor
from .tvl1 import FlowField

REPR_MAGIC = 202021.75
ZERO_MAG = 1e-6


@dataclass
class FlowRepr3:
    """Three planes of equal shape: magnitude, sin(angle), cos(angle)."""

    mag: np.ndarray
    sin_t: np.ndarray
    cos_t: np.ndarray

    def __post_init__(self):
        self.mag = np.asarray(self.mag, dtype=np.float32)
        self.sin_t = np.asarray(self.sin_t, dtype=np.float32)
        self.cos_t = np.asarray(self.cos_t, dtype=np.float32)
        if not (self.mag.shape == self.sin_t.shape == self.cos_t.shape):
            raise ValueError("mag, sin and cos planes must share extents")

    @property
    def shape(self):
        return self.mag.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.mag, self.sin_t, self.cos_t])

    @classmethod
    def from_stack(cls, arr) -> "FlowRepr3":
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if arr.shape[0] != 3:
            raise ValueError(f"expected 3 leading channels, got shape {arr.shape}")
        return cls(arr[0], arr[1], arr[2])


@dataclass
class FlowMetrics:
    epe: float
    epe_interior: float
    per_frame: list[float] = field(default_factory=list)


def _uv(f) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(f, FlowField):
        return f.u, f.v
    arr = np.asarray(f, dtype=np.float32)
    return arr[0], arr[1]


def encode_flow(f) -> FlowRepr3:
    """FlowField or (2, ...) array -> FlowRepr3. Zero flow encodes as (0, 0, 1)."""
    u, v = _uv(f)
    u64 = u.astype(np.float64)
    v64 = v.astype(np.float64)
    mag = np.hypot(u64, v64)
    moving = mag >= ZERO_MAG
    safe = np.where(moving, mag, 1.0)
    sin_t = np.where(moving, v64 / safe, 0.0)
    cos_t = np.where(moving, u64 / safe, 1.0)
    return FlowRepr3(mag, sin_t, cos_t)


def decode_flow(r) -> FlowField:
    """u = mag * cos, v = mag * sin; angle channels are used as given."""
    if not isinstance(r, FlowRepr3):
        r = FlowRepr3.from_stack(r)
    return FlowField(r.mag * r.cos_t, r.mag * r.sin_t)


def encode_stack(flow: np.ndarray) -> np.ndarray:
    """(2, ...) or (N, 2, ...) flow array -> matching 3-channel array."""
    flow = np.asarray(flow)
    if flow.ndim == 5:
        return np.stack([encode_flow(f).stack() for f in flow])
    return encode_flow(flow).stack()


def _channel_axis(ndim: int) -> int:
    # batched activations are (N, C, T, H, W)
    return 1 if ndim == 5 else 0


def flow_loss(pred, target) -> Tensor:
    """Mean over pixels of squared error, angle terms weighted by target magnitude.

    ``pred`` is a Tensor (differentiable) or array; both are 3-channel stacks
    (3, ...) or batched (N, 3, T, H, W).
    """
    if isinstance(pred, FlowRepr3):
        pred = pred.stack()
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    tgt = target.stack() if isinstance(target, FlowRepr3) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != tgt.shape:
        raise ValueError(f"flow_loss shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    ax = _channel_axis(tgt.ndim)
    if tgt.shape[ax] != 3:
        raise ValueError(f"flow_loss expects 3 channels on axis {ax}, got shape {tgt.shape}")
    mag = np.take(tgt, [0], axis=ax)
    weights = np.concatenate([np.ones_like(mag), mag, mag], axis=ax).astype(pred.dtype)
    diff = pred - Tensor(tgt, dtype=pred.dtype)
    pixels = tgt.size // 3
    return tc.mul(tc.tsum(tc.mul(diff * diff, weights)), 1.0 / pixels)


def endpoint_error(pred, ref, border: int = 2) -> FlowMetrics:
    """Mean Euclidean distance between flow vectors.

    Leading axes beyond (H, W) are treated as frames for the per-frame list.
    """
    pu, pv = _uv(pred)
    ru, rv = _uv(ref)
    if pu.shape != ru.shape:
        raise ValueError(f"endpoint_error shape mismatch: {pu.shape} vs {ru.shape}")
    err = np.hypot(pu.astype(np.float64) - ru, pv.astype(np.float64) - rv)
    h, w = err.shape[-2:]
    inner = err[..., border:h - border, border:w - border]
    epe_interior = float(inner.mean()) if inner.size else float("nan")
    frames = err.reshape(-1, h, w).mean(axis=(1, 2))
    return FlowMetrics(float(err.mean()), epe_interior, [float(x) for x in frames])


def pool_flow(flow_clip, target_extents) -> np.ndarray:
    """Average (u, v) of a (2, T, H, W) clip over integer windows."""
    flow_clip = np.asarray(flow_clip, dtype=np.float64)
    if flow_clip.ndim != 4 or flow_clip.shape[0] != 2:
        raise ValueError(f"expected a (2, T, H, W) flow clip, got {flow_clip.shape}")
    factors = []
    for n, m, ax in zip(flow_clip.shape[1:], target_extents, ("T", "H", "W")):
        if m < 1 or n % m:
            raise ValueError(f"non-integer pooling factor on {ax}: {n} -> {m}")
        factors.append(n // m)
    ft, fh, fw = factors
    t, h, w = target_extents
    return flow_clip.reshape(2, t, ft, h, fh, w, fw).mean(axis=(2, 4, 6))


def downsample_flow_target(flow_clip, target_extents) -> FlowRepr3:
    """Average (u, v) over integer windows to ``target_extents``, then encode.

    ``flow_clip`` is (2, T, H, W). Magnitude is recomputed from averaged
    components, never averaged itself.
    """
    return encode_flow(pool_flow(flow_clip, target_extents))


def downsample_flow_batch(flows: np.ndarray, target_extents) -> np.ndarray:
    """(N, 2, T, H, W) -> (N, 3, T', H', W') encoded targets."""
    return np.stack([downsample_flow_target(f, target_extents).stack() for f in flows])


def repr_bytes(r: FlowRepr3) -> bytes:
    if r.mag.ndim != 2:
        raise ValueError("only single-frame (H, W) representations serialize")
    h, w = r.shape
    planes = np.concatenate([r.mag.ravel(), r.sin_t.ravel(), r.cos_t.ravel()]).astype("<f4")
    return struct.pack("<fii", REPR_MAGIC, w, h) + planes.tobytes()


def repr_from_bytes(buf: bytes) -> FlowRepr3:
    magic, w, h = struct.unpack_from("<fii", buf, 0)
    if magic != np.float32(REPR_MAGIC):
        raise ValueError(f"bad flow-representation magic {magic}")
    if len(buf) != 12 + 12 * w * h:
        raise ValueError(f"representation file size {len(buf)} does not match {w}x{h}")
    planes = np.frombuffer(buf, dtype="<f4", offset=12).reshape(3, h, w)
    return FlowRepr3(planes[0].copy(), planes[1].copy(), planes[2].copy())


def write_repr(path, r: FlowRepr3) -> None:
    with open(path, "wb") as f:
        f.write(repr_bytes(r))


def read_repr(path) -> FlowRepr3:
    with open(path, "rb") as f:
        return repr_from_bytes(f.read())
