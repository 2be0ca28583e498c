"""Duality-based TV-L1 optical flow with coarse-to-fine warping.

Intensities come in as [0, 1] and are rescaled to [0, 255] inside the
solver, the range the classic parameter defaults were tuned for.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage as ndi

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
FLO_MAGIC = 202021.25
INTENSITY_SCALE = 255.0


@dataclass
class FlowField:
    """Per-pixel displacement: u rightward, v downward, in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape:
            raise ValueError(f"u and v extents differ: {self.u.shape} vs {self.v.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.u.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32))


@dataclass(frozen=True)
class TVL1Params:
    lambda_data: float = 0.15
    theta_coupling: float = 0.3
    tau_step: float = 0.125
    warps: int = 5
    inner_iterations: int = 25
    levels: int = 3
    scale: float = 0.5
    median_filter: bool = True

    def __post_init__(self):
        if not 0 < self.tau_step <= 0.125:
            raise ValueError(f"tau_step must lie in (0, 0.125], got {self.tau_step}")
        if not 0 < self.scale < 1:
            raise ValueError(f"pyramid scale must lie in (0, 1), got {self.scale}")
        if self.levels < 1 or self.warps < 1 or self.inner_iterations < 1:
            raise ValueError("levels, warps and inner_iterations must be >= 1")
        if self.lambda_data <= 0 or self.theta_coupling <= 0:
            raise ValueError("lambda_data and theta_coupling must be positive")

    def min_extent(self) -> int:
        # two coarsest-level cells
        return math.ceil(2 / self.scale ** (self.levels - 1))


# Operators act on the last two axes of (B, H, W) stacks. Forward differences
# use a Neumann boundary; divergence is their negative adjoint.
def _forward_grad(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[..., :, :-1] = f[..., :, 1:] - f[..., :, :-1]
    gy[..., :-1, :] = f[..., 1:, :] - f[..., :-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    d = np.zeros_like(px)
    d[..., :, 0] = px[..., :, 0]
    d[..., :, 1:-1] = px[..., :, 1:-1] - px[..., :, :-2]
    d[..., :, -1] = -px[..., :, -2]
    d[..., 0, :] += py[..., 0, :]
    d[..., 1:-1, :] += py[..., 1:-1, :] - py[..., :-2, :]
    d[..., -1, :] += -py[..., -2, :]
    return d


def _central_grad(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[..., :, 1:-1] = 0.5 * (f[..., :, 2:] - f[..., :, :-2])
    gy[..., 1:-1, :] = 0.5 * (f[..., 2:, :] - f[..., :-2, :])
    return gx, gy


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    b, h, w = img.shape
    bb, yy, xx = np.mgrid[0:b, 0:h, 0:w]
    coords = np.stack([bb, yy + v, xx + u])
    return ndi.map_coordinates(img, coords, order=1, mode="nearest")


def _downsample(img: np.ndarray, scale: float) -> np.ndarray:
    sigma = 0.6 * math.sqrt(1.0 / scale ** 2 - 1.0)
    smooth = ndi.gaussian_filter(img, (0, sigma, sigma), mode="nearest")
    shape = tuple(max(1, int(round(n * scale))) for n in img.shape[1:])
    return _resize(smooth, shape)


def _resize(img: np.ndarray, shape) -> np.ndarray:
    zoom = (1.0,) + tuple(t / s for t, s in zip(shape, img.shape[1:]))
    out = ndi.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    return out[:, : shape[0], : shape[1]]


def relaxed_energy(u, v, w1, w2, rho_c, ix, iy, params: TVL1Params) -> float:
    """Coupled TV-L1 energy minimized by the alternating scheme.

    TV(u) + TV(v) + |(u, v) - (w1, w2)|^2 / (2 theta) + lambda |rho(w1, w2)|,
    with rho linearized at the current warp. Summed over pixels.
    """
    tv = 0.0
    for f in (u, v):
        gx, gy = _forward_grad(f)
        tv += float(np.sqrt(gx ** 2 + gy ** 2).sum())
    coupling = float(((u - w1) ** 2 + (v - w2) ** 2).sum()) / (2 * params.theta_coupling)
    rho = rho_c + ix * w1 + iy * w2
    return tv + coupling + params.lambda_data * float(np.abs(rho).sum())


def _rof_energy(f: np.ndarray, w: np.ndarray, theta: float) -> np.ndarray:
    gx, gy = _forward_grad(f)
    return np.sqrt(gx * gx + gy * gy).sum(axis=(1, 2)) + ((f - w) ** 2).sum(axis=(1, 2)) / (2 * theta)


def _monotone(prev: np.ndarray, cand: np.ndarray, w: np.ndarray, theta: float) -> np.ndarray:
    # a single dual step only approximates the ROF prox; reject a candidate
    # that would raise TV + coupling so the relaxed energy never goes up
    worse = _rof_energy(cand, w, theta) > _rof_energy(prev, w, theta)
    return np.where(worse[:, None, None], prev, cand)


def _solve_level(i0, i1, u, v, p: TVL1Params, trace: Callable | None):
    lt = p.lambda_data * p.theta_coupling
    tt = p.tau_step / p.theta_coupling
    th = p.theta_coupling
    p11 = np.zeros_like(u)
    p12 = np.zeros_like(u)
    p21 = np.zeros_like(u)
    p22 = np.zeros_like(u)
    for _ in range(p.warps):
        i1w = _warp(i1, u, v)
        ix, iy = _central_grad(i1w)
        grad2 = ix * ix + iy * iy
        rho_c = i1w - i0 - ix * u - iy * v
        textured = grad2 > 1e-9
        safe = np.where(textured, grad2, 1.0)
        for _ in range(p.inner_iterations):
            # pointwise thresholding of the data term
            rho = rho_c + ix * u + iy * v
            step = np.where(rho < -lt * grad2, lt,
                            np.where(rho > lt * grad2, -lt, -rho / safe))
            step = np.where(textured, step, 0.0)
            w1 = u + step * ix
            w2 = v + step * iy
            # one dual projection step of the ROF problem on each component
            g1x, g1y = _forward_grad(w1 + th * _divergence(p11, p12))
            g2x, g2y = _forward_grad(w2 + th * _divergence(p21, p22))
            n1 = 1.0 + tt * np.sqrt(g1x * g1x + g1y * g1y)
            n2 = 1.0 + tt * np.sqrt(g2x * g2x + g2y * g2y)
            p11 = (p11 + tt * g1x) / n1
            p12 = (p12 + tt * g1y) / n1
            p21 = (p21 + tt * g2x) / n2
            p22 = (p22 + tt * g2y) / n2
            u = _monotone(u, w1 + th * _divergence(p11, p12), w1, th)
            v = _monotone(v, w2 + th * _divergence(p21, p22), w2, th)
            if trace is not None:
                trace(u, v, w1, w2, rho_c, ix, iy)
        if p.median_filter:
            u = ndi.median_filter(u, size=(1, 3, 3), mode="nearest")
            v = ndi.median_filter(v, size=(1, 3, 3), mode="nearest")
    return u, v


def tvl1_batch(frames_a, frames_b, params: TVL1Params | None = None, *,
               trace: Callable | None = None) -> np.ndarray:
    """Solve independent pairs stacked as (B, H, W); returns (B, 2, H, W)."""
    p = params or TVL1Params()
    a = np.asarray(frames_a, dtype=np.float64)
    b = np.asarray(frames_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"frame stacks must be equal-shape (B, H, W), got {a.shape} and {b.shape}")
    if min(a.shape[1:]) < p.min_extent():
        raise ValueError(f"frame extents {a.shape[1:]} below minimum {p.min_extent()} for "
                         f"{p.levels} levels at scale {p.scale}")
    pyr = [(a * INTENSITY_SCALE, b * INTENSITY_SCALE)]
    for _ in range(p.levels - 1):
        pa, pb = pyr[-1]
        pyr.append((_downsample(pa, p.scale), _downsample(pb, p.scale)))
    u = np.zeros_like(pyr[-1][0])
    v = np.zeros_like(u)
    for lvl in range(p.levels - 1, -1, -1):
        i0, i1 = pyr[lvl]
        if u.shape != i0.shape:
            fy = i0.shape[1] / u.shape[1]
            fx = i0.shape[2] / u.shape[2]
            u = _resize(u, i0.shape[1:]) * fx
            v = _resize(v, i0.shape[1:]) * fy
        u, v = _solve_level(i0, i1, u, v, p, trace if lvl == 0 else None)
    return np.stack([u, v], axis=1).astype(np.float32)


def tvl1(frame_a, frame_b, params: TVL1Params | None = None, *,
         trace: Callable | None = None) -> FlowField:
    """Flow that carries ``frame_a`` onto ``frame_b``: a(x) ~ b(x + flow).

    ``trace(u, v, w1, w2, rho_c, ix, iy)`` is called after every inner
    iteration of the finest level; see :func:`relaxed_energy`.
    """
    a = np.asarray(frame_a)
    b = np.asarray(frame_b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frames must be equal-shape 2-D arrays, got {a.shape} and {b.shape}")
    out = tvl1_batch(a[None], b[None], params, trace=trace)[0]
    return FlowField(out[0], out[1])


def to_gray(clip: np.ndarray) -> np.ndarray:
    """(3, T, H, W) RGB -> (T, H, W) luma."""
    w = np.asarray(GRAY_WEIGHTS, dtype=np.float64)
    return np.tensordot(w, np.asarray(clip, dtype=np.float64), axes=([0], [0]))


def flow_for_clip(clip, params: TVL1Params | None = None) -> np.ndarray:
    """(3, T, H, W) clip -> (2, T, H, W) flow; frame t holds flow t -> t+1.

    The last frame repeats the flow of the pair before it.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[0] != 3:
        raise ValueError(f"expected a (3, T, H, W) clip, got {clip.shape}")
    t = clip.shape[1]
    if t < 2:
        raise ValueError(f"flow needs at least 2 frames, got T={t}")
    gray = to_gray(clip)
    pairs = tvl1_batch(gray[:-1], gray[1:], params)
    out = np.concatenate([pairs, pairs[-1:]], axis=0)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


# --------------------------------------------------------------------- files

def flo_bytes(flow: FlowField) -> bytes:
    h, w = flow.shape
    body = np.stack([flow.u, flow.v], axis=-1).astype("<f4").tobytes()
    return struct.pack("<fii", FLO_MAGIC, w, h) + body


def flow_from_flo_bytes(buf: bytes) -> FlowField:
    magic, w, h = struct.unpack_from("<fii", buf, 0)
    if magic != np.float32(FLO_MAGIC):
        raise ValueError(f"bad flow magic {magic}")
    if len(buf) != 12 + 8 * w * h:
        raise ValueError(f"flow file size {len(buf)} does not match {w}x{h}")
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())


def write_flo(path, flow: FlowField) -> None:
    with open(path, "wb") as f:
        f.write(flo_bytes(flow))


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        return flow_from_flo_bytes(f.read())
