"""Dense float tensors with reverse-mode differentiation.

Activations are laid out ``(C, T, H, W)``, or ``(N, C, T, H, W)`` when a
batch axis is present. Convolution kernels are ``(C_out, C_in, T, H, W)``.
"""

from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (frozen teachers, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-d value grid with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else math.prod(
        x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,)))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, key) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.ascontiguousarray(x.data[key]), (x,), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(data, tensors, back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(data, tensors, back)


# ------------------------------------------------------------------- conv & co

@dataclass(frozen=True)
class ConvSpec:
    """Filter bank ``C x (T x H x W)`` with per-axis stride and padding mode."""

    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: str = "same"

    def __post_init__(self):
        if self.out_channels < 1 or min(self.kernel) < 1:
            raise ValueError(f"conv extents must be >= 1, got C={self.out_channels} kernel={self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def is_spatial(self) -> bool:
        return self.kernel[0] == 1

    @property
    def is_temporal(self) -> bool:
        return self.kernel[1] == 1 and self.kernel[2] == 1

    def weight_shape(self, in_channels: int) -> tuple[int, ...]:
        return (self.out_channels, in_channels, *self.kernel)


_AXES = ("time", "height", "width")


def conv_output_extents(extents, kernel, stride, padding: str):
    """Output extents and (before, after) pads per axis."""
    out, pads = [], []
    for n, k, s in zip(extents, kernel, stride):
        if padding == "same":
            o = -(-n // s)
            total = max((o - 1) * s + k - n, 0)
            pads.append((total // 2, total - total // 2))
        else:
            o = (n - k) // s + 1
            pads.append((0, 0))
        out.append(o)
    return tuple(out), tuple(pads)


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data[None], True
    if x.ndim == 5:
        return x.data, False
    raise ValueError(f"expected activation of rank 4 (C,T,H,W) or 5 (N,C,T,H,W), got rank {x.ndim}")


def conv3d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    xb, squeeze = _batched(x)
    n, cin = xb.shape[:2]
    expected = spec.weight_shape(cin)
    if weight.shape != expected:
        for ax, (got, want) in enumerate(zip(weight.shape, expected)):
            if got != want:
                name = ("out_channels", "in_channels", *(f"kernel {a}" for a in _AXES))[ax]
                raise ValueError(f"conv3d weight mismatch on {name} axis: weight has {got}, expected {want}")
        raise ValueError(f"conv3d weight rank {weight.ndim}, expected {len(expected)}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"conv3d bias shape {bias.shape}, expected ({spec.out_channels},)")
    (to, ho, wo), pads = conv_output_extents(xb.shape[2:], spec.kernel, spec.stride, spec.padding)
    for ax, o in enumerate((to, ho, wo)):
        if o < 1:
            raise ValueError(f"conv3d input too small on {_AXES[ax]} axis: extent {xb.shape[2 + ax]}, kernel {spec.kernel[ax]}")
    xp = np.pad(xb, ((0, 0), (0, 0), *pads)) if any(p != (0, 0) for p in pads) else xb
    st, sh, sw = spec.stride
    kt, kh, kw = spec.kernel
    w = weight.data
    out = np.zeros((spec.out_channels, n, to, ho, wo), dtype=x.dtype)
    windows = []
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                sl = (slice(None), slice(None),
                      slice(a, a + st * (to - 1) + 1, st),
                      slice(b, b + sh * (ho - 1) + 1, sh),
                      slice(c, c + sw * (wo - 1) + 1, sw))
                windows.append(((a, b, c), sl))
                out += np.tensordot(w[:, :, a, b, c], xp[sl], axes=([1], [1]))
    if bias is not None:
        out += bias.data[:, None, None, None, None]
    res = out.transpose(1, 0, 2, 3, 4)
    if squeeze:
        res = res[0]
    res = np.ascontiguousarray(res)

    def back(g):
        gb = g[None] if squeeze else g
        gw = np.zeros_like(w) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for (a, b, c), sl in windows:
            if gw is not None:
                gw[:, :, a, b, c] = np.tensordot(gb, xp[sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if gxp is not None:
                gxp[sl] += np.tensordot(w[:, :, a, b, c], gb, axes=([0], [1])).transpose(1, 0, 2, 3, 4)
        gx = None
        if gxp is not None:
            crop = (slice(None), slice(None)) + tuple(
                slice(p0, gxp.shape[2 + i] - p1) for i, (p0, p1) in enumerate(pads))
            gx = gxp[crop]
            gx = gx[0] if squeeze else gx
        gbias = gb.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gbias)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(res, parents, back)


def avg_pool3d(x: Tensor, window, stride=None) -> Tensor:
    """Mean over each window; no padding."""
    window = tuple(int(k) for k in window)
    stride = window if stride is None else tuple(int(s) for s in stride)
    if min(window) < 1:
        raise ValueError(f"pooling window extents must be >= 1, got {window}")
    if min(stride) < 1:
        raise ValueError(f"pooling stride must be >= 1, got {stride}")
    xb, squeeze = _batched(x)
    for ax in range(3):
        if window[ax] > xb.shape[2 + ax]:
            raise ValueError(f"pooling window {window[ax]} exceeds {_AXES[ax]} extent {xb.shape[2 + ax]}")
    (to, ho, wo), _ = conv_output_extents(xb.shape[2:], window, stride, "valid")
    scale = 1.0 / math.prod(window)
    slices = []
    out = np.zeros(xb.shape[:2] + (to, ho, wo), dtype=x.dtype)
    for a in range(window[0]):
        for b in range(window[1]):
            for c in range(window[2]):
                sl = (slice(None), slice(None),
                      slice(a, a + stride[0] * (to - 1) + 1, stride[0]),
                      slice(b, b + stride[1] * (ho - 1) + 1, stride[1]),
                      slice(c, c + stride[2] * (wo - 1) + 1, stride[2]))
                slices.append(sl)
                out += xb[sl]
    out *= scale
    res = out[0] if squeeze else out

    def back(g):
        gb = g[None] if squeeze else g
        gx = np.zeros_like(xb)
        for sl in slices:
            gx[sl] += gb * scale
        return (gx[0] if squeeze else gx,)

    return _make(res, (x,), back)


def upsample_nearest(x: Tensor, factors) -> Tensor:
    """Repeat each cell ``factors`` times along (T, H, W)."""
    ft, fh, fw = (int(f) for f in factors)
    d = x.data
    off = d.ndim - 3
    out = d.repeat(ft, axis=off).repeat(fh, axis=off + 1).repeat(fw, axis=off + 2)

    def back(g):
        lead = g.shape[:off]
        t, h, w = x.shape[off:]
        return (g.reshape(*lead, t, ft, h, fh, w, fw).sum(axis=(off + 1, off + 3, off + 5)),)

    return _make(out, (x,), back)


def channel_affine(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Per-channel ``x * scale + bias`` (stands in for batch normalization)."""
    xb, squeeze = _batched(x)
    s = scale.data[:, None, None, None]
    out = xb * s + bias.data[:, None, None, None]
    res = out[0] if squeeze else out

    def back(g):
        gb = g[None] if squeeze else g
        gx = gb * s
        return (gx[0] if squeeze else gx,
                (gb * xb).sum(axis=(0, 2, 3, 4)),
                gb.sum(axis=(0, 2, 3, 4)))

    return _make(res, (x, scale, bias), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(C,T,H,W) -> (C,), (N,C,T,H,W) -> (N,C)."""
    return mean(x, axis=(-3, -2, -1))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (C,) or (N, C)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = g2.T @ x2
        gx = (g @ weight.data)
        gbias = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gbias)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.astype(x.dtype), parents, back)


# ---------------------------------------------------------------------- losses

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label]; batched logits (N, K) take N labels and average."""
    k = logits.shape[-1]
    if k < 2:
        raise ValueError(f"cross-entropy needs at least 2 classes, got {k}")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {label}")
    z = logits.data.reshape(-1, k)
    if z.shape[0] != labels.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows but {labels.shape[0]} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    losses = logsum - shifted[rows, labels]
    n = len(labels)
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype),)

    return _make(out, (logits,), back)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return mean(diff * diff)


# ---------------------------------------------------------------- gradient check

def finite_difference_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                            eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are summed. Everything
    runs in float64. A non-finite analytic gradient returns ``inf``.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"epsilon must lie in [1e-4, 1e-2], got {eps}")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]

    def evaluate(arrs, track):
        ts = [Tensor(a, requires_grad=track, dtype=np.float64) for a in arrs]
        out = fn(*ts)
        if out.size != 1:
            out = tsum(out)
        return out, ts

    out, ts = evaluate(arrays, True)
    out.backward()
    worst = 0.0
    for i, t in enumerate(ts):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(analytic)):
            return math.inf
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                fp = evaluate(arrays, False)[0].item()
            flat[j] = orig - eps
            with no_grad():
                fm = evaluate(arrays, False)[0].item()
            flat[j] = orig
            cd = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[j] - cd) / max(1.0, abs(cd))
            worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ parameters

Parameters = dict  # name -> Tensor, insertion-ordered


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def clone_parameters(params: Parameters) -> Parameters:
    return {k: parameter(v.data.copy()) for k, v in params.items()}


def zero_grads(params: Parameters) -> None:
    for p in params.values():
        p.grad = None


CHECKPOINT_MAGIC = b"D3DW"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: Parameters) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def parameters_from_bytes(buf: bytes) -> Parameters:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    params: Parameters = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        n = math.prod(shape)
        values = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        off += 4 * n
        params[name] = parameter(values)
    if off != len(buf):
        raise ValueError(f"trailing bytes in checkpoint ({len(buf) - off})")
    return params


def save_checkpoint(path, params: Parameters) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def load_checkpoint(path) -> Parameters:
    with open(path, "rb") as f:
        return parameters_from_bytes(f.read())


def checksum(params: Parameters) -> str:
    import hashlib
    return hashlib.sha256(checkpoint_bytes(params)).hexdigest()


class SGD:
    """Momentum SGD with global gradient-norm clipping."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = 10.0, lr_scales: Sequence[float] | None = None):
        self.params = list(params)
        self.lr = lr
        # per-parameter multipliers on lr; clipping still uses the global norm
        self.lr_scales = [1.0] * len(self.params) if lr_scales is None else list(lr_scales)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("lr_scales must give one factor per parameter")
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                             for p in self.params if p.grad is not None))

    def step(self) -> float:
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for p, v, s in zip(self.params, self._velocity, self.lr_scales):
            if p.grad is None:
                continue
            v *= self.momentum
            v += (p.grad * factor).astype(v.dtype)
            p.data -= (self.lr * s * v).astype(p.data.dtype)
        return norm
