"""Minimal conv-net substrate: forward passes, analytic gradients, SGD.

Tensors are plain numpy arrays in channels-first (C, H, W) layout. Two dtype
regimes: float64 ("check" mode, used by every gradient test) and float32
("fast" mode, the pipeline default). Layers cache activations during a
training forward and consume them in backward; run one sample's forward and
backward as a pair. Parameter gradients accumulate into .gw/.gb until
zero_grads().

Checkpoints are a small binary container: magic "MSSG1", then per tensor
a uint32 name length, the utf-8 name, a uint32 rank, uint64 extents, and
the values as little-endian float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FAST_DTYPE = np.float32
CHECK_DTYPE = np.float64

CHECKPOINT_MAGIC = b"MSSG1"


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with polynomial learning-rate decay."""

    lr0: float
    max_steps: int
    power: float = 0.9
    batch: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.power < 0:
            raise ValueError(f"power must be >= 0, got {self.power}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


def poly_decay_lr(step: int, cfg: SgdConfig) -> float:
    """lr0 * (1 - step/max_steps)^power, defined for 0 <= step <= max_steps."""
    if not 0 <= step <= cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps}]")
    return cfg.lr0 * (1.0 - step / cfg.max_steps) ** cfg.power


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
    """In-place p <- p - lr * g, elementwise."""
    if len(params) != len(grads):
        raise ValueError("params and grads must pair up")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch in sgd_step: {p.shape} vs {g.shape}")
        p -= (lr * g).astype(p.dtype, copy=False)


def l2_normalize_channels(t: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each pixel's channel vector by max(norm, eps)."""
    norms = np.sqrt(np.sum(t * t, axis=0, keepdims=True))
    return t / np.maximum(norms, eps)


def softmax_channels(z: np.ndarray) -> np.ndarray:
    """Stable softmax over axis 0 of a (C, H, W) array."""
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_vjp(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Backprop grad_probs through a channel softmax with output `probs`."""
    inner = np.sum(probs * grad_probs, axis=0, keepdims=True)
    return probs * (grad_probs - inner)


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1, same-size output."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=FAST_DTYPE):
        self.c_in, self.c_out = c_in, c_out
        bound = (1.0 / (9.0 * c_in)) ** 0.5
        self.w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cols = None
        self._hw = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        xp = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
        xp[:, 1:h + 1, 1:w + 1] = x
        # (c, h, w, 3, 3) windows -> (h*w, c*9) patch matrix
        win = sliding_window_view(xp, (3, 3), axis=(1, 2))
        cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)
        wmat = self.w.reshape(self.c_out, c * 9)
        y = cols @ wmat.T + self.b
        if train:
            self._cols, self._hw = cols, (h, w)
        return y.T.reshape(self.c_out, h, w)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        h, w = self._hw
        gmat = gy.reshape(self.c_out, h * w).T
        self.gb += gmat.sum(axis=0)
        self.gw += (gmat.T @ self._cols).reshape(self.w.shape)
        gcols = gmat @ self.w.reshape(self.c_out, self.c_in * 9)
        g = gcols.reshape(h, w, self.c_in, 3, 3).transpose(2, 3, 4, 0, 1)
        gxp = np.zeros((self.c_in, h + 2, w + 2), dtype=gy.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, di:di + h, dj:dj + w] += g[:, di, dj]
        return gxp[:, 1:h + 1, 1:w + 1]

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]


class Conv1x1:
    """Pointwise linear map across channels, the pixel classifier head."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=FAST_DTYPE):
        self.c_in, self.c_out = c_in, c_out
        bound = (1.0 / c_in) ** 0.5
        self.w = rng.uniform(-bound, bound, size=(c_out, c_in)).astype(dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[0] != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {x.shape[0]}")
        if train:
            self._x = x
        return np.tensordot(self.w, x, axes=([1], [0])) + self.b[:, None, None]

    def backward(self, gy: np.ndarray) -> np.ndarray:
        self.gb += gy.sum(axis=(1, 2))
        self.gw += np.tensordot(gy, self._x, axes=([1, 2], [1, 2]))
        return np.tensordot(self.w.T, gy, axes=([1], [0]))

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy * self._mask

    def params(self):
        return []

    def grads(self):
        return []


class ChannelStandardize:
    """Per-channel standardization over the spatial extent of one sample.

    Stand-in for batch normalization with deterministic, batch-independent
    semantics: y = (x - mean_c) / sqrt(var_c + eps).
    """

    def __init__(self, eps: float = 1e-6):
        self.eps = eps
        self._xhat = None
        self._inv_std = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mu = x.mean(axis=(1, 2), keepdims=True)
        var = x.var(axis=(1, 2), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        if train:
            self._xhat, self._inv_std = xhat, inv_std
        return xhat

    def backward(self, gy: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._xhat, self._inv_std
        gmean = gy.mean(axis=(1, 2), keepdims=True)
        gdot = (gy * xhat).mean(axis=(1, 2), keepdims=True)
        return inv_std * (gy - gmean - xhat * gdot)

    def params(self):
        return []

    def grads(self):
        return []


class AvgPool2:
    """2x2 average pooling with stride 2; spatial dims must be even."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"AvgPool2 needs even spatial dims, got {h}x{w}")
        return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return np.repeat(np.repeat(gy, 2, axis=1), 2, axis=2) * 0.25

    def params(self):
        return []

    def grads(self):
        return []


class BilinearUp2:
    """Exact 2x bilinear upsampling (half-pixel centers, edges clamped)."""

    @staticmethod
    def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
        x = np.moveaxis(x, axis, 1)
        prev = x[:, np.r_[0, 0:x.shape[1] - 1]]
        nxt = x[:, np.r_[1:x.shape[1], x.shape[1] - 1]]
        y = np.empty((x.shape[0], 2 * x.shape[1]) + x.shape[2:], dtype=x.dtype)
        y[:, 0::2] = 0.75 * x + 0.25 * prev
        y[:, 1::2] = 0.75 * x + 0.25 * nxt
        return np.moveaxis(y, 1, axis)

    @staticmethod
    def _down_axis(gy: np.ndarray, axis: int) -> np.ndarray:
        gy = np.moveaxis(gy, axis, 1)
        ge, go = gy[:, 0::2], gy[:, 1::2]
        gx = 0.75 * (ge + go)
        gx[:, 0] += 0.25 * ge[:, 0]
        gx[:, :-1] += 0.25 * ge[:, 1:]
        gx[:, -1] += 0.25 * go[:, -1]
        gx[:, 1:] += 0.25 * go[:, :-1]
        return np.moveaxis(gx, 1, axis)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self._up_axis(self._up_axis(x, 1), 2)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return self._down_axis(self._down_axis(gy, 2), 1)

    def params(self):
        return []

    def grads(self):
        return []


def finite_difference_check(loss_fn, params: list[np.ndarray],
                            analytic: list[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn() recomputes the scalar loss from the current parameter values;
    params are perturbed in place, one entry at a time. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    worst = 0.0
    for p, a in zip(params, analytic):
        if p.shape != a.shape:
            raise ValueError("analytic gradient shape mismatch")
        flat_p, flat_a = p.reshape(-1), a.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            lp = loss_fn()
            flat_p[i] = orig - eps
            lm = loss_fn()
            flat_p[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError("non-finite loss during finite differences")
            num = (lp - lm) / (2.0 * eps)
            ana = float(flat_a[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors in the versioned binary container format."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays, in stored order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint (bad magic): {path}")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", raw, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out
