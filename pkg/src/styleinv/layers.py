"""Neural building blocks shared by the segmenter and the style-transfer net.

All layers are functions of Tensors (NCHW) registered as operation kinds in
:mod:`styleinv.tensor`, so they are differentiable on an active graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, forward_op, register_op

EPS = 1e-5


def _pair(v) -> Tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    # (N, C, H, W) -> columns (C*kh*kw, N*Ho*Wo); rows ordered (c, i, j)
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xpt = np.zeros((c, n, h + 2 * ph, w + 2 * pw), x.dtype)
    xpt[:, :, ph : ph + h, pw : pw + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


@register_op("conv2d")
class _Conv2d:
    @staticmethod
    def forward(x, w, b, stride=(1, 1), padding=(0, 0)):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if c != ci:
            raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias extents {b.shape}, expected ({o},)")
        sh, sw = stride
        ph, pw = padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (wd + 2 * pw - kw) // sw + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{wd}")
        cols = _im2col(x, kh, kw, sh, sw, ph, pw)
        out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo)
        out += b.reshape(o, 1, 1, 1)
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols

    @staticmethod
    def backward(g, cols, x, w, b, stride=(1, 1), padding=(0, 0)):
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        sh, sw = stride
        ph, pw = padding
        ho, wo = g.shape[2], g.shape[3]
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dw = (gt @ cols.T).reshape(w.shape)
        db = gt.sum(axis=1)
        dcols = (w.reshape(o, -1).T @ gt).reshape(c, kh, kw, n, ho, wo)
        dxpt = np.zeros((c, n, h + 2 * ph, wd + 2 * pw), x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxpt[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, i, j]
        dx = dxpt[:, :, ph : ph + h, pw : pw + wd].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(dx), dw, db


@dataclass
class ConvSpec:
    weight: Tensor
    bias: Tensor
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    return forward_op(
        "conv2d",
        [x, spec.weight, spec.bias],
        {"stride": _pair(spec.stride), "padding": _pair(spec.padding)},
    )


# ---------------------------------------------------------------------------
# resampling


@register_op("upsample_nearest")
class _UpNearest:
    @staticmethod
    def forward(x, factor=2):
        return x.repeat(factor, axis=2).repeat(factor, axis=3), None

    @staticmethod
    def backward(g, ctx, x, factor=2):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m


@register_op("resize_bilinear")
class _ResizeBilinear:
    @staticmethod
    def forward(x, size=(1, 1)):
        ah = _bilinear_matrix(x.shape[2], size[0], x.dtype)
        aw = _bilinear_matrix(x.shape[3], size[1], x.dtype)
        return np.einsum("ih,nchw,jw->ncij", ah, x, aw, optimize=True), (ah, aw)

    @staticmethod
    def backward(g, ctx, x, size=(1, 1)):
        ah, aw = ctx
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return forward_op("upsample_nearest", [x], {"factor": int(factor)})


def upsample(x: Tensor, factor: int = 2, mode: str = "nearest") -> Tensor:
    if mode == "nearest":
        return upsample_nearest(x, factor)
    if mode == "bilinear":
        if factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        return forward_op("resize_bilinear", [x], {"size": (x.shape[2] * factor, x.shape[3] * factor)})
    raise ValueError(f"unknown upsampling mode {mode!r}")


@register_op("avg_pool")
class _AvgPool:
    @staticmethod
    def forward(x, factor=2):
        n, c, h, w = x.shape
        if h % factor or w % factor:
            raise ShapeError(f"avg_pool: extents {h}x{w} not divisible by {factor}")
        return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5)), None

    @staticmethod
    def backward(g, ctx, x, factor=2):
        return (g.repeat(factor, axis=2).repeat(factor, axis=3) / (factor * factor),)


def avg_pool(x: Tensor, factor: int = 2) -> Tensor:
    if factor == 1:
        return x
    return forward_op("avg_pool", [x], {"factor": int(factor)})


@register_op("max_pool2x2")
class _MaxPool:
    @staticmethod
    def forward(x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max_pool2x2: odd extents {h}x{w}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, idx

    @staticmethod
    def backward(g, ctx, x):
        n, c, h, w = x.shape
        onehot = (np.arange(4) == ctx[..., None]).astype(x.dtype) * g[..., None]
        dx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)


def max_pool2x2(x: Tensor) -> Tensor:
    return forward_op("max_pool2x2", [x])


# ---------------------------------------------------------------------------
# activations


@register_op("relu")
class _Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0), None

    @staticmethod
    def backward(g, ctx, x):
        return (g * (x > 0),)


@register_op("softmax")
class _Softmax:
    @staticmethod
    def forward(x, axis=1):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        s = z / z.sum(axis=axis, keepdims=True)
        return s, s

    @staticmethod
    def backward(g, s, x, axis=1):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", [x])


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return forward_op("softmax", [x], {"axis": axis})


# ---------------------------------------------------------------------------
# normalisation


def _norm_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m = int(np.prod([xhat.shape[a] for a in axes]))
    return inv_std / m * (
        m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )


def _channel(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


@register_op("batch_norm_train")
class _BatchNormTrain:
    @staticmethod
    def forward(x, gamma, beta, eps=EPS):
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        return xhat * _channel(gamma) + _channel(beta), (xhat, inv_std)

    @staticmethod
    def backward(g, ctx, x, gamma, beta, eps=EPS):
        xhat, inv_std = ctx
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = _norm_backward(g * _channel(gamma), xhat, inv_std, (0, 2, 3))
        return dx, dgamma, dbeta


@register_op("channel_affine")
class _ChannelAffine:
    # y = x * scale + shift with per-channel scale/shift arrays
    @staticmethod
    def forward(x, scale, shift):
        return x * _channel(scale) + _channel(shift), None

    @staticmethod
    def backward(g, ctx, x, scale, shift):
        return g * _channel(scale), (g * x).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))


@register_op("instance_norm")
class _InstanceNorm:
    @staticmethod
    def forward(x, gamma, beta, eps=EPS):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        return xhat * _channel(gamma) + _channel(beta), (xhat, inv_std)

    @staticmethod
    def backward(g, ctx, x, gamma, beta, eps=EPS):
        xhat, inv_std = ctx
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = _norm_backward(g * _channel(gamma), xhat, inv_std, (2, 3))
        return dx, dgamma, dbeta


@register_op("adain")
class _AdaIN:
    @staticmethod
    def forward(x, s, eps=EPS):
        mu_c = x.mean(axis=(2, 3), keepdims=True)
        inv_c = 1.0 / np.sqrt(x.var(axis=(2, 3), keepdims=True) + eps)
        mu_s = s.mean(axis=(2, 3), keepdims=True)
        sig_s = np.sqrt(s.var(axis=(2, 3), keepdims=True) + eps)
        xhat = (x - mu_c) * inv_c
        return sig_s * xhat + mu_s, (xhat, inv_c, mu_s, sig_s)

    @staticmethod
    def backward(g, ctx, x, s, eps=EPS):
        xhat, inv_c, mu_s, sig_s = ctx
        m = s.shape[2] * s.shape[3]
        dx = _norm_backward(g * sig_s, xhat, inv_c, (2, 3))
        dmu = g.sum(axis=(2, 3), keepdims=True)
        dsig = (g * xhat).sum(axis=(2, 3), keepdims=True)
        ds = dmu / m + dsig * (s - mu_s) / (m * sig_s)
        return dx, ds


@dataclass
class NormState:
    """Per-channel normalisation parameters plus (batch kind) running statistics."""

    kind: str
    gamma: Tensor
    beta: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    epsilon: float = EPS

    @classmethod
    def create(cls, kind: str, channels: int, dtype=np.float32) -> "NormState":
        if kind not in ("batch", "instance"):
            raise ValueError(f"unknown norm kind {kind!r}")
        st = cls(kind, Tensor(np.ones(channels, dtype)), Tensor(np.zeros(channels, dtype)))
        if kind == "batch":
            st.running_mean = np.zeros(channels, dtype)
            st.running_var = np.ones(channels, dtype)
        return st

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _check_channels(name: str, x: Tensor, st: NormState) -> None:
    if len(x.shape) != 4:
        raise ShapeError(f"{name}: expected NCHW input, got {x.shape}")
    if x.shape[1] != st.channels:
        raise ShapeError(f"{name}: input has {x.shape[1]} channels, state has {st.channels}")


def batch_norm(x: Tensor, state: NormState, mode: str = "train") -> Tensor:
    """Batch normalisation; train mode also updates ``state``'s running stats in place."""
    if state.kind != "batch":
        raise ValueError("batch_norm needs a NormState of kind 'batch'")
    _check_channels("batch_norm", x, state)
    if mode == "train":
        out = forward_op("batch_norm_train", [x, state.gamma, state.beta], {"eps": state.epsilon})
        data = x.data
        n = data.size // data.shape[1]
        mean = data.mean(axis=(0, 2, 3))
        var = data.var(axis=(0, 2, 3)) * (n / max(n - 1, 1))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(state.running_var.dtype)
        return out
    if mode == "eval":
        dt = x.data.dtype
        inv = (1.0 / np.sqrt(state.running_var.astype(dt) + state.epsilon)).astype(dt)
        normed = forward_op(
            "channel_affine", [x, Tensor(inv), Tensor((-state.running_mean * inv).astype(dt))]
        )
        return forward_op("channel_affine", [normed, state.gamma, state.beta])
    raise ValueError(f"unknown batch_norm mode {mode!r}")


def instance_norm(x: Tensor, state: NormState) -> Tensor:
    if state.kind != "instance":
        raise ValueError("instance_norm needs a NormState of kind 'instance'")
    _check_channels("instance_norm", x, state)
    if x.shape[2] * x.shape[3] < 2:
        raise ShapeError(f"instance_norm: degenerate {x.shape[2]}x{x.shape[3]} plane")
    return forward_op("instance_norm", [x, state.gamma, state.beta], {"eps": state.epsilon})


def adain(content_feat: Tensor, style_feat: Tensor) -> Tensor:
    """Re-normalise each content plane to the mean/std of the matching style plane."""
    if content_feat.shape[1] != style_feat.shape[1]:
        raise ShapeError(
            f"adain: content has {content_feat.shape[1]} channels, style has {style_feat.shape[1]}"
        )
    if content_feat.shape[0] != style_feat.shape[0] and style_feat.shape[0] != 1:
        raise ShapeError(f"adain: batch {content_feat.shape[0]} vs style batch {style_feat.shape[0]}")
    for t in (content_feat, style_feat):
        if t.shape[2] * t.shape[3] < 2:
            raise ShapeError(f"adain: degenerate {t.shape[2]}x{t.shape[3]} plane")
    if style_feat.shape[0] != content_feat.shape[0]:
        style_feat = _broadcast_batch(style_feat, content_feat.shape[0])
    return forward_op("adain", [content_feat, style_feat], {"eps": EPS})


@register_op("repeat_batch")
class _RepeatBatch:
    @staticmethod
    def forward(x, n=1):
        return np.repeat(x, n, axis=0), None

    @staticmethod
    def backward(g, ctx, x, n=1):
        return (g.sum(axis=0, keepdims=True),)


def _broadcast_batch(x: Tensor, n: int) -> Tensor:
    return forward_op("repeat_batch", [x], {"n": n})


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return forward_op("channel_affine", [x, scale, shift])
